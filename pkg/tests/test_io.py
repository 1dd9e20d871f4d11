import json
import struct

import numpy as np
import pytest

from divae.aligners import AlignConfig
from divae.density import estimate_teacher
from divae.errors import FormatError
from divae.io import (
    RunManifest,
    dump_checkpoint,
    load_checkpoint,
    load_dataset,
    load_density,
    load_mnist_split,
    parse_idx,
    save_checkpoint,
    save_dataset,
    save_density,
    write_idx,
)
from divae.synthgen import build_dataset, default_spec
from divae.training import Trainer, TrainConfig
from divae.vae import VaeConfig, make_vae


def test_idx_images_and_labels(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    write_idx(tmp_path / "im", imgs)
    assert (tmp_path / "im").read_bytes()[:4] == bytes([0, 0, 8, 3])
    parsed = parse_idx(tmp_path / "im")
    assert parsed.count == 5 and parsed.rows == parsed.cols == 28
    np.testing.assert_array_equal(parsed.pixels, imgs.reshape(5, -1) / 255.0)
    labels = np.arange(10, dtype=np.uint8)
    write_idx(tmp_path / "lab", labels)
    assert struct.unpack(">I", (tmp_path / "lab").read_bytes()[:4])[0] == 2049
    np.testing.assert_array_equal(parse_idx(tmp_path / "lab"), labels)


def test_idx_errors_report_offsets(tmp_path):
    (tmp_path / "bad").write_bytes(struct.pack(">II", 1234, 3))
    with pytest.raises(FormatError, match="byte 0"):
        parse_idx(tmp_path / "bad")
    write_idx(tmp_path / "im", np.zeros((2, 4, 4), dtype=np.uint8))
    raw = (tmp_path / "im").read_bytes()
    (tmp_path / "trunc").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="byte"):
        parse_idx(tmp_path / "trunc")


def test_mnist_loader_and_missing_files(tmp_path):
    write_idx(tmp_path / "t10k-images-idx3-ubyte", np.full((3, 28, 28), 255, dtype=np.uint8))
    write_idx(tmp_path / "t10k-labels-idx1-ubyte", np.array([1, 2, 3], dtype=np.uint8))
    X, y = load_mnist_split(tmp_path, "test")
    assert X.shape == (3, 784) and X.max() == 1.0 and list(y) == [1, 2, 3]
    with pytest.raises(FileNotFoundError, match="download"):
        load_mnist_split(tmp_path, "train")


def test_dataset_round_trip_bit_exact(tmp_path):
    tr, _ = build_dataset(default_spec(4), 12, 0.02, 200, 10, seed=3)
    save_dataset(tmp_path / "d.divd", tr)
    back = load_dataset(tmp_path / "d.divd")
    for name in ("X", "labels", "rotation"):
        assert np.array_equal(getattr(back, name), getattr(tr, name))
    assert back.X.tobytes() == tr.X.tobytes()
    assert np.array_equal(back.spec.covs, tr.spec.covs)
    assert (back.sigma_pad, back.seed, back.split) == (tr.sigma_pad, tr.seed, tr.split)


def test_density_round_trip_bit_exact(tmp_path):
    tr, _ = build_dataset(default_spec(4), 12, 0.02, 300, 10, seed=3)
    est = estimate_teacher(tr.X, "knn-adaptive", 2, k_max=32)
    save_density(tmp_path / "t.divr", est)
    back = load_density(tmp_path / "t.divr")
    assert back.rho.tobytes() == est.rho.tobytes()
    assert back.sigma.tobytes() == est.sigma.tobytes()
    assert np.array_equal(back.k_hat, est.k_hat) and np.array_equal(back.fallback, est.fallback)
    assert back.projector.components.tobytes() == est.projector.components.tobytes()


def test_checkpoint_round_trip_bit_exact(tmp_path):
    tensors = {"a": np.random.default_rng(0).normal(size=(3, 4)), "b": np.arange(5.0), "c": np.array(2.5)}
    save_checkpoint(tmp_path / "m.divm", {"epoch": 3, "name": "x"}, tensors)
    meta, back = load_checkpoint(tmp_path / "m.divm")
    assert meta == {"epoch": 3, "name": "x"}
    for k, v in tensors.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.tobytes()


@pytest.mark.parametrize("cut", [1, 4, 20])
def test_truncated_container_is_checksum_error(tmp_path, cut):
    blob = dump_checkpoint({"k": 1}, {"a": np.ones(10)})
    (tmp_path / "m.divm").write_bytes(blob[:-cut])
    with pytest.raises(FormatError, match="checksum"):
        load_checkpoint(tmp_path / "m.divm")


def test_wrong_magic_and_version(tmp_path):
    blob = bytearray(dump_checkpoint({}, {}))
    (tmp_path / "x").write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        load_dataset(tmp_path / "x")
    import zlib

    blob[4:8] = struct.pack("<I", 99)
    body = bytes(blob[:-4])
    (tmp_path / "y").write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(tmp_path / "y")


def _trainer(X, teacher, method):
    model = make_vae(VaeConfig(input_dim=X.shape[1], latent_dim=2, prior="gmm", prior_components=4), seed=1)
    return Trainer(model, X, AlignConfig(method), TrainConfig(epochs=3, batch_size=64, seed=1), teacher)


@pytest.mark.parametrize("method", ["direct", "flow"])
def test_resume_continues_loss_trajectory(tmp_path, method):
    tr, _ = build_dataset(default_spec(4), 10, 0.02, 300, 10, seed=0)
    teacher = estimate_teacher(tr.X, "knn-adaptive", 2, k_max=32)
    ref = _trainer(tr.X, teacher, method)
    for _ in range(7):  # stop mid-epoch
        ref.step()
    ref.save(tmp_path / "ck.divm")
    expected = [ref.step()[0] for _ in range(3)]
    resumed = _trainer(tr.X, teacher, method)
    resumed.load_state(*load_checkpoint(tmp_path / "ck.divm"))
    got = [resumed.step()[0] for _ in range(3)]
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-9)


def test_manifest_digest_tracks_inputs(tmp_path):
    m = RunManifest({"lr": 0.001}, [0], {"train": "aa"}, "tt", "g1", {"train": 1.0})
    same = RunManifest({"lr": 0.001}, [0], {"train": "aa"}, "tt", "g2", {"train": 9.0})
    assert m.digest() == same.digest()
    for other in (RunManifest({"lr": 0.002}, [0], {"train": "aa"}, "tt", "g1", {}),
                  RunManifest({"lr": 0.001}, [1], {"train": "aa"}, "tt", "g1", {}),
                  RunManifest({"lr": 0.001}, [0], {"train": "ab"}, "tt", "g1", {}),
                  RunManifest({"lr": 0.001}, [0], {"train": "aa"}, "tu", "g1", {})):
        assert other.digest() != m.digest()
    m.save(tmp_path / "manifest.json")
    assert RunManifest.load(tmp_path / "manifest.json").digest() == m.digest()
    assert json.loads((tmp_path / "manifest.json").read_text())["digest"] == m.digest()
