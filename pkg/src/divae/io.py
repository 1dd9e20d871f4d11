"""File formats: IDX ingestion and the package's own binary containers.

Container layout (all little-endian)::

    magic   4 bytes  b"DIVD" | b"DIVR" | b"DIVM"
    version u32
    body    format specific
    crc32   u32 over every preceding byte

Writes go to a temporary file in the target directory and are renamed into
place, so readers never observe a partial file.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import subprocess
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .density import DensityEstimate, PcaProjector
from .errors import FormatError
from .synthgen import Gmm2dSpec, SyntheticDataset

FORMAT_VERSION = 1
IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

# ------------------------------------------------------------------- IDX


@dataclass
class IdxImages:
    pixels: np.ndarray  # (N, rows * cols) in [0, 1]
    rows: int
    cols: int

    @property
    def count(self) -> int:
        return self.pixels.shape[0]


def parse_idx(path) -> IdxImages | np.ndarray:
    """Read an uncompressed IDX file: images come back scaled to [0, 1], labels as uint8."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header at byte {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise FormatError(f"{path}: bad IDX magic {magic} at byte 0")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header at byte {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{path}: payload ends at byte {len(raw)}, expected {expected}")
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if ndim == 1:
        return payload.copy()
    n, rows, cols = dims
    return IdxImages(payload.reshape(n, rows * cols).astype(np.float64) / 255.0, rows, cols)


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 images (N, rows, cols) or labels (N,) in IDX layout."""
    array = np.asarray(array, dtype=np.uint8)
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    head = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    atomic_write(path, head + array.tobytes())


def load_mnist_split(directory, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Load ``{train,t10k}-{images,labels}-idx?-ubyte`` from a directory."""
    d = Path(directory)
    prefix = "train" if split == "train" else "t10k"
    img_path = d / f"{prefix}-images-idx3-ubyte"
    lab_path = d / f"{prefix}-labels-idx1-ubyte"
    for p in (img_path, lab_path):
        if not p.exists():
            raise FileNotFoundError(
                f"{p} not found; download the uncompressed IDX files (e.g. from the MNIST or "
                f"Fashion-MNIST distribution) into {d}"
            )
    images = parse_idx(img_path)
    labels = parse_idx(lab_path)
    return images.pixels, labels.astype(np.int64)


# ---------------------------------------------------------- binary container


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Writer:
    def __init__(self, magic: bytes):
        self.parts = [magic, struct.pack("<I", FORMAT_VERSION)]

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def u64(self, v):
        self.parts.append(struct.pack("<Q", v))

    def i64(self, v):
        self.parts.append(struct.pack("<q", v))

    def f64(self, v):
        self.parts.append(struct.pack("<d", v))

    def string(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.parts.append(b)

    def raw(self, arr: np.ndarray, dtype: str):
        self.parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())

    def array(self, arr: np.ndarray):
        arr = np.asarray(arr, dtype=np.float64)
        self.u32(arr.ndim)
        for n in arr.shape:
            self.u64(n)
        self.raw(arr, "<f8")

    def finish(self) -> bytes:
        body = b"".join(self.parts)
        return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, magic: bytes, path):
        self.path = path
        if len(data) < 12:
            raise FormatError(f"{path}: file too short ({len(data)} bytes)")
        if data[:4] != magic:
            raise FormatError(f"{path}: expected magic {magic!r}, found {data[:4]!r}")
        (crc,) = struct.unpack("<I", data[-4:])
        if zlib.crc32(data[:-4]) != crc:
            raise FormatError(f"{path}: checksum mismatch (corrupt or truncated file)")
        (version,) = struct.unpack("<I", data[4:8])
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {version} (reader is {FORMAT_VERSION})")
        self.data = data[:-4]
        self.pos = 8

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: unexpected end of data at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def _unpack(self, fmt: str):
        return struct.unpack(fmt, self._take(struct.calcsize(fmt)))[0]

    def u8(self):
        return self._unpack("<B")

    def u32(self):
        return self._unpack("<I")

    def u64(self):
        return self._unpack("<Q")

    def i64(self):
        return self._unpack("<q")

    def f64(self):
        return self._unpack("<d")

    def string(self) -> str:
        return self._take(self.u32()).decode("utf-8")

    def raw(self, shape, dtype: str) -> np.ndarray:
        count = int(np.prod(shape))
        itemsize = np.dtype(dtype).itemsize
        buf = self._take(count * itemsize)
        return np.frombuffer(buf, dtype=dtype).reshape(shape).astype(dtype[1:], copy=True)

    def array(self) -> np.ndarray:
        ndim = self.u32()
        shape = tuple(self.u64() for _ in range(ndim))
        return self.raw(shape, "<f8")

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.path}: {len(self.data) - self.pos} trailing bytes")


# ------------------------------------------------------------------ DIVD


def dump_dataset(ds: SyntheticDataset) -> bytes:
    n, dim = ds.X.shape
    w = _Writer(b"DIVD")
    w.u64(n)
    w.u32(dim)
    w.u32(ds.spec.k)
    w.raw(ds.X, "<f8")
    w.raw(ds.labels, "<i8")
    w.raw(ds.rotation, "<f8")
    w.raw(ds.ancestor_projector, "<f8")
    w.raw(ds.spec.weights, "<f8")
    w.raw(ds.spec.means, "<f8")
    w.raw(ds.spec.covs, "<f8")
    w.f64(ds.sigma_pad)
    w.i64(ds.seed)
    w.string(ds.split)
    return w.finish()


def save_dataset(path, ds: SyntheticDataset) -> None:
    atomic_write(path, dump_dataset(ds))


def load_dataset(path) -> SyntheticDataset:
    r = _Reader(Path(path).read_bytes(), b"DIVD", path)
    n, dim, k = r.u64(), r.u32(), r.u32()
    X = r.raw((n, dim), "<f8")
    labels = r.raw((n,), "<i8")
    R = r.raw((dim, dim), "<f8")
    proj = r.raw((2, dim), "<f8")
    spec = Gmm2dSpec(r.raw((k,), "<f8"), r.raw((k, 2), "<f8"), r.raw((k, 2, 2), "<f8"))
    sigma_pad, seed, split = r.f64(), r.i64(), r.string()
    r.done()
    ds = SyntheticDataset(X, labels, R, sigma_pad, spec, split, seed)
    if not np.array_equal(proj, ds.ancestor_projector):
        raise FormatError(f"{path}: stored ancestor projector disagrees with the rotation")
    return ds


# ------------------------------------------------------------------ DIVR


def dump_density(est: DensityEstimate) -> bytes:
    w = _Writer(b"DIVR")
    n = est.n
    w.u64(n)
    w.string(est.estimator)
    w.raw(est.rho, "<f8")
    w.raw(est.sigma, "<f8")
    for extra, dtype in ((est.k_hat, "<i8"), (est.fallback, "<u1")):
        w.u8(extra is not None)
        if extra is not None:
            w.raw(extra, dtype)
    p = est.projector
    w.u8(p is not None)
    if p is not None:
        w.u32(p.components.shape[1])
        w.u32(p.d)
        w.raw(p.mean, "<f8")
        w.raw(p.components, "<f8")
        w.raw(p.explained_variance, "<f8")
    return w.finish()


def save_density(path, est: DensityEstimate) -> None:
    atomic_write(path, dump_density(est))


def load_density(path) -> DensityEstimate:
    r = _Reader(Path(path).read_bytes(), b"DIVR", path)
    n = r.u64()
    tag = r.string()
    rho, sigma = r.raw((n,), "<f8"), r.raw((n,), "<f8")
    k_hat = r.raw((n,), "<i8") if r.u8() else None
    fallback = r.raw((n,), "<u1").astype(bool) if r.u8() else None
    projector = None
    if r.u8():
        dim, d = r.u32(), r.u32()
        projector = PcaProjector(r.raw((dim,), "<f8"), r.raw((d, dim), "<f8"), r.raw((d,), "<f8"))
    r.done()
    return DensityEstimate(rho, sigma, tag, projector, k_hat, fallback)


# ------------------------------------------------------------------ DIVM


def dump_checkpoint(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    w = _Writer(b"DIVM")
    w.string(json.dumps(meta, sort_keys=True))
    w.u32(len(tensors))
    for name in sorted(tensors):
        w.string(name)
        w.array(tensors[name])
    return w.finish()


def save_checkpoint(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    atomic_write(path, dump_checkpoint(meta, tensors))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes(), b"DIVM", path)
    meta = json.loads(r.string())
    tensors = {}
    for _ in range(r.u32()):
        name = r.string()
        tensors[name] = r.array()
    r.done()
    return meta, tensors


# -------------------------------------------------------------- manifests


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


@dataclass
class RunManifest:
    config: dict
    seeds: list
    dataset_hashes: dict
    teacher_hash: str
    git: str
    timings: dict

    def digest(self) -> str:
        """Hash of the run's inputs; timings and the git string are excluded."""
        payload = {
            "config": self.config,
            "seeds": self.seeds,
            "datasets": self.dataset_hashes,
            "teacher": self.teacher_hash,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def to_json(self) -> str:
        body = {
            "config": self.config,
            "seeds": self.seeds,
            "dataset_hashes": self.dataset_hashes,
            "teacher_hash": self.teacher_hash,
            "git": self.git,
            "timings": self.timings,
            "digest": self.digest(),
        }
        return json.dumps(body, indent=2, sort_keys=True)

    def save(self, path) -> None:
        atomic_write(path, self.to_json().encode())

    @classmethod
    def load(cls, path) -> "RunManifest":
        body = json.loads(Path(path).read_text())
        return cls(body["config"], body["seeds"], body["dataset_hashes"], body["teacher_hash"],
                   body["git"], body["timings"])
