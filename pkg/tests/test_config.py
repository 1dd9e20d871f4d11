import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divae.config import ConfigError, ExperimentConfig, from_text, load_config


def test_defaults_follow_reference_training_setup():
    c = ExperimentConfig()
    assert (c.lr, c.batch_size, c.epochs, c.sigma_x) == (1e-3, 128, 100, 0.02)
    assert (c.flow_layers, c.flow_hidden, c.seeds) == (5, 16, [0, 1, 2])
    assert (c.k, c.dim, c.d, c.n_train) == (4, 50, 2, 60_000)


def test_desk_preset():
    c = load_config(preset="desk")
    assert (c.n_train, c.epochs, len(c.seeds)) == (10_000, 30, 3)


def test_text_round_trip():
    c = ExperimentConfig(priors=["gmm", "vamp"], seeds=[3, 5], lr=3.5e-4, detach_encoder=True, out="x/y")
    assert from_text(c.to_text()) == c


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-6, 1.0), st.integers(1, 500), st.lists(st.integers(0, 99), min_size=1, max_size=4),
       st.booleans(), st.sampled_from(["kde", "oracle", "knn-adaptive"]))
def test_round_trip_property(lr, epochs, seeds, detach, teacher):
    c = ExperimentConfig(lr=lr, epochs=epochs, seeds=seeds, detach_encoder=detach, teacher=teacher)
    assert from_text(c.to_text()) == c


def test_comments_and_blank_lines(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# sweep\n\nepochs = 7   # short\npriors = gmm\n")
    c = load_config(p)
    assert c.epochs == 7 and c.priors == ["gmm"]


def test_unknown_key_is_error():
    with pytest.raises(ConfigError, match="unknown key 'epoch'"):
        from_text("epoch = 3\n")


def test_all_violations_listed():
    c = ExperimentConfig(lr=-1.0, epochs=0, priors=["gmm", "laplace"], teacher="magic")
    with pytest.raises(ConfigError) as info:
        c.validate()
    joined = "\n".join(info.value.problems)
    for field in ("lr", "epochs", "laplace", "teacher"):
        assert field in joined
    assert len(info.value.problems) >= 4


def test_bad_value_types():
    with pytest.raises(ConfigError) as info:
        from_text("epochs = many\ndetach_encoder = perhaps\n")
    assert len(info.value.problems) == 2


def test_digest_ignores_output_directory():
    a, b = ExperimentConfig(out="a"), ExperimentConfig(out="b")
    assert a.digest() == b.digest()
    assert a.digest() != ExperimentConfig(lr=2e-3).digest()
    assert a.cell_hash("gmm", "none", 0) != a.cell_hash("gmm", "none", 1)
