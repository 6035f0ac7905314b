import pytest

from fedgcdr.config import ConfigError, RunConfig, load_config


def write(tmp_path, text):
    p = tmp_path / "run.toml"
    p.write_text(text, encoding="utf-8")
    return p


def test_defaults_follow_reference_settings():
    p = RunConfig().pipeline
    assert (p.dim, p.n_layers, p.batch_size, p.lr, p.alpha, p.beta) == (8, 2, 256, 0.01, 0.01, 0.01)
    assert (p.epsilon, p.delta, p.ks) == (8.0, 1e-5, (5, 10))
    assert RunConfig().attack.epsilons == (4.0, 8.0, 16.0, 32.0, 64.0)


def test_file_values_and_root_seed(tmp_path):
    cfg = load_config(write(tmp_path, 'seed = 7\nmode = "ablate-T"\n[pipeline]\nrounds = 3\nks = [1, 5]\n'))
    assert cfg.pipeline.rounds == 3 and cfg.pipeline.ks == (1, 5)
    assert cfg.pipeline.seed == cfg.synth.seed == 7 and cfg.pipeline.mode == "ablate-T"


def test_flags_beat_file(tmp_path):
    cfg = load_config(write(tmp_path, "seed = 7\nthreads = 2\n")).with_overrides(seed=9, threads=None, mode="single-domain")
    assert (cfg.seed, cfg.threads, cfg.pipeline.mode) == (9, 2, "single-domain")


def test_round_trip_through_dict(tmp_path):
    cfg = load_config(write(tmp_path, "seed = 3\n[synth]\nn_users = 20\n[attack]\nepsilons = [2.0, 4]\n"))
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("text, msg", [
    ("bogus = 1\n", "unknown config keys"),
    ("[pipeline]\nrounds = 1\nwhat = 2\n", r"unknown keys in \[pipeline\]"),
    ("[pipeline]\nseed = 4\n", "unknown keys"),
    ("[pipeline]\nrounds = 1.5\n", "must be an integer"),
    ("[pipeline]\ndp_enabled = 1\n", "true or false"),
    ("[attack]\nepsilons = 8\n", "must be a list"),
    ('mode = "turbo"\n', "mode must be one of"),
    ("threads = 0\n", "threads"),
    ("[synth]\ndensity = 2.0\n", "density"),
    ("pipeline = 3\n", "must be a table"),
    ("[pipeline]\nepsilon = 0\n", "epsilon"),
    ("seed = \n", "run.toml"),
])
def test_invalid_configs(tmp_path, text, msg):
    with pytest.raises(ConfigError, match=msg):
        load_config(write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="nope.toml"):
        load_config(tmp_path / "nope.toml")


def test_seed_range():
    with pytest.raises(ConfigError):
        RunConfig(seed=-1)
    assert RunConfig(seed=2**64 - 1).seed == 2**64 - 1


def test_noise_multiplier_overrides_closed_form(tmp_path):
    cfg = load_config(write(tmp_path, "[pipeline]\nnoise_multiplier = 1e-5\n"))
    assert cfg.pipeline.dp.sigma == 1e-5
    assert RunConfig().pipeline.dp.sigma == pytest.approx(0.6056, abs=1e-4)
