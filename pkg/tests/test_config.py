import pytest

from dtltune.config import MODE_DEFAULTS, ConfigError, RunConfig, load_config, parse_config


def test_empty_config_takes_three_action_presets():
    cfg = parse_config("")
    assert cfg.mode == "3action" and cfg.hidden == (10,) and cfg.workers == 1
    assert cfg.max_steps == 5000 and cfg.reset_mode == "fixed"
    assert cfg.make_env().state_dim == 13


def test_five_action_presets():
    cfg = parse_config("[run]\nmode = 5action\n")
    assert cfg.hidden == (40, 20) and cfg.workers == 4 and cfg.max_steps == 700
    assert cfg.monitor and cfg.reset_mode == "random"
    assert cfg.eval_sample_size == 200 and cfg.eval_max_steps == 700


def test_values_are_parsed():
    text = """
[run]
seed = 7
episodes = 12
[network]
hidden = 8, 4
shared = yes
[a3c]
loss_variant = eq6
lr_policy = 0.002
[reward]
weights = 0.1, 0.1, 0.1, 0.1, 0.1
[env]
start = 40, 65, 100, 65, 300
"""
    cfg = parse_config(text)
    assert cfg.seed == 7 and cfg.episodes == 12 and cfg.hidden == (8, 4) and cfg.shared
    assert cfg.hp.loss_variant == "eq6" and cfg.hp.lr_policy == 0.002 and cfg.hp.seed == 7
    assert cfg.reward.weights == (0.1,) * 5
    assert cfg.start.t2_phase == 100.0


@pytest.mark.parametrize("text", [
    "[nonsense]\na = 1\n",
    "[run]\nbogus = 1\n",
    "[run]\nepisodes = many\n",
    "[run]\nmode = 4action\n",
    "[a3c]\ngamma = 1.5\n",
    "[a3c]\nloss_variant = eq9\n",
    "[env]\nstart = 10, 0, 0, 0, 0\n",
    "[env]\nreset_mode = sometimes\n",
    "[reward]\nweights = 1, 2\n",
    "[network]\ndropout = 1.0\n",
    "[network]\nshared = maybe\n",
    "[bounds]\nmin = 50, 61.7, 0, 60.3, 0\n",
    "no section header\n",
])
def test_schema_violations_are_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_round_trip_through_ini():
    cfg = parse_config("[run]\nmode = 5action\nseed = 3\n[a3c]\nc1 = 4.5\n")
    again = parse_config(cfg.to_ini())
    assert again.to_ini() == cfg.to_ini()
    assert again.digest() == cfg.digest()
    assert again.hp == cfg.hp and again.lattice == cfg.lattice


def test_digest_changes_with_content():
    assert parse_config("[run]\nseed = 1\n").digest() != parse_config("[run]\nseed = 2\n").digest()


def test_missing_file_names_path(tmp_path):
    path = tmp_path / "absent.ini"
    with pytest.raises(ConfigError, match="absent.ini"):
        load_config(path)


def test_worker_seeds_differ():
    cfg = RunConfig(mode="5action", seed=2)
    a, b = cfg.make_env(0), cfg.make_env(1)
    assert not (a.reset() == b.reset()).all()


def test_policy_learning_rate_follows_mode():
    assert parse_config("").hp.lr_policy == MODE_DEFAULTS["3action"]["lr_policy"]
    assert parse_config("[run]\nmode = 5action\n").hp.lr_policy == MODE_DEFAULTS["5action"]["lr_policy"]
    assert parse_config("[run]\nmode = 5action\n[a3c]\nlr_policy = 0.01\n").hp.lr_policy == 0.01
    assert RunConfig(mode="5action").hp.lr_policy == MODE_DEFAULTS["5action"]["lr_policy"]
