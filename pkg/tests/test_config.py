import pytest

from doseshrink.config import (AUTO, ConfigError, RunConfig, load_config, parse_config, serialize_config)
from doseshrink.priors import PriorSpec

FULL = """
[run]
seed = 42
threads = 2

[data]
path = /data/trial.csv
continuous = c1, c2   ; trailing comment
categorical = f1
standardize = yes

[prior]
family = hs
dependent = false
phi = 0.2
eta_beta = 0.03
eta_gamma = auto
eta_delta = 0.026
guesstimates = 1.2, 0.17

[mcmc]
chains = 3
warmup = 200
draws = 300
target_accept = 0.9

[subgroup]
psi = 0.3
omega = 0.7
d_star = 50

[calibration]
n_mc = 2e5

[simulation]
scenarios = null, prog_and_pred:step
methods = oracle, rhs_dep
reps = 7

[output]
dir = runs/a
"""


def test_parse_full():
    cfg = parse_config(FULL)
    assert cfg.seed == 42 and cfg.threads == 2 and cfg.out == "runs/a"
    assert cfg.data.continuous == ("c1", "c2") and cfg.data.categorical == ("f1",)
    assert cfg.prior.eta_gamma == AUTO and cfg.prior.eta_beta == 0.03
    assert cfg.prior.guesstimates == (1.2, 0.17)
    assert cfg.mcmc.chains == 3 and cfg.mcmc_config().seed == 42
    assert cfg.subgroup.d_star == 50.0
    assert cfg.calibration.n_mc == 200_000
    assert cfg.simulation.scenarios == ("null", "prog_and_pred:step")
    assert cfg.prior.needs_calibration


@pytest.mark.parametrize("text", [FULL, "", "[prior]\nfamily = sas\ndependent = true\n"])
def test_round_trip(text):
    cfg = parse_config(text)
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    assert serialize_config(again) == serialize_config(cfg)


def test_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.mcmc.chains == 4 and cfg.mcmc.warmup == 1000 and cfg.mcmc.target_accept == 0.95
    assert cfg.prior.family == "rhs" and cfg.prior.dependent


def test_to_spec():
    cfg = parse_config("[prior]\nfamily = rhs\neta_beta = 0.1\neta_gamma = 0.01\neta_delta = 0.02\n")
    spec = cfg.prior.to_spec()
    assert spec == PriorSpec.from_label("rhs_dep", eta_beta=0.1, eta_gamma=0.01, eta_delta=0.02)
    assert not cfg.prior.needs_calibration
    auto = parse_config("").prior.to_spec({"eta_beta": 1.0, "eta_gamma": 2.0, "eta_delta": 3.0})
    assert auto.etas == (1.0, 2.0, 3.0)


@pytest.mark.parametrize("text, msg", [
    ("[nope]\na = 1\n", "unknown block"),
    ("[mcmc]\nchainz = 2\n", "unknown key"),
    ("[run]\nsed = 2\n", "unknown key"),
    ("[mcmc]\nchains = 0\n", "chains"),
    ("[mcmc]\nchains = two\n", "chains"),
    ("[subgroup]\nomega = 0.3\n", "omega"),
    ("[prior]\ndependent = maybe\n", "boolean"),
    ("[prior]\nguesstimates = 1.2\n", "guesstimates"),
    ("[prior]\nguesstimates = 0, 0.17\n", "nonzero"),
    ("[prior]\nfamily = lasso\n", "lasso"),
    ("[calibration]\nn_mc = 1000\n", "n_mc"),
    ("not ini at all", "section"),
])
def test_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        cfg = parse_config(text)
        cfg.prior.to_spec({"eta_beta": 1, "eta_gamma": 1, "eta_delta": 1})


def test_load_resolves_relative_data_path(tmp_path):
    (tmp_path / "sub").mkdir()
    p = tmp_path / "sub" / "run.ini"
    p.write_text("[data]\npath = ../trial.csv\n")
    cfg = load_config(p)
    assert cfg.data.path == str((tmp_path / "trial.csv").resolve())
    with pytest.raises(FileNotFoundError, match="missing.ini"):
        load_config(tmp_path / "missing.ini")
