import json

import numpy as np
import pytest

from specfim import cli
from specfim.basis import BasisSpec
from specfim.bounds import load_design
from specfim.exceptions import ConfigError
from specfim.fim import spectrum_at
from specfim.synth import empirical_psd, read_signals_csv, read_spectrum_csv

from conftest import data_path


def toy_config(tmp_path, **over):
    sys = {"p": 1, "r": 1, "wc": 1.0, "entries": [[{"num": [2.0], "den": [0.5, 1.0]}]]}
    (tmp_path / "toy.json").write_text(json.dumps(sys))
    cfg = {
        "system": "toy.json",
        "basis": {"kind": "chebyshev", "m": 4, "wc": 1.0, "n_q": 64},
        "budgets": {"K_u": 10.0, "K_y": 50.0},
        "bounds": {"seeds": 2},
        # 8192 samples per period keeps dt * |pole| well inside the simulator's limit
        "synthesis": {"N_f": 128, "dt": 2 * np.pi * 128 / 8192, "n_samples": 3 * 8192, "seed": 3},
        "noise": {"mode": "none"},
        "identify": {"init": "nominal"},
    }
    cfg.update(over)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_budget_zero_rejected(tmp_path, capsys):
    path = toy_config(tmp_path, budgets={"K_u": 0, "K_y": 50.0})
    assert run("design", "--config", path, "--out", tmp_path / "o") == 2
    assert "budgets/K_u" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("patch", [{"criterion": "Q"}, {"basis": {"m": -1}}, {"extra": 1}, {"system": "nope.json"}])
def test_schema_violations_exit_2(tmp_path, patch):
    path = toy_config(tmp_path, **patch)
    assert run("design", "--config", path, "--out", tmp_path / "o") == 2


def test_missing_config_exit_2(tmp_path):
    assert run("design", "--config", tmp_path / "missing.json") == 2
    assert run("design") == 2


def test_toy_pipeline(tmp_path):
    path = toy_config(tmp_path)
    out = tmp_path / "out"
    assert run("design", "--config", path, "--out", out, "--quiet") == 0
    res = load_design(out / "design.json")
    assert res.rel_gap <= 1e-3
    omega, Phi = read_spectrum_csv(out / "spectrum.csv")
    assert len(omega) == 512
    spec = BasisSpec("chebyshev", 4, 1.0, n_q=64)
    assert np.allclose(Phi, spectrum_at(res.Hc, spec, omega), rtol=1e-14, atol=0)

    assert run("synthesize", "--config", path, "--out", out, "--quiet") == 0
    first = (out / "signals_u.csv").read_bytes()
    assert run("synthesize", "--config", path, "--out", out, "--quiet") == 0
    assert (out / "signals_u.csv").read_bytes() == first
    sig = read_signals_csv(out / "signals_u.csv")
    assert sig.n_channels == 1

    assert run("identify", "--config", path, "--out", out, "--quiet") == 0
    est = json.loads((out / "estimate.json").read_text())
    assert est["report"]["max_rel_error"] <= 1e-3
    assert (out / "report.txt").is_file() and (out / "experiment" / "record.json").is_file()


def test_seed_override_changes_signals(tmp_path):
    path = toy_config(tmp_path)
    out = tmp_path / "out"
    assert run("design", "--config", path, "--out", out, "--quiet") == 0
    assert run("synthesize", "--config", path, "--out", out, "--quiet") == 0
    a = (out / "signals_u.csv").read_bytes()
    assert run("synthesize", "--config", path, "--out", out, "--seed", 11, "--quiet") == 0
    assert (out / "signals_u.csv").read_bytes() != a


def test_channel_mismatch_exit_2(tmp_path):
    path = toy_config(tmp_path)
    sig = tmp_path / "two.csv"
    sig.write_text("t,u1,u2\n0,1,2\n0.1,1,2\n0.2,1,2\n")
    assert run("identify", "--config", path, "--out", tmp_path / "o", "--signals", sig) == 2


def test_synthesize_without_design_exit_2(tmp_path):
    path = toy_config(tmp_path)
    assert run("synthesize", "--config", path, "--out", tmp_path / "empty") == 2


def test_bundled_config_loads():
    cfg = cli.bundled_config()
    assert cfg.criterion == "D"
    assert cfg.basis.order == 13
    assert cfg.section("budgets")["K_u"] == 1000
    assert cfg.system_path.name == "paper_actual.json"
    assert data_path("paper_nominal.json").is_file()


def test_load_config_rejects_before_compute(tmp_path):
    with pytest.raises(ConfigError, match="budgets"):
        cli.load_config(data={"system": str(data_path("paper_actual.json")), "basis": {"m": 3}}, base=tmp_path)


def test_repro_paper_table(tmp_path, capsys):
    assert run("repro-paper", "--out", tmp_path) == 0
    printed = capsys.readouterr().out
    rows = json.loads((tmp_path / "repro.json").read_text())
    assert sorted(r["criterion"] for r in rows) == ["A", "D", "E", "T"]
    for r in rows:
        assert r["rel_gap"] <= 1e-3
    body = [line.split()[0] for line in printed.strip().splitlines()[1:]]
    assert sorted(body) == ["A", "D", "E", "T"]


def test_bundled_design_synthesis_matches_spectrum(tmp_path):
    # default sampling (N_f = 2048, four-fold oversampling) leaves enough Welch bins inside the band
    cfg = cli.bundled_config()
    cfg.raw["output"] = str(tmp_path)
    cfg.raw["synthesis"].update(N_f=2048, dt=None, n_samples=200_000)
    cli.cmd_design(cfg, quiet=True)
    sig = cli.cmd_synthesize(cfg, quiet=True)
    assert sig.n_channels == 2 and sig.n_samples == 200_000
    w_grid, Phi_grid = read_spectrum_csv(tmp_path / "spectrum.csv")
    w, Phi = empirical_psd(read_signals_csv(tmp_path / "signals_u.csv"), n_segments=100)
    band = w < cfg.basis.wc
    for i in range(2):
        tgt = np.interp(w[band], w_grid, Phi_grid[:, i, i].real)
        est = Phi[band, i, i].real
        assert np.trapezoid(np.abs(est - tgt), w[band]) / np.trapezoid(tgt, w[band]) <= 0.1
