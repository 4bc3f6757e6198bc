import numpy as np
import pytest
from scipy import signal
from scipy.linalg import expm

from specfim.bounds import design
from specfim.exceptions import ConfigError
from specfim.ident import (
    ExperimentRecord,
    auto_noise_std,
    canonical_ss,
    compare,
    estimate,
    format_report,
    periodic_lines,
    rk4_recursion,
    simulate,
)
from specfim.model import MimoSystem, ParameterIndex, RationalTF, freq_response
from specfim.synth import SignalSet, synthesize

DT = 0.04908738521234052  # 2 pi 256 / 32768
PERIOD = 32768


@pytest.fixture(scope="module")
def d_input(nominal, spec13):
    res = design(nominal, ParameterIndex.from_system(nominal), spec13, "D", 1000, 1000, n_seeds=2)
    return synthesize(res.Hc, spec13, N_f=256, dt=DT, n_samples=3 * PERIOD, seed=0)


def test_canonical_ss_matches_tf():
    tf = RationalTF([2.0, 0.5], [0.3, 0.9, 1.0])
    A, B, C = canonical_ss(tf)
    num, den = signal.ss2tf(A, B, C, np.zeros((1, 1)))
    assert np.allclose(den, [1.0, 0.9, 0.3])
    assert np.allclose(num[0][-2:], [0.5, 2.0])


def test_rk4_matches_expm_for_small_step():
    A = np.array([[0.0, 1.0], [-0.3, -0.9]])
    Phi, G = rk4_recursion(A, np.array([[0.0], [1.0]]), 0.01)
    assert np.allclose(Phi, expm(0.01 * A), atol=1e-11)
    assert G.shape == (2, 3)


def test_dc_steady_state(actual):
    c = 0.7
    u = SignalSet(np.full((4000, 2), c), 0.05)
    y = simulate(actual, u)
    assert y.data[-1, 0] == pytest.approx(c * (3.2 / 1.5 + 3.1), rel=1e-6)
    assert y.data[-1, 1] == pytest.approx(c * (5.2 / 0.95 + 1.5 / 0.3), rel=1e-6)


def test_zero_input_zero_output(actual):
    y = simulate(actual, SignalSet(np.zeros((100, 2)), 0.05))
    assert np.array_equal(y.data, np.zeros((100, 2)))
    assert y.prefix == "y"


def test_sinusoid_steady_state(actual):
    dt, w0 = 0.02, 0.8
    t = dt * np.arange(20000)
    u = SignalSet(np.column_stack([np.sin(w0 * t), np.zeros_like(t)]), dt)
    y = simulate(actual, u)
    G = freq_response(actual, np.array([w0]), 1.0)[0]
    tail = t > 200
    for i in range(2):
        ref = np.abs(G[i, 0]) * np.sin(w0 * t[tail] + np.angle(G[i, 0]))
        assert np.max(np.abs(y.data[tail, i] - ref)) <= 1e-4


def test_linearity(actual):
    rng = np.random.default_rng(0)
    a = SignalSet(rng.standard_normal((3000, 2)), 0.05)
    b = SignalSet(rng.standard_normal((3000, 2)), 0.05)
    ab = SignalSet(2.0 * a.data - 0.5 * b.data, 0.05)
    lhs = simulate(actual, ab).data
    rhs = 2.0 * simulate(actual, a).data - 0.5 * simulate(actual, b).data
    assert np.max(np.abs(lhs - rhs)) <= 1e-8 * max(1.0, np.abs(lhs).max())


def test_noise_reproducible(actual):
    u = SignalSet(np.random.default_rng(1).standard_normal((500, 2)), 0.05)
    a = simulate(actual, u, noise_std=0.1, seed=5)
    b = simulate(actual, u, noise_std=0.1, seed=5)
    c = simulate(actual, u, noise_std=0.1, seed=6)
    assert np.array_equal(a.data, b.data)
    assert not np.allclose(a.data, c.data)
    clean = simulate(actual, u)
    assert np.std(a.data - clean.data) == pytest.approx(0.1, rel=0.1)


def test_coarse_step_rejected(actual):
    with pytest.raises(ConfigError, match="too coarse"):
        simulate(actual, SignalSet(np.zeros((10, 2)), 1.0))
    with pytest.raises(ConfigError):
        simulate(actual, SignalSet(np.zeros((10, 3)), 0.05))


def test_periodic_lines_unit_cosine():
    period, dt = 256, 0.1
    t = dt * np.arange(3 * period)
    sig = SignalSet(np.cos(2 * np.pi * 5 * t / (period * dt)), dt)
    w, X = periodic_lines(sig, period)
    assert X[4, 0] == pytest.approx(0.5, abs=1e-12)
    assert np.abs(np.delete(X[:, 0], 4)).max() <= 1e-12
    assert w[4] == pytest.approx(2 * np.pi * 5 / (period * dt))


@pytest.mark.parametrize("use_init", [True, False])
def test_noiseless_recovery(actual, nominal, d_input, use_init):
    y = simulate(actual, d_input)
    kwargs = dict(init=nominal) if use_init else dict(orders=[[(0, 2), (0, 2)], [(0, 2), (0, 2)]])
    est = estimate(d_input, y, period=PERIOD, **kwargs)
    rep = compare(est.system, actual)
    assert rep["max_rel_error"] <= 1e-3
    assert est.param_std.shape == (12,)


def test_noisy_recovery(actual, nominal, d_input):
    clean = simulate(actual, d_input)
    std = auto_noise_std(clean)
    errs = []
    for seed in range(3):
        y = simulate(actual, d_input, noise_std=std, seed=seed)
        errs.append(compare(estimate(d_input, y, period=PERIOD, init=nominal).system, actual)["median_rel_error"])
    assert max(errs) <= 0.1


def test_short_record_rejected(actual, nominal, d_input):
    u = SignalSet(d_input.data[:2048], DT)
    y = simulate(actual, u)
    with pytest.raises(ConfigError, match="record too short"):
        estimate(u, y, period=1024, init=nominal)


def test_compare_identity_and_perturbation(actual):
    rep = compare(actual, actual)
    assert rep["max_rel_error"] == 0.0
    assert np.max(rep["band_error"]) == 0.0
    idx = ParameterIndex.from_system(actual)
    pert = idx.with_values(actual, 1.01 * idx.values(actual))
    rep = compare(pert, actual)
    assert np.allclose(rep["rel_error"], 0.01)
    assert "median relative error" in format_report(rep)


def test_published_d_estimate_is_close(actual):
    # the published D-optimal estimate agrees with the true system to a few percent
    rows = [
        [RationalTF([3.21], [1.497, 1.603, 1.0]), RationalTF([3.105], [0.998, 1.897, 1.0])],
        [RationalTF([5.073], [0.951, 0.492, 1.0]), RationalTF([1.387], [0.284, 0.856, 1.0])],
    ]
    rep = compare(MimoSystem(rows, 1.0), actual)
    assert rep["median_rel_error"] <= 0.05


def test_experiment_record_roundtrip(tmp_path, actual, nominal):
    u = SignalSet(np.random.default_rng(0).standard_normal((50, 2)), 0.05)
    y = simulate(actual, u, noise_std=0.01, seed=1)
    rec = ExperimentRecord(u, y, [0.01, 0.01], {"synthesis": 0, "noise": 1}, actual, nominal, 25)
    rec.save(tmp_path / "exp")
    back = ExperimentRecord.load(tmp_path / "exp")
    assert np.array_equal(back.u.data, u.data) and np.array_equal(back.y.data, y.data)
    assert back.sys_actual.to_dict() == actual.to_dict()
    assert back.period == 25 and back.seeds == {"synthesis": 0, "noise": 1}
