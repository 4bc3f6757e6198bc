import numpy as np
import pytest

from specfim.basis import BasisSpec
from specfim.bounds import (
    DesignResult,
    design,
    design_forms,
    extract_rank1,
    load_design,
    lower_bound,
    random_start,
    reduce_rank,
    relaxation_start,
    save_design,
    upper_bound,
)
from specfim.convex_kernel import criterion_value
from specfim.fim import QuadraticForms, build_forms, fim_at, fim_of_gram, kron_eye
from specfim.model import ParameterIndex

from conftest import random_system


def trace_toy():
    # one parameter, M = P_I = I_2; output form I with K_y = 4 stays slack
    S = np.eye(2)[None, None]
    return QuadraticForms(S, np.eye(2), np.eye(2), r=1, K_u=1.0, K_y=4.0, noise_offset=0.0)


def test_lower_bound_trace_toy():
    lb = lower_bound(trace_toy(), "T", seed=3)
    assert lb.value == pytest.approx(1.0, abs=1e-6)
    assert lb.h @ lb.h == pytest.approx(1.0, abs=1e-6)


def test_lower_bound_fixed_point_stops_at_once():
    y0 = np.array([1.0, 0.0])
    lb = lower_bound(trace_toy(), "T", y0=y0)
    assert len(lb.iterates) == 1
    assert np.allclose(lb.h, y0, atol=1e-6)


def test_lower_bound_rejects_bad_start():
    with pytest.raises(ValueError):
        lower_bound(trace_toy(), "T", y0=np.array([2.0, 0.0]))
    with pytest.raises(ValueError):
        lower_bound(trace_toy(), "T", y0=np.zeros(2))


def test_extract_rank1_examples():
    h = np.array([0.3, -2.0, 1.0])
    out = extract_rank1(np.outer(h, h))
    assert np.allclose(out, -h)  # largest-magnitude entry made positive
    assert extract_rank1(np.eye(3)) is None
    assert np.allclose(extract_rank1(np.diag([1.0, 1e-9])), [1.0, 0.0])
    assert extract_rank1(np.zeros((2, 2))) is None


@pytest.fixture(scope="module")
def forms_small():
    sys = random_system(np.random.default_rng(21), max_order=1)
    return build_forms(sys, ParameterIndex.from_system(sys), BasisSpec("chebyshev", 4, 1.0, n_q=64), 10.0, 20.0)


def test_random_start_feasible(forms_small):
    rng = np.random.default_rng(0)
    cons = [kron_eye(b, forms_small.r) for _, b in forms_small.constraint_blocks()]
    for _ in range(5):
        y = random_start(forms_small, rng)
        assert max(y @ P @ y for P in cons) == pytest.approx(0.5)


@pytest.mark.parametrize("crit", ["D", "A", "E", "T"])
def test_reduce_rank_preserves_fim_and_traces(forms_small, crit):
    ub = upper_bound(forms_small, crit)
    Y2 = reduce_rank(forms_small, ub.Y)
    assert np.linalg.matrix_rank(Y2, tol=1e-8 * np.abs(Y2).max()) <= np.linalg.matrix_rank(ub.Y, tol=1e-7 * np.abs(ub.Y).max())
    F1, F2 = fim_of_gram(forms_small, ub.Y), fim_of_gram(forms_small, Y2)
    assert np.allclose(F1, F2, rtol=1e-6, atol=1e-6 * np.abs(F1).max())
    for _, b in forms_small.constraint_blocks():
        assert np.sum(b * Y2) == pytest.approx(np.sum(b * ub.Y), rel=1e-6, abs=1e-8)


@pytest.mark.parametrize("crit", ["D", "A", "E", "T"])
def test_bounds_ordered_and_feasible(forms_small, crit):
    res = design_forms(forms_small, crit, n_seeds=2)
    assert res.lower <= res.upper + 1e-8 * (1 + abs(res.upper))
    cons = [kron_eye(b, forms_small.r) for _, b in forms_small.constraint_blocks()]
    assert max(res.h_star @ P @ res.h_star for P in cons) <= 1 + 1e-8
    assert criterion_value(crit, fim_at(forms_small, res.h_star)) == pytest.approx(res.lower, rel=1e-12)


@pytest.mark.parametrize("crit", ["D", "A"])
def test_surrogate_monotone_without_averaging(forms_small, crit):
    lb = lower_bound(forms_small, crit, seed=1, max_iter=30)
    sur = np.array([it.surrogate for it in lb.iterates])
    assert np.all(np.diff(sur) >= -1e-6 * np.maximum(1.0, np.abs(sur[1:])))
    assert not any("surrogate" in w for w in lb.warnings)


def test_relaxation_start_feasible(forms_small):
    ub = upper_bound(forms_small, "D")
    h = relaxation_start(forms_small, ub.Y)
    cons = [kron_eye(b, forms_small.r) for _, b in forms_small.constraint_blocks()]
    assert max(h @ P @ h for P in cons) <= 1 + 1e-12


def test_hill_climbing_only_path(forms_small):
    res = design_forms(forms_small, "D", n_seeds=3, face_reduction=False, relaxation_start_point=False)
    if not res.rank1_extracted:
        assert res.seed in (0, 1, 2)
        assert res.iterates[0].iteration == 1
    assert res.lower <= res.upper + 1e-8 * (1 + abs(res.upper))


def test_design_json_roundtrip_and_determinism(tmp_path, forms_small):
    a = design_forms(forms_small, "E", n_seeds=2, face_reduction=False)
    b = design_forms(forms_small, "E", n_seeds=2, face_reduction=False)
    assert np.array_equal(a.h_star, b.h_star)
    save_design(a, tmp_path / "d.json")
    c = load_design(tmp_path / "d.json")
    assert isinstance(c, DesignResult)
    assert np.array_equal(c.h_star, a.h_star)
    assert (c.lower, c.upper, c.criterion, c.r) == (a.lower, a.upper, a.criterion, a.r)
    assert [it.to_list() for it in c.iterates] == [it.to_list() for it in a.iterates]
    assert c.Hc.shape == (forms_small.d, forms_small.r)


def test_design_reference_system_d(nominal, spec13):
    res = design(nominal, ParameterIndex.from_system(nominal), spec13, "D", 1000, 1000, n_seeds=2)
    assert res.rel_gap <= 1e-3
    assert res.Hc.shape == (28, 2)
