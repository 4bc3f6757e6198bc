"""Lower and upper bounds on the optimal design value.

The lower bound alternates between the two copies of ``h`` in the bilinear
information map ``x^T M_lm y`` (each step is a concave subproblem), and every
iterate is scored on the true quadratic FIM so the bound is attained by a
feasible spectrum.  The upper bound drops the rank-1 constraint on ``h h^T``.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .convex_kernel import (
    LinearMatrixMap,
    check_criterion,
    criterion_value,
    lift_gram,
    solve_sdp_relaxation,
    solve_vector_subproblem,
)
from .exceptions import CriterionInfeasible, DesignFailure, NumericFailure
from .fim import build_forms, fim_at, kron_eye

log = logging.getLogger(__name__)

FEAS_TOL = 1e-8
ORDER_TOL = 1e-8
N_RESEEDS = 5
EXTRACT_TOL = 1e-6


@dataclass
class Iterate:
    iteration: int
    value: float  # true objective at x
    step: float  # ||x - y||
    surrogate: float  # Phi(M(x, y))

    def to_list(self):
        return [self.iteration, self.value, self.step, self.surrogate]


@dataclass
class LowerBound:
    h: np.ndarray
    value: float
    iterates: list
    seed: int = None
    warnings: list = field(default_factory=list)


@dataclass
class DesignResult:
    criterion: str
    h_star: np.ndarray
    lower: float
    upper: float
    iterates: list
    rank1_extracted: bool
    seed: int
    r: int
    warnings: list = field(default_factory=list)

    @property
    def rel_gap(self):
        return (self.upper - self.lower) / max(1.0, abs(self.upper))

    @property
    def Hc(self):
        return self.h_star.reshape(-1, self.r, order="F")

    def to_dict(self):
        return {
            "criterion": self.criterion,
            "lower": self.lower,
            "upper": self.upper,
            "rel_gap": self.rel_gap,
            "r": self.r,
            "h": self.h_star.tolist(),
            "iterates": [it.to_list() for it in self.iterates],
            "rank1_extracted": self.rank1_extracted,
            "seed": self.seed,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d):
        its = [Iterate(int(a), float(b), float(c), float(e)) for a, b, c, e in d.get("iterates", [])]
        return cls(d["criterion"], np.asarray(d["h"], dtype=float), float(d["lower"]), float(d["upper"]), its,
                   bool(d.get("rank1_extracted", False)), d.get("seed"), int(d["r"]), list(d.get("warnings", [])))


def save_design(result, path):
    Path(path).write_text(json.dumps(result.to_dict(), indent=2))


def load_design(path):
    return DesignResult.from_dict(json.loads(Path(path).read_text()))


def _full_constraints(forms):
    return [kron_eye(block, forms.r) for _, block in forms.constraint_blocks()]


def _max_load(x, constraints):
    return max(float(x @ P @ x) for P in constraints)


def random_start(forms, rng, slack=0.5):
    """Random direction scaled so the tightest normalized constraint equals ``slack``."""
    cons = _full_constraints(forms)
    x = rng.standard_normal(forms.n_h)
    x /= np.linalg.norm(x)
    return x * np.sqrt(slack / _max_load(x, cons))


def lower_bound(forms, crit, y0=None, max_iter=100, tol=1e-6, averaging=False, seed=0, sub_tol=1e-8):
    """Hill-climbing lower bound.

    Starting from ``y0`` (a seeded random feasible point if ``None``), repeatedly
    solve ``max_x Phi(M(x, y))`` over the constraint set and move ``y`` to the
    solution, or to the mean of the last two iterates when ``averaging``.
    Stops after ``max_iter`` iterations or once ``||x - y|| <= tol * max(1, ||y||)``.
    """
    crit = check_criterion(crit)
    cons = _full_constraints(forms)
    rng = np.random.default_rng(seed)
    y = random_start(forms, rng) if y0 is None else np.asarray(y0, dtype=float).copy()
    if y.shape != (forms.n_h,) or not np.any(y):
        raise ValueError(f"y0 must be a nonzero vector of length {forms.n_h}")
    if _max_load(y, cons) > 1 + FEAS_TOL:
        raise ValueError("y0 violates the power constraints")

    iterates, warnings = [], []
    prev = y.copy()
    best_true = -np.inf
    last_sur = -np.inf
    x = y
    for it in range(1, max_iter + 1):
        for attempt in range(N_RESEEDS + 1):
            try:
                sol = solve_vector_subproblem(LinearMatrixMap.from_forms(forms, y), crit, cons, tol=sub_tol, x0=y)
                break
            except CriterionInfeasible as exc:
                if it > 1 or attempt == N_RESEEDS:
                    raise DesignFailure(f"subproblem infeasible at iteration {it} after {attempt} reseeds: {exc}",
                                        dump={"y": y.tolist()}) from exc
                y = prev = random_start(forms, rng)
        x = sol.x
        step = float(np.linalg.norm(x - y))
        true = criterion_value(crit, fim_at(forms, x))
        iterates.append(Iterate(it, true, step, float(sol.value)))
        scale = 1e-6 * max(1.0, abs(sol.value))
        if sol.value < last_sur - scale:
            warnings.append(f"surrogate decreased at iteration {it}: {last_sur:.10g} -> {sol.value:.10g}")
        if true < best_true - 1e-6 * max(1.0, abs(best_true)):
            warnings.append(f"true objective decreased at iteration {it}: {best_true:.10g} -> {true:.10g}")
        last_sur = max(last_sur, sol.value)
        best_true = max(best_true, true)
        if step <= tol * max(1.0, np.linalg.norm(y)):
            break
        y, prev = (0.5 * (x + prev), x) if averaging else (x, x)
    for w in warnings:
        log.warning(w)
    return LowerBound(x, iterates[-1].value, iterates, seed, warnings)


def upper_bound(forms, crit, tol=1e-11):
    """Relaxation bound; returns the lifted ``X`` solution object (``.x``, ``.Y``, ``.value``)."""
    return solve_sdp_relaxation(forms, crit, tol=tol)


def extract_rank1(X, ratio_tol=1e-6):
    """``sqrt(lam_1) v_1`` when ``lam_2 / lam_1 <= ratio_tol``, else ``None``.

    The sign is fixed so the largest-magnitude entry is positive.
    """
    X = np.asarray(X, dtype=float)
    lam, V = np.linalg.eigh(0.5 * (X + X.T))
    if lam[-1] <= 0:
        return None
    second = lam[-2] if len(lam) > 1 else 0.0
    if max(second, 0.0) / lam[-1] > ratio_tol:
        return None
    h = np.sqrt(lam[-1]) * V[:, -1]
    k = np.argmax(np.abs(h))
    return h if h[k] > 0 else -h


def _face_map(forms, B):
    """Linear map ``D -> (upper FIM entries, constraint traces)`` of ``B D B^T`` over symmetric ``D``."""
    k = B.shape[1]
    iu = np.triu_indices(k)
    tu = np.triu_indices(forms.N)
    SB = np.einsum("lmij,ia,jb->lmab", forms.S, B, B, optimize=True)
    CB = [B.T @ block @ B for _, block in forms.constraint_blocks()]
    off = np.where(iu[0] == iu[1], 1.0, 2.0)
    rows = [SB[tu[0], tu[1]][:, iu[0], iu[1]] * off]
    rows += [(c[iu] * off)[None] for c in CB]
    A = np.concatenate(rows, axis=0)
    return A, iu


def reduce_rank(forms, Y, target=None, trunc=1e-7, null_tol=1e-9):
    """Move within the optimal face of the relaxation to a lower-rank point.

    ``Y = B B^T`` is replaced by ``B (I + a D) B^T`` where ``D`` leaves every
    FIM entry and every constraint trace unchanged and ``a`` is the largest step
    keeping ``I + a D`` PSD, which removes at least one rank per step.  Stops at
    rank ``target`` (default ``r``) or when no such ``D`` exists.  Eigenvalues
    below ``trunc * lam_max`` are discarded first.
    """
    target = forms.r if target is None else target
    lam, V = np.linalg.eigh(0.5 * (Y + Y.T))
    lam, V = lam[::-1], V[:, ::-1]
    if lam[0] <= 0:
        return np.zeros_like(Y)
    keep = lam > trunc * lam[0]
    B = V[:, keep] * np.sqrt(lam[keep])
    while B.shape[1] > target:
        A, iu = _face_map(forms, B)
        _, s, Vt = np.linalg.svd(A)
        if A.shape[1] <= A.shape[0] and s[-1] > null_tol * s[0]:
            break
        k = B.shape[1]
        D = np.zeros((k, k))
        D[iu] = Vt[-1]
        D = D + D.T - np.diag(np.diag(D))
        mu = np.linalg.eigvalsh(D)
        a = -1.0 / mu[-1] if abs(mu[-1]) >= abs(mu[0]) else -1.0 / mu[0]
        lam2, Q = np.linalg.eigh(np.eye(k) + a * D)
        lam2 = np.clip(lam2, 0.0, None)
        keep = lam2 > null_tol * lam2.max()
        B = (B @ Q[:, keep]) * np.sqrt(lam2[keep])
    return B @ B.T


def relaxation_start(forms, Y):
    """Feasible point built from the leading ``r`` eigen-directions of the relaxed Gram matrix."""
    lam, V = np.linalg.eigh(0.5 * (Y + Y.T))
    k = min(forms.r, len(lam))
    Hc = np.zeros((forms.d, forms.r))
    Hc[:, :k] = V[:, ::-1][:, :k] * np.sqrt(np.clip(lam[::-1][:k], 0.0, None))
    h = Hc.reshape(-1, order="F")
    load = _max_load(h, _full_constraints(forms))
    if load <= 0:
        return None
    return h / np.sqrt(load) if load > 1 else h


def design_forms(forms, crit, n_seeds=10, seed=0, max_iter=100, tol=1e-6, averaging=None,
                 relaxation_start_point=True, sdp_tol=1e-11, face_reduction=True, workers=1):
    """Bounds for already-assembled forms; see :func:`design`.

    A rank-1 relaxation optimum (directly, or after :func:`reduce_rank` when
    ``face_reduction``) is used as the design.  Otherwise hill climbing runs
    from ``n_seeds`` random starts, plus one built from the relaxation's leading
    eigen-directions when ``relaxation_start_point``, and the best is kept.
    ``workers > 1`` runs the restarts in a thread pool; results are gathered in
    seed order, so the outcome does not depend on scheduling.
    """
    crit = check_criterion(crit)
    if averaging is None:
        averaging = bool(forms.extra)
    ub = upper_bound(forms, crit, tol=sdp_tol)
    cons = _full_constraints(forms)

    h = extract_rank1(ub.x)
    if h is None and face_reduction:
        h = extract_rank1(lift_gram(reduce_rank(forms, ub.Y), forms.r))
    if h is not None:
        h = h / np.sqrt(max(1.0, _max_load(h, cons)))
        value = criterion_value(crit, fim_at(forms, h))
        if value >= ub.value - EXTRACT_TOL * max(1.0, abs(ub.value)):
            it = [Iterate(0, value, 0.0, value)]
            return DesignResult(crit, h, value, ub.value, it, True, None, forms.r)

    runs = []
    if relaxation_start_point:
        y0 = relaxation_start(forms, ub.Y)
        if y0 is not None:
            try:
                runs.append(lower_bound(forms, crit, y0, max_iter, tol, averaging, seed=None))
            except NumericFailure as exc:
                log.warning("relaxation-started hill climb failed: %s", exc)

    def run(k):
        try:
            return lower_bound(forms, crit, None, max_iter, tol, averaging, seed=seed + k), None
        except NumericFailure as exc:
            log.warning("hill climb with seed %d failed: %s", seed + k, exc)
            return None, f"seed {seed + k}: {exc}"

    if workers > 1 and n_seeds > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, range(n_seeds)))
    else:
        outcomes = [run(k) for k in range(n_seeds)]
    runs += [res for res, _ in outcomes if res is not None]
    errors = [err for _, err in outcomes if err is not None]
    if not runs:
        raise DesignFailure("every hill-climbing start failed", dump={"errors": errors})
    best = max(runs, key=lambda lb: lb.value)  # first maximum wins ties
    if best.value > ub.value + ORDER_TOL * (1 + abs(ub.value)):
        raise NumericFailure(f"lower bound {best.value:.12g} exceeds the relaxation bound {ub.value:.12g}")
    return DesignResult(crit, best.h, best.value, ub.value, best.iterates, False, best.seed, forms.r,
                        best.warnings + errors)


def design(sys, index, spec, crit, K_u, K_y, noise_offset=True, port_caps=None, **opts):
    """Assemble the forms for ``sys`` and compute both bounds plus the best feasible design."""
    forms = build_forms(sys, index, spec, K_u, K_y, noise_offset=noise_offset, port_caps=port_caps)
    return design_forms(forms, crit, **opts)
