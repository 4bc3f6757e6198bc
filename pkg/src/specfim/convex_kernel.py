"""Dense log-barrier solvers for the two convex problem shapes used by the bounds.

(a) ``max Phi(F(x))`` with ``F`` linear in ``x`` and convex quadratic constraints
    ``x^T P_i x <= 1`` (the hill-climbing subproblem), and
(b) ``max Phi(M(Y))`` over ``Y >= 0`` with linear constraints ``Tr(P_i Y) <= 1``
    (the semidefinite relaxation).

Both are solved by one primal barrier method: damped Newton centering with a
backtracking line search, barrier weight multiplied by 10 per outer stage,
stopping once the duality-gap bound ``nu / t`` is below ``tol * max(1, |value|)``.
E-optimality uses the epigraph form ``max s  s.t.  F(x) - s I >= 0``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular

from .exceptions import CriterionInfeasible, NumericFailure

CRITERIA = ("D", "A", "T", "E")
A_DOMAIN_SHIFT = 1e-10
SYM_TOL = 1e-10
CENTERING_TOL = 2e-7
STALL_TOL = 1e-5
LOOSE_CENTERING_TOL = 1e-3  # accepted only once the decrement stops improving


def check_criterion(crit):
    crit = str(crit).upper()
    if crit not in CRITERIA:
        raise ValueError(f"unknown criterion {crit!r}; expected one of {CRITERIA}")
    return crit


def criterion_value(crit, M):
    """Phi_D = logdet, Phi_A = -Tr(M^-1), Phi_T = Tr(M), Phi_E = lambda_min; -inf off-domain."""
    crit = check_criterion(crit)
    M = np.asarray(M, dtype=float)
    M = 0.5 * (M + M.T)
    if crit == "T":
        return float(np.trace(M))
    lam = np.linalg.eigvalsh(M)
    if crit == "E":
        return float(lam[0])
    if lam[0] <= 0:
        return -np.inf
    if crit == "D":
        return float(np.sum(np.log(lam)))
    return float(-np.sum(1.0 / lam))


@dataclass(frozen=True)
class LinearMatrixMap:
    """``F(x) = sum_k x_k F_k`` with symmetric ``F_k`` stacked as ``(n, N, N)``."""

    F: np.ndarray

    def __post_init__(self):
        F = np.asarray(self.F, dtype=float)
        if F.ndim != 3 or F.shape[1] != F.shape[2]:
            raise ValueError(f"F must have shape (n, N, N), got {F.shape}")
        asym = np.max(np.abs(F - np.transpose(F, (0, 2, 1))), initial=0.0)
        if asym > SYM_TOL * max(1.0, np.max(np.abs(F), initial=0.0)):
            raise AssertionError(f"linear matrix map is not symmetric (asymmetry {asym:.2e})")
        object.__setattr__(self, "F", 0.5 * (F + np.transpose(F, (0, 2, 1))))

    @classmethod
    def from_forms(cls, forms, y):
        """Bilinear map ``F(x)_lm = x^T M_lm y`` for fixed ``y``."""
        Ym = np.asarray(y, dtype=float).reshape(-1, forms.r, order="F")
        T = np.einsum("lmij,jc->cilm", forms.S, Ym, optimize=True)
        return cls(T.reshape(forms.n_h, forms.N, forms.N))

    @property
    def n(self):
        return self.F.shape[0]

    @property
    def N(self):
        return self.F.shape[1]

    def __call__(self, x):
        out = np.tensordot(np.asarray(x, dtype=float), self.F, axes=1)
        return 0.5 * (out + out.T)


@dataclass
class Solution:
    x: np.ndarray
    value: float
    gap: float
    stage_values: list = field(default_factory=list)
    newton_steps: int = 0


# --- svec helpers -------------------------------------------------------------

class _Svec:
    """Orthonormal symmetric vectorization (off-diagonals scaled by sqrt 2)."""

    def __init__(self, n):
        self.n = n
        self.i, self.j = np.triu_indices(n)
        self.scale = np.where(self.i == self.j, 1.0, np.sqrt(2.0))
        self.half = np.where(self.i == self.j, 0.5, 1.0 / np.sqrt(2.0))

    @property
    def dim(self):
        return len(self.i)

    def vec(self, Y):
        return np.asarray(Y)[..., self.i, self.j] * self.scale

    def mat(self, v):
        Y = np.zeros((self.n, self.n))
        vals = v / self.scale
        Y[self.i, self.j] = vals
        Y[self.j, self.i] = vals
        return Y

    def quad_hessian(self, Z):
        """Matrix of ``Tr(Z E_a Z E_b)`` over the orthonormal basis ``E_a``."""
        i, j, s = self.i, self.j, self.half
        H = Z[np.ix_(i, j)] * Z[np.ix_(j, i)] + Z[np.ix_(i, i)] * Z[np.ix_(j, j)]
        return 2.0 * s[:, None] * s[None, :] * H


# --- barrier problem ----------------------------------------------------------

class _BarrierProblem:
    """``minimize t * objective(z) + sum of barriers`` for a variable vector ``z``.

    objective: ("linear", c) | ("logdet", None) | ("trinv", None), all on ``F(z)``
    where ``F`` is the stacked matrix basis ``Fk`` (may be ``None`` for linear).
    """

    def __init__(self, nz, objective, Fk=None, matrix_barrier=False, shift=0.0,
                 quad=(), lin=(), psd=None):
        self.nz = nz
        self.kind, self.c = objective
        self.Fk = Fk
        self.matrix_barrier = matrix_barrier
        self.shift = shift
        self.quad = [(np.asarray(P, dtype=float), P.shape[0]) for P in quad]
        self.lin = [np.asarray(c, dtype=float) for c in lin]
        self.psd = psd
        self.nu = len(self.quad) + len(self.lin)
        if matrix_barrier:
            self.nu += Fk.shape[1]
        if psd is not None:
            self.nu += psd.n

    def matrix(self, z):
        F = np.tensordot(z, self.Fk, axes=1)
        return 0.5 * (F + F.T)

    def objective(self, z):
        """Value of the maximized criterion surrogate (sign: larger is better)."""
        if self.kind == "linear":
            return float(self.c @ z)
        F = self.matrix(z)
        lam = np.linalg.eigvalsh(F)
        if lam[0] <= 0:
            return -np.inf
        if self.kind == "logdet":
            return float(np.sum(np.log(lam)))
        return float(-np.sum(1.0 / lam))

    def _chol_parts(self, F):
        try:
            L = np.linalg.cholesky(F)
        except np.linalg.LinAlgError:
            return None
        Linv = solve_triangular(L, np.eye(F.shape[0]), lower=True)
        K = Linv @ self.Fk @ Linv.T
        return L, Linv, K

    def evaluate(self, z, t, derivs=True):
        nz = self.nz
        f = 0.0
        g = np.zeros(nz) if derivs else None
        H = np.zeros((nz, nz)) if derivs else None

        if self.kind == "linear":
            f -= t * (self.c @ z)
            if derivs:
                g -= t * self.c
        if self.Fk is not None and (self.kind != "linear" or self.matrix_barrier):
            N = self.Fk.shape[1]
            F = self.matrix(z)
            if self.kind in ("logdet", "trinv"):
                parts = self._chol_parts(F)
                if parts is None:
                    return None
                L, Linv, K = parts
                logdet = 2.0 * np.sum(np.log(np.diag(L)))
                if self.kind == "logdet":
                    f -= t * logdet
                    if derivs:
                        Kf = K.reshape(nz, -1)
                        g -= t * np.trace(K, axis1=1, axis2=2)
                        H += t * (Kf @ Kf.T)
                else:
                    R = Linv @ Linv.T
                    f += t * np.trace(R)
                    if derivs:
                        KR = K @ R
                        g -= t * np.trace(KR, axis1=1, axis2=2)
                        H1 = K.reshape(nz, -1) @ np.transpose(KR, (0, 2, 1)).reshape(nz, -1).T
                        H += t * (H1 + H1.T)
            if self.matrix_barrier:
                parts = self._chol_parts(F - self.shift * np.eye(N))
                if parts is None:
                    return None
                L, _, K = parts
                f -= 2.0 * np.sum(np.log(np.diag(L)))
                if derivs:
                    Kf = K.reshape(nz, -1)
                    g -= np.trace(K, axis1=1, axis2=2)
                    H += Kf @ Kf.T

        for P, n in self.quad:
            x = z[:n]
            Px = P @ x
            s = 1.0 - x @ Px
            if s <= 0:
                return None
            f -= np.log(s)
            if derivs:
                g[:n] += 2.0 * Px / s
                H[:n, :n] += 2.0 * P / s + 4.0 * np.outer(Px, Px) / s**2
        for c in self.lin:
            n = len(c)
            s = 1.0 - c @ z[:n]
            if s <= 0:
                return None
            f -= np.log(s)
            if derivs:
                g[:n] += c / s
                H[:n, :n] += np.outer(c, c) / s**2
        if self.psd is not None:
            sv = self.psd
            Y = sv.mat(z[: sv.dim])
            try:
                L = np.linalg.cholesky(Y)
            except np.linalg.LinAlgError:
                return None
            f -= 2.0 * np.sum(np.log(np.diag(L)))
            if derivs:
                Linv = solve_triangular(L, np.eye(sv.n), lower=True)
                Z = Linv.T @ Linv
                g[: sv.dim] -= sv.vec(Z)
                H[: sv.dim, : sv.dim] += sv.quad_hessian(Z)
        if not np.isfinite(f):
            return None
        return f, g, H


def _newton_solve(H, g):
    H = 0.5 * (H + H.T)
    # symmetric diagonal equilibration; barrier Hessians mix very different variable scales
    dg = np.sqrt(np.clip(np.diag(H), np.finfo(float).tiny, None))
    Hs = H / np.outer(dg, dg)
    gs = g / dg
    for ridge in (0.0, 1e-14, 1e-12, 1e-10, 1e-8):
        try:
            c = cho_factor(Hs + ridge * np.eye(len(g)))
            return -cho_solve(c, gs) / dg
        except LinAlgError:
            continue
    return -np.linalg.lstsq(Hs, gs, rcond=None)[0] / dg


def _initial_weight(prob, z):
    """Barrier weight that best centers ``z``: ``argmin_t ||t g_obj + g_bar||`` in the Hessian norm."""
    _, gb, Hb = prob.evaluate(z, 0.0)
    _, g1, H1 = prob.evaluate(z, 1.0)
    g0 = g1 - gb
    try:
        c = cho_factor(0.5 * (H1 + H1.T) + 1e-12 * np.eye(len(z)) * max(1.0, np.abs(H1).max()))
    except LinAlgError:
        return 1.0
    u = cho_solve(c, g0)
    den = float(g0 @ u)
    if not den > 0:
        return 1.0
    return float(np.clip(-(u @ gb) / den, 1e-8, 1e8)) or 1.0


def _center(prob, z, t, max_newton):
    """Damped Newton on the barrier at weight ``t``; returns ``(z, newton_steps)``.

    Steps are accepted on the Armijo condition, or, when rounding in ``f``
    hides the decrease (ill-conditioned ``F``), on a non-positive directional
    derivative at the trial point, which by convexity along the line still
    guarantees ``f`` did not increase.
    """
    steps = 0
    tiny = 0
    best = np.inf
    flat = 0
    for _ in range(max_newton):
        f, g, H = prob.evaluate(z, t)
        dz = _newton_solve(H, g)
        dec2 = float(-g @ dz)
        if dec2 <= CENTERING_TOL:
            return z, steps
        a = 1.0
        while a > 1e-14:
            out = prob.evaluate(z + a * dz, t, derivs=False)
            if out is not None:
                if out[0] <= f - 0.25 * a * dec2:
                    break
                full = prob.evaluate(z + a * dz, t)
                if full is not None and full[1] @ dz <= 0.0:
                    break
            a *= 0.5
        else:
            if dec2 < STALL_TOL:
                return z, steps
            raise NumericFailure(
                f"line search failed (Newton decrement^2 {dec2:.3e}, t={t:.3e})",
                dump={"z": z.tolist(), "t": t},
            )
        z = z + a * dz
        steps += 1
        # f is only resolved to ~1e-16 * t * |objective|; tiny damped steps
        # near the optimum mean the decrement sits at that noise floor
        if a < 1e-3 and dec2 < STALL_TOL:
            return z, steps
        # the decrement itself can plateau at the rounding floor of the gradient
        if dec2 < 0.5 * best:
            best, flat = dec2, 0
        else:
            flat += 1
            if flat >= 10 and dec2 < LOOSE_CENTERING_TOL:
                return z, steps
        tiny = tiny + 1 if a < 1e-6 else 0
        if tiny >= 20:
            raise NumericFailure(f"Newton steps stalled (decrement^2 {dec2:.3e}, t={t:.3e})",
                                 dump={"z": z.tolist(), "t": t})
    if dec2 > STALL_TOL:
        raise NumericFailure(f"Newton centering did not converge at t={t:.3e}", dump={"z": z.tolist(), "t": t})
    return z, steps


def _barrier_solve(prob, z0, tol, t0=None, mu=10.0, max_newton=500, stop=None):
    """Path-following loop; returns ``(z, gap, stage_values, newton_steps)``.

    If centering breaks down at a late stage (floating-point limits at very
    large ``t``), the last centered point is returned provided its gap bound
    is within 100x the target.
    """
    z = np.array(z0, dtype=float)
    if prob.evaluate(z, 1.0, derivs=False) is None:
        raise NumericFailure("barrier start point is not strictly feasible", dump={"z0": z.tolist()})
    t = _initial_weight(prob, z) if t0 is None else t0
    stage_values = []
    steps = 0
    for _stage in range(80):
        try:
            z_new, k = _center(prob, z, t, max_newton)
        except NumericFailure:
            last_gap = prob.nu / (t / mu)
            if stage_values and last_gap <= 100 * tol * max(1.0, abs(stage_values[-1])):
                return z, last_gap, stage_values, steps
            raise
        z = z_new
        steps += k
        value = prob.objective(z)
        stage_values.append(value)
        if stop is not None and stop(z):
            break
        gap = prob.nu / t
        if gap <= tol * max(1.0, abs(value)):
            break
        t *= mu
    else:
        raise NumericFailure("barrier method exceeded the stage limit", dump={"z": z.tolist()})
    return z, prob.nu / t, stage_values, steps


def _phase_one(Fk, nz_main, quad, lin, psd, z_start, margin):
    """Find ``z`` with ``F(z) > margin I`` inside the constraints, via max lambda_min."""
    N = Fk.shape[1]
    Fext = np.concatenate([Fk, -np.eye(N)[None]], axis=0)
    c = np.zeros(nz_main + 1)
    c[-1] = 1.0
    prob = _BarrierProblem(nz_main + 1, ("linear", c), Fext, matrix_barrier=True, quad=quad, lin=lin, psd=psd)
    lam0 = np.linalg.eigvalsh(np.tensordot(z_start, Fk, axes=1))[0]
    z0 = np.append(z_start, lam0 - 1.0)
    z, _, _, _ = _barrier_solve(prob, z0, 1e-9, stop=lambda zz: zz[-1] > 2 * margin)
    if z[-1] <= margin:
        raise CriterionInfeasible(
            f"no strictly feasible point with a nonsingular information matrix (best lambda_min {z[-1]:.3e})"
        )
    return z[:-1]


def _solve(crit, Fk, nz, quad, lin, psd, z_start, tol):
    crit = check_criterion(crit)
    N = Fk.shape[1]
    if crit == "T":
        c = np.trace(Fk, axis1=1, axis2=2)
        prob = _BarrierProblem(nz, ("linear", c), None, quad=quad, lin=lin, psd=psd)
        z, gap, stages, steps = _barrier_solve(prob, z_start, tol)
        return z, prob, gap, stages, steps
    if crit == "E":
        Fext = np.concatenate([Fk, -np.eye(N)[None]], axis=0)
        c = np.zeros(nz + 1)
        c[-1] = 1.0
        prob = _BarrierProblem(nz + 1, ("linear", c), Fext, matrix_barrier=True, quad=quad, lin=lin, psd=psd)
        lam0 = np.linalg.eigvalsh(np.tensordot(z_start, Fk, axes=1))[0]
        z0 = np.append(z_start, lam0 - 1.0 - abs(lam0))
        z, gap, stages, steps = _barrier_solve(prob, z0, tol)
        return z[:-1], prob, gap, stages, steps
    margin = 10 * A_DOMAIN_SHIFT
    F0 = np.tensordot(z_start, Fk, axes=1)
    if np.linalg.eigvalsh(0.5 * (F0 + F0.T))[0] <= margin:
        z_start = _phase_one(Fk, nz, quad, lin, psd, z_start, margin)
    if crit == "D":
        prob = _BarrierProblem(nz, ("logdet", None), Fk, quad=quad, lin=lin, psd=psd)
    else:
        prob = _BarrierProblem(nz, ("trinv", None), Fk, matrix_barrier=True, shift=A_DOMAIN_SHIFT,
                               quad=quad, lin=lin, psd=psd)
    z, gap, stages, steps = _barrier_solve(prob, z_start, tol)
    return z, prob, gap, stages, steps


def _interior_scale(x, constraints):
    q = max(float(x @ P @ x) for P in constraints)
    return 0.5 / np.sqrt(q) if q > 0 else 1.0


def solve_vector_subproblem(lmap, crit, constraints, tol=1e-8, x0=None):
    """Maximize ``Phi(F(x))`` subject to ``x^T P x <= 1`` for every ``P`` in ``constraints``.

    ``x0`` is a suggested start (scaled into the interior); when it does not
    give a nonsingular ``F`` a phase-I problem finds one or raises
    :class:`CriterionInfeasible`.
    """
    crit = check_criterion(crit)
    if not isinstance(lmap, LinearMatrixMap):
        lmap = LinearMatrixMap(lmap)
    n = lmap.n
    constraints = [np.asarray(P, dtype=float) for P in constraints]
    for P in constraints:
        if P.shape != (n, n):
            raise ValueError(f"constraint shape {P.shape} does not match n={n}")
        if np.linalg.eigvalsh(P)[0] <= 0:
            raise ValueError("constraint matrices must be positive definite")
    if x0 is None:
        x0 = np.ones(n)
    x0 = np.asarray(x0, dtype=float)
    x0 = x0 * _interior_scale(x0, constraints) if np.any(x0) else x0
    x, _, gap, stages, steps = _solve(crit, lmap.F, n, constraints, (), None, x0, tol)
    for P in constraints:
        q = float(x @ P @ x)
        if q > 1 + 1e-8:
            raise NumericFailure(f"subproblem returned an infeasible point (x^T P x = {q:.12g})")
    value = criterion_value(crit, lmap(x))
    return Solution(x, value, gap, stages, steps)


def lift_gram(Y, r):
    """Lowest-rank ``X`` on ``R^{r d}`` whose diagonal ``d x d`` blocks sum to ``Y``.

    Eigen-columns of ``Y`` are packed ``r`` at a time into coefficient matrices,
    so ``rank(Y) <= r`` yields a rank-1 ``X = h h^T``.
    """
    lam, V = np.linalg.eigh(0.5 * (Y + Y.T))
    order = np.argsort(lam)[::-1]
    lam, V = np.clip(lam[order], 0.0, None), V[:, order]
    Z = V * np.sqrt(lam)
    d = Y.shape[0]
    X = np.zeros((r * d, r * d))
    for g in range(0, d, r):
        block = np.zeros((d, r))
        cols = Z[:, g : g + r]
        block[:, : cols.shape[1]] = cols
        h = block.reshape(-1, order="F")
        X += np.outer(h, h)
    return X


@dataclass
class RelaxationSolution(Solution):
    """Relaxation optimum: ``x`` holds the lifted ``X`` on ``R^{n_h}``, ``Y`` the reduced Gram matrix."""

    Y: np.ndarray = None

    @property
    def X(self):
        return self.x


def solve_sdp_relaxation(forms, crit, tol=1e-8):
    """Maximize ``Phi([Tr(M_lm X)])`` over ``X >= 0`` with ``Tr(P X) <= 1`` (normalized).

    Works on the Kronecker-reduced Gram matrix ``Y`` (``d x d``) and lifts the
    optimum to ``X`` on ``R^{n_h}``.
    """
    crit = check_criterion(crit)
    d = forms.d
    sv = _Svec(d)
    Fk = np.transpose(sv.vec(forms.S), (2, 0, 1))
    lin = [sv.vec(block) for _, block in forms.constraint_blocks()]
    eps = 0.25 / max(float(np.trace(block)) for _, block in forms.constraint_blocks())
    z0 = sv.vec(eps * np.eye(d))
    z, prob, gap, stages, steps = _solve(crit, Fk, sv.dim, (), lin, sv, z0, tol)
    Y = sv.mat(z)
    M = np.einsum("lmij,ij->lm", forms.S, Y)
    value = criterion_value(crit, M)
    lam_min = np.linalg.eigvalsh(Y)[0]
    if lam_min < -tol * max(1.0, np.abs(Y).max()):
        raise NumericFailure(f"relaxation returned a non-PSD matrix (min eigenvalue {lam_min:.3e})")
    for label, block in forms.constraint_blocks():
        tr = float(np.sum(block * Y))
        if tr > 1 + tol:
            raise NumericFailure(f"relaxation violates the {label} constraint: {tr:.12g}")
    if not np.isfinite(value):
        raise NumericFailure("relaxation objective is unbounded or undefined", dump={"Y": Y.tolist()})
    X = lift_gram(Y, forms.r)
    return RelaxationSolution(X, value, gap, stages, steps, Y=Y)
