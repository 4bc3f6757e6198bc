"""Simulation of the true system and continuous-time parameter estimation.

``simulate`` integrates each transfer-function entry in controllable canonical
form with fixed-step RK4 (step ``dt/4``) driven by a cubic-spline
interpolation of the input samples.  Because the system is linear, one RK4 step
is an exact linear recursion in the state and the three input samples it
touches, so the whole integration runs as a discrete filter.

``estimate`` works on the DFT lines of periodic steady-state records.  All
entries of an output row are updated jointly by refined instrumental-variable
steps: the residual is projected on instruments built from the current
model's noise-free response and the input, both prefiltered by each entry's
denominator.  No instrument contains measured output, so the estimating
equation is free of the noise bias of plain Sanathanan-Koerner iterations
(the instrumented estimating equation is used from the first round on).
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.interpolate import CubicSpline

from .exceptions import ConfigError, EstimationError, ModelError
from .model import MimoSystem, ParameterIndex, RationalTF, freq_response, system_from_dict
from .synth import SignalSet, read_signals_csv, write_signals_csv

MAX_POLE_DT = 0.1
COND_LIMIT = 1e12
RK_SUBSTEPS = 4


# --- simulation -----------------------------------------------------------------

def canonical_ss(tf):
    """Controllable canonical ``(A, B, C)`` of a strictly proper monic ``RationalTF``."""
    den = np.asarray(tf.den)
    n = len(den) - 1
    A = np.zeros((n, n))
    A[:-1, 1:] = np.eye(n - 1)
    A[-1, :] = -den[:-1]
    B = np.zeros((n, 1))
    B[-1, 0] = 1.0
    C = np.zeros((1, n))
    C[0, : len(tf.num)] = tf.num
    return A, B, C


def rk4_recursion(A, B, h):
    """Matrices of one RK4 step ``x+ = Phi x + G [u(t), u(t+h/2), u(t+h)]^T``."""
    n = A.shape[0]
    b = B[:, 0]

    def step(x, u0, um, u1):
        k1 = A @ x + b * u0
        k2 = A @ (x + 0.5 * h * k1) + b * um
        k3 = A @ (x + 0.5 * h * k2) + b * um
        k4 = A @ (x + h * k3) + b * u1
        return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    Phi = np.column_stack([step(e, 0.0, 0.0, 0.0) for e in np.eye(n)])
    G = np.column_stack([step(np.zeros(n), *e) for e in np.eye(3)])
    return Phi, G


def _check_step(sys, dt):
    fast = sys.fastest_pole()
    if fast * dt > MAX_POLE_DT:
        raise ConfigError(f"dt={dt:.4g} too coarse for the fastest pole |p|={fast:.4g}; "
                          f"use dt <= {MAX_POLE_DT / fast:.4g}")


def _simulate_entry(tf, fine, h):
    """Response of one entry to input samples on the half-step grid ``fine`` (spacing h/2)."""
    A, B, C = canonical_ss(tf)
    Phi, G = rk4_recursion(A, B, h)
    u0, um, u1 = fine[0:-1:2], fine[1::2], fine[2::2]
    out = np.zeros(len(u0) + 1)
    for c, v in enumerate((u0, um, u1)):
        num, den = signal.ss2tf(Phi, G[:, c : c + 1], C, np.zeros((1, 1)))
        # strictly proper in z: output k sees inputs up to step k-1; the padded zero yields the last sample
        out += signal.lfilter(num[0], den, np.append(v, 0.0))
    return out


def simulate(sys, u, noise_std=0.0, seed=None):
    """Output record for input ``u`` (a :class:`SignalSet` with ``r`` channels).

    ``noise_std`` is a scalar or one value per output; Gaussian noise is added
    to the samples using ``seed``.  Returns a ``SignalSet`` with prefix ``y``.
    """
    if u.n_channels != sys.r:
        raise ConfigError(f"input has {u.n_channels} channels, system expects {sys.r}")
    _check_step(sys, u.dt)
    h = u.dt / RK_SUBSTEPS
    t = u.t
    n_fine = RK_SUBSTEPS * (u.n_samples - 1)
    t_half = 0.5 * h * np.arange(2 * n_fine + 1)
    if u.n_samples >= 2:
        spline = CubicSpline(t, u.data, axis=0)
        fine = spline(t_half)
    else:
        fine = np.repeat(u.data, len(t_half), axis=0)
    y = np.zeros((u.n_samples, sys.p))
    for i in range(sys.p):
        for j in range(sys.r):
            y[:, i] += _simulate_entry(sys[i, j], fine[:, j], h)[::RK_SUBSTEPS]
    std = np.broadcast_to(np.asarray(noise_std, dtype=float), (sys.p,))
    if np.any(std < 0):
        raise ConfigError("noise_std must be non-negative")
    if np.any(std > 0):
        rng = np.random.default_rng(seed)
        y = y + rng.standard_normal(y.shape) * std
    return SignalSet(y, u.dt, seed=seed, prefix="y", meta={"noise_std": std.tolist()})


def auto_noise_std(y_clean, fraction=0.1):
    """One tenth (by default) of the smallest channel RMS, applied to every channel."""
    rms = np.sqrt(np.mean(np.asarray(y_clean.data) ** 2, axis=0))
    return float(fraction * rms.min())


# --- estimation -----------------------------------------------------------------

@dataclass
class Estimate:
    system: MimoSystem
    param_std: np.ndarray
    residual_rms: np.ndarray
    n_lines: int
    iterations: int
    conditions: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "system": self.system.to_dict(),
            "param_std": self.param_std.tolist(),
            "residual_rms": self.residual_rms.tolist(),
            "n_lines": self.n_lines,
            "iterations": self.iterations,
            "conditions": {f"{i + 1},{j + 1}": c for (i, j), c in self.conditions.items()},
        }


def periodic_lines(sig, period, discard=1):
    """Average DFT over whole periods after dropping ``discard`` leading periods.

    Returns ``(omega, X)`` for bins ``1 .. period//2 - 1`` with ``X`` shaped
    ``(n_bins, channels)``, normalized so a unit cosine at a bin gives ``0.5``.
    """
    period = int(period)
    n_per = sig.n_samples // period - discard
    if n_per < 1:
        raise ConfigError(f"record of {sig.n_samples} samples holds no full period of {period} after "
                          f"discarding {discard}")
    blocks = sig.data[discard * period : (discard + n_per) * period].reshape(n_per, period, -1)
    X = np.fft.rfft(blocks, axis=1).mean(axis=0) / period
    k = np.arange(1, period // 2)
    return 2 * np.pi * k / (period * sig.dt), X[1 : period // 2]


def _scale_coeffs(c, k, n):
    """Map coefficients of ``p(s)`` to those of ``p(k s) / k^n`` (ascending order)."""
    return np.asarray(c) * k ** (np.arange(len(c)) - n)


def _stable(a):
    return len(a) == 1 or np.all(np.roots(a[::-1]).real < 0)


def _stack(z):
    return np.concatenate([z.real, z.imag])


def _row_regressors(s, Uf, ents):
    """Model output per input and the instrument matrix for one output row.

    Instrument columns are ``-s^k Xhat_j / A_j`` (denominator) and
    ``s^k U_j / A_j`` (numerator), built from noise-free quantities only.
    """
    outs, cols, blocks = [], [], []
    for j, (a, b) in enumerate(ents):
        na, nb = len(a) - 1, len(b) - 1
        A = np.polyval(a[::-1], s)
        xh = np.polyval(b[::-1], s) / A * Uf[:, j]
        pw = s[:, None] ** np.arange(max(na, nb) + 1)
        start = sum(c.shape[1] for c in cols)
        cols.append(np.column_stack([-(pw[:, :na] * (xh / A)[:, None]), pw[:, : nb + 1] * (Uf[:, j] / A)[:, None]]))
        blocks.append(slice(start, start + na + nb + 1))
        outs.append(xh)
    return outs, np.concatenate(cols, axis=1), blocks


def _default_start(s, Uf, Yrow, orders, pole):
    """Reference denominators ``(s + pole)^na`` with least-squares numerators."""
    dens = [np.real(np.poly(np.full(na, -pole)))[::-1] for _, na in orders]
    cols, sizes = [], []
    for j, ((nb, _), a) in enumerate(zip(orders, dens)):
        A = np.polyval(a[::-1], s)
        cols.append(s[:, None] ** np.arange(nb + 1) * (Uf[:, j] / A)[:, None])
        sizes.append(nb + 1)
    theta = np.linalg.lstsq(_stack(np.concatenate(cols, axis=1)), _stack(Yrow), rcond=None)[0]
    parts = np.split(theta, np.cumsum(sizes)[:-1])
    return [(a, b) for a, b in zip(dens, parts)]


def _row_update(s, Uf, Yrow, ents, row):
    """One instrument-weighted update of every entry in an output row (damped for stability)."""
    outs, zeta, blocks = _row_regressors(s, Uf, ents)
    e = Yrow - sum(outs)
    Z = _stack(zeta)
    Mat = Z.T @ Z
    cond = float(np.linalg.cond(Mat))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        worst = max(range(len(blocks)), key=lambda j: np.linalg.cond(Mat[blocks[j], blocks[j]]))
        raise EstimationError(f"ill-conditioned regression for entry ({row + 1},{worst + 1}) (condition {cond:.3e})")
    delta = np.linalg.solve(Mat, Z.T @ _stack(e))
    cost = float(np.sum(np.abs(e) ** 2))
    step = 1.0
    for _ in range(40):
        trial = []
        for (a, b), blk in zip(ents, blocks):
            d = step * delta[blk]
            na = len(a) - 1
            trial.append((np.append(a[:na] + d[:na], 1.0), b + d[na:]))
        if all(_stable(a) for a, _ in trial):
            outs_t, _, _ = _row_regressors(s, Uf, trial)
            if float(np.sum(np.abs(Yrow - sum(outs_t)) ** 2)) <= cost:
                return trial, cond, Mat
        step *= 0.5
    return ents, cond, Mat


def _check_length(u, period, discard, sys):
    slow = sys.slowest_decay()
    if u.dt * (u.n_samples - discard * period) < 20.0 / slow:
        raise ConfigError(f"record too short: need at least {20.0 / slow:.4g} s of steady-state data")


def estimate(u, y, orders=None, period=None, init=None, n_iter=20, discard=1, freq_scale=None, tol=1e-12,
             pole=0.5):
    """Fit a MIMO rational model to periodic input/output records.

    Parameters
    ----------
    u, y : SignalSet
        Input (``r`` channels) and output (``p`` channels) records with the
        same ``dt`` and length.
    orders : nested list of (num_degree, den_degree), optional
        Per-entry orders; taken from ``init`` when omitted.
    period : int
        Period of the excitation in samples.
    init : MimoSystem, optional
        Starting model (e.g. the nominal one).  Without it every entry starts
        from the denominator ``(s + pole)^na`` (in normalized frequency) with
        least-squares numerators.
    n_iter : int
        Instrumental-variable rounds (one joint update per output row each).
    discard : int
        Leading periods dropped to remove the transient.
    freq_scale : float, optional
        Frequency normalization used internally for conditioning (defaults
        to the highest excited frequency).
    tol : float
        Early stop once the relative coefficient change falls below this.

    Returns
    -------
    Estimate
    """
    if u.n_samples != y.n_samples or not np.isclose(u.dt, y.dt, rtol=1e-12):
        raise ConfigError("input and output records must share dt and length")
    p, r = y.n_channels, u.n_channels
    if orders is None:
        if init is None:
            raise ConfigError("either orders or an initial system is required")
        orders = [[(len(init[i, j].num) - 1, len(init[i, j].den) - 1) for j in range(init.r)] for i in range(init.p)]
    if len(orders) != p or any(len(row) != r for row in orders):
        raise ConfigError(f"orders grid must be {p}x{r} to match the records")
    if init is not None and (init.p, init.r) != (p, r):
        raise ConfigError(f"initial system is {init.p}x{init.r}, records are {p}x{r}")
    if period is None:
        raise ConfigError("the excitation period (in samples) is required")

    if init is not None:
        _check_length(u, period, discard, init)
    w, Uf = periodic_lines(u, period, discard)
    _, Yf = periodic_lines(y, period, discard)
    excited = np.max(np.abs(Uf), axis=1) > 1e-8 * np.max(np.abs(Uf))
    w, Uf, Yf = w[excited], Uf[excited], Yf[excited]
    if len(w) < 2:
        raise EstimationError("fewer than two excited frequency lines")
    c = float(freq_scale or w.max())
    s = 1j * w / c

    rows_est, conds, covs, resid = [], {}, [], np.zeros(p)
    rounds = 0
    for i in range(p):
        if init is not None:
            ents = []
            for j in range(r):
                nb, na = orders[i][j]
                e = init[i, j]
                if (len(e.num) - 1, len(e.den) - 1) != (nb, na):
                    raise ConfigError(f"initial entry ({i + 1},{j + 1}) does not match the requested orders")
                ents.append((_scale_coeffs(e.den, c, na), _scale_coeffs(e.num, c, na)))
        else:
            ents = _default_start(s, Uf, Yf[:, i], orders[i], pole)
        for k in range(1, n_iter + 1):
            new, cond, Mat = _row_update(s, Uf, Yf[:, i], ents, i)
            old_v = np.concatenate([np.concatenate(e) for e in ents])
            new_v = np.concatenate([np.concatenate(e) for e in new])
            ents = new
            rounds = max(rounds, k)
            if np.linalg.norm(new_v - old_v) <= tol * max(1.0, np.linalg.norm(new_v)):
                break
        outs, zeta, blocks = _row_regressors(s, Uf, ents)
        fit = Yf[:, i] - sum(outs)
        resid[i] = np.sqrt(np.mean(np.abs(fit) ** 2))
        Z = _stack(zeta)
        cov = 0.5 * resid[i] ** 2 * np.linalg.inv(Z.T @ Z)
        row = []
        for j, ((a, b), blk) in enumerate(zip(ents, blocks)):
            nb, na = orders[i][j]
            den = _scale_coeffs(a, 1.0 / c, na)
            num = _scale_coeffs(b, 1.0 / c, na)
            den[-1] = 1.0
            try:
                row.append(RationalTF(num, den))
            except ModelError as exc:
                raise EstimationError(f"entry ({i + 1},{j + 1}) estimate is invalid: {exc}") from exc
            sd = np.sqrt(np.clip(np.diag(cov)[blk], 0.0, None))
            scale = np.concatenate([c ** (na - np.arange(na)), c ** (na - np.arange(nb + 1))])
            order = np.concatenate([np.arange(na, na + nb + 1), np.arange(na)])  # num first, then den
            covs.append((sd * scale)[order])
            conds[i, j] = float(np.linalg.cond(Mat[blk, blk]))
        rows_est.append(row)
    est = MimoSystem(rows_est, u.meta.get("wc"))
    _check_length(u, period, discard, est)
    return Estimate(est, np.concatenate(covs), resid, len(w), rounds, conds)


# --- comparison and records -------------------------------------------------------

def compare(est, actual, n_grid=512):
    """Per-coefficient relative errors and band response errors of ``est`` against ``actual``."""
    if (est.p, est.r) != (actual.p, actual.r):
        raise ConfigError(f"dimension mismatch: {est.p}x{est.r} vs {actual.p}x{actual.r}")
    idx_a = ParameterIndex.from_system(actual)
    idx_e = ParameterIndex.from_system(est)
    if idx_a.refs != idx_e.refs:
        raise ConfigError("estimated and actual systems have different entry orders")
    true = idx_a.values(actual)
    got = idx_e.values(est)
    rel = np.abs(got - true) / np.where(true != 0, np.abs(true), 1.0)
    wc = actual.wc or est.wc or 1.0
    w = np.linspace(0.0, 1.0, n_grid)
    Ga = freq_response(actual, w, wc)
    Ge = freq_response(est, w, wc)
    band = np.max(np.abs(Ge - Ga), axis=0) / np.max(np.abs(Ga), axis=0)
    return {
        "labels": idx_a.labels(),
        "actual": true.tolist(),
        "estimate": got.tolist(),
        "rel_error": rel.tolist(),
        "median_rel_error": float(np.median(rel)),
        "max_rel_error": float(np.max(rel)),
        "band_error": band.tolist(),
    }


def format_report(report):
    lines = [f"{'param':>8} {'actual':>14} {'estimate':>14} {'rel.err':>10}"]
    for lab, a, e, err in zip(report["labels"], report["actual"], report["estimate"], report["rel_error"]):
        lines.append(f"{lab:>8} {a:14.6g} {e:14.6g} {err:10.3e}")
    lines.append(f"median relative error {report['median_rel_error']:.3e}, max {report['max_rel_error']:.3e}")
    band = np.asarray(report["band_error"])
    for i, row in enumerate(band):
        lines.append("band error row %d: %s" % (i + 1, " ".join(f"{v:.3e}" for v in row)))
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentRecord:
    u: SignalSet
    y: SignalSet
    noise_std: list
    seeds: dict
    sys_actual: MimoSystem = None
    sys_nominal: MimoSystem = None
    period: int = None

    def __post_init__(self):
        if self.u.n_samples != self.y.n_samples or not np.isclose(self.u.dt, self.y.dt, rtol=1e-12):
            raise ConfigError("u and y must share dt and length")

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_signals_csv(self.u, d / "u.csv")
        write_signals_csv(self.y, d / "y.csv")
        meta = {
            "dt": self.u.dt,
            "n_samples": self.u.n_samples,
            "period": self.period,
            "noise_std": list(self.noise_std),
            "seeds": self.seeds,
            "sys_actual": self.sys_actual.to_dict() if self.sys_actual else None,
            "sys_nominal": self.sys_nominal.to_dict() if self.sys_nominal else None,
        }
        (d / "record.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        meta = json.loads((d / "record.json").read_text())
        u = read_signals_csv(d / "u.csv")
        y = read_signals_csv(d / "y.csv")
        act = system_from_dict(meta["sys_actual"]) if meta.get("sys_actual") else None
        nom = system_from_dict(meta["sys_nominal"]) if meta.get("sys_nominal") else None
        return cls(u, y, meta["noise_std"], meta["seeds"], act, nom, meta.get("period"))
