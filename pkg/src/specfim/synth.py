"""Random-phase multisine realization of a designed input spectrum.

For a factor ``H(w) = W(w) Hc`` the channel spectra at the positive bins
``omega_k = wc k / N_f`` (k = 1..N_f) are

    U_i(k) = sqrt(pi) * sum_m H_im(k) exp(j Psi_m(k))

with i.i.d. phases ``Psi_m(k)``.  The record is the Hermitian-completed sum

    u_i(t) = sqrt(d_omega) / (2 pi) * sum_k [U_i(k) e^{j omega_k t} + conj(.)]

whose expected power is ``(1/pi) int_0^wc phi_ii``.  The ``sqrt(d_omega)``
factor (rather than ``d_omega``) keeps the power independent of ``N_f``.

Spectral densities use the two-sided angular convention
``R(0) = (1/2pi) int phi(omega) d omega``.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .basis import BasisSpec
from .exceptions import ConfigError, SynthesisError
from .fim import factor_at, spectrum_at

MIN_BINS = 64
REAL_FAIL_TOL = 1e-8
CHUNK = 4096


@dataclass
class SignalSet:
    """Equal-length real channels sampled every ``dt`` seconds (``data`` is ``(n, c)``)."""

    data: np.ndarray
    dt: float
    seed: int = None
    N_f: int = None
    Hc: np.ndarray = None
    prefix: str = "u"
    imag_residue: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2:
            raise ConfigError(f"signal data must be (n_samples, channels), got shape {data.shape}")
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(data)):
            raise ConfigError("signal contains non-finite samples")
        self.data = data

    @property
    def n_samples(self):
        return self.data.shape[0]

    @property
    def n_channels(self):
        return self.data.shape[1]

    @property
    def duration(self):
        return self.n_samples * self.dt

    @property
    def t(self):
        return np.arange(self.n_samples) * self.dt

    def channel(self, i):
        return self.data[:, i]

    def to_csv(self, path):
        write_signals_csv(self, path)


def write_signals_csv(sig, path):
    header = ["t"] + [f"{sig.prefix}{i + 1}" for i in range(sig.n_channels)]
    table = np.column_stack([sig.t, sig.data])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, table, delimiter=",", fmt="%.17g")


def read_signals_csv(path):
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), None)
    if not header or header[0] != "t" or len(header) < 2:
        raise ConfigError(f"{path}: expected header 't,<name>1,...'")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if table.shape[1] != len(header):
        raise ConfigError(f"{path}: {table.shape[1]} columns but {len(header)} header fields")
    if table.shape[0] < 2:
        raise ConfigError(f"{path}: need at least two samples")
    dt = float(table[1, 0] - table[0, 0])
    if not np.allclose(np.diff(table[:, 0]), dt, rtol=1e-9, atol=0.0):
        raise ConfigError(f"{path}: time column is not uniformly spaced")
    prefix = header[1].rstrip("0123456789")
    return SignalSet(table[:, 1:], dt, prefix=prefix)


def default_dt(wc, N_f, oversample=4):
    """Sample period with Nyquist rate ``oversample * wc`` landing on an FFT-friendly grid."""
    L = int(2 ** np.ceil(np.log2(2 * oversample * N_f)))
    return 2 * np.pi * N_f / (wc * L)


def _draw_phasors(r, N_f, seed, phases):
    # one child stream per source channel, so adding bins or channels never reshuffles the others
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(r)]
    if phases == "uniform":
        return np.stack([np.exp(1j * g.uniform(0.0, 2 * np.pi, N_f)) for g in streams])
    if phases == "gaussian":
        return np.stack([(g.standard_normal(N_f) + 1j * g.standard_normal(N_f)) / np.sqrt(2) for g in streams])
    raise ConfigError(f"unknown phase distribution {phases!r}")


def bin_spectra(Hc, spec, N_f, seed, phases="uniform"):
    """Frequencies ``omega_k`` (rad/s) and channel spectra ``U`` with shape ``(r, N_f)``."""
    Hc = np.asarray(Hc, dtype=float)
    r = Hc.shape[1]
    k = np.arange(1, N_f + 1)
    H = factor_at(Hc, spec, k / N_f)  # (N_f, r, r)
    E = _draw_phasors(r, N_f, seed, phases)  # (r sources, N_f)
    U = np.sqrt(np.pi) * np.einsum("kim,mk->ik", H, E)
    return spec.wc * k / N_f, U


def synthesize(Hc, spec: BasisSpec, N_f=2048, dt=None, n_samples=None, seed=0, phases="uniform"):
    """Real multichannel record whose spectrum matches ``0.5 H H^T`` on ``[0, wc]``.

    Parameters
    ----------
    Hc : array, shape (r(m+1), r)
        Stacked factor coefficients.
    spec : BasisSpec
        Basis used by the design (its ``wc`` sets the band in rad/s).
    N_f : int
        Number of positive frequency bins (at least 64).
    dt : float, optional
        Sample period; defaults to :func:`default_dt`.
    n_samples : int, optional
        Record length; defaults to one period ``2 pi N_f / wc``.
    seed : int
        Phase-table seed; identical seeds reproduce identical samples.
    phases : {"uniform", "gaussian"}
        Distribution of the per-bin phasors.

    Returns
    -------
    SignalSet
    """
    Hc = np.asarray(Hc, dtype=float)
    if Hc.ndim != 2 or Hc.shape[0] != spec.size * Hc.shape[1]:
        raise ConfigError(f"Hc shape {Hc.shape} does not match basis size {spec.size}")
    if int(N_f) != N_f or N_f < MIN_BINS:
        raise ConfigError(f"N_f must be an integer >= {MIN_BINS}, got {N_f}")
    N_f = int(N_f)
    dt = default_dt(spec.wc, N_f) if dt is None else float(dt)
    if not dt > 0 or np.pi / dt <= spec.wc:
        raise ConfigError(f"dt={dt} puts the Nyquist rate below the band edge wc={spec.wc}")
    period = 2 * np.pi * N_f / spec.wc
    L_real = period / dt
    L = int(round(L_real))
    n_samples = L if n_samples is None else int(n_samples)
    if n_samples < 1:
        raise ConfigError("n_samples must be positive")

    w, U = bin_spectra(Hc, spec, N_f, seed, phases)
    a = np.sqrt(spec.wc / N_f) / (2 * np.pi) * U  # (r, N_f)
    r = Hc.shape[1]
    if abs(L_real - L) <= 1e-9 * L_real and 2 * N_f < L:
        X = np.zeros((r, L), dtype=complex)
        X[:, 1 : N_f + 1] = a
        X[:, L - N_f :] = np.conj(a[:, ::-1])
        z = L * np.fft.ifft(X, axis=1)
        reps = -(-n_samples // L)
        z = np.tile(z, (1, reps))[:, :n_samples]
    else:
        z = np.empty((r, n_samples), dtype=complex)
        for start in range(0, n_samples, CHUNK):
            t = dt * np.arange(start, min(start + CHUNK, n_samples))
            e = np.exp(1j * np.outer(w, t))
            z[:, start : start + len(t)] = a @ e + np.conj(a) @ np.conj(e)
    u = z.real
    scale = np.max(np.abs(u)) if u.size else 0.0
    resid = float(np.max(np.abs(z.imag)) / scale) if scale > 0 else 0.0
    if resid > REAL_FAIL_TOL:
        raise SynthesisError(f"synthesized signal is not real (relative imaginary residue {resid:.3e})")
    return SignalSet(u.T.copy(), dt, seed=seed, N_f=N_f, Hc=Hc, imag_residue=resid,
                     meta={"wc": spec.wc, "phases": phases, "period": period})


def empirical_psd(sig, n_segments=200):
    """Welch estimate of the matrix spectrum.

    Uses Hann windows with 50% overlap sized to give ``n_segments`` averages.
    Returns ``(omega, Phi)`` with ``omega`` in rad/s and ``Phi`` of shape
    ``(len(omega), c, c)``, Hermitian at every frequency, in the angular
    two-sided convention of this module.
    """
    if n_segments < 8:
        raise ConfigError(f"n_segments must be >= 8, got {n_segments}")
    n = sig.n_samples
    nperseg = int(2 * n // (n_segments + 1))
    if nperseg < 8:
        raise ConfigError(f"record of {n} samples is too short for {n_segments} segments")
    fs = 1.0 / sig.dt
    c = sig.n_channels
    Phi = None
    for i in range(c):
        for j in range(i, c):
            f, P = signal.csd(sig.data[:, j], sig.data[:, i], fs=fs, window="hann", nperseg=nperseg,
                              noverlap=nperseg // 2, detrend=False, return_onesided=True, scaling="density")
            if Phi is None:
                Phi = np.zeros((len(f), c, c), dtype=complex)
            Phi[:, i, j] = 0.5 * P
            Phi[:, j, i] = 0.5 * np.conj(P)
    return 2 * np.pi * f, Phi


def designed_spectrum(Hc, spec, omega):
    """Target ``0.5 H H^T`` at angular frequencies ``omega`` in ``[0, wc]``."""
    return spectrum_at(Hc, spec, np.asarray(omega) / spec.wc)


def band_l1_error(omega, estimate, target):
    """``int |estimate - target| / int |target|`` over the supplied grid (trapezoid rule).

    Matrix-valued inputs of shape ``(n, c, c)`` give a ``(c, c)`` array of
    entrywise errors; entries whose target vanishes report the absolute error.
    """
    num = np.trapezoid(np.abs(np.asarray(estimate) - target), omega, axis=0)
    den = np.trapezoid(np.abs(target), omega, axis=0)
    out = np.where(den > 0, num / np.where(den > 0, den, 1.0), num)
    return float(out) if out.ndim == 0 else out


def write_spectrum_csv(omega, Phi, path):
    """Columns ``w`` then ``phi_ij_re, phi_ij_im`` for every pair ``i <= j``."""
    c = Phi.shape[1]
    pairs = [(i, j) for i in range(c) for j in range(i, c)]
    header = ["w"] + [f"phi_{i + 1}{j + 1}_{part}" for i, j in pairs for part in ("re", "im")]
    cols = [omega]
    for i, j in pairs:
        cols += [Phi[:, i, j].real, Phi[:, i, j].imag]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, np.column_stack(cols), delimiter=",", fmt="%.17g")


def read_spectrum_csv(path):
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n_pairs = (len(header) - 1) // 2
    c = int(round((np.sqrt(8 * n_pairs + 1) - 1) / 2))
    Phi = np.zeros((table.shape[0], c, c), dtype=complex)
    col = 1
    for i in range(c):
        for j in range(i, c):
            Phi[:, i, j] = table[:, col] + 1j * table[:, col + 1]
            Phi[:, j, i] = np.conj(Phi[:, i, j])
            col += 2
    return table[:, 0], Phi
