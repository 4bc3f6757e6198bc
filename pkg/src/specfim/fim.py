"""Fisher information and power constraints as quadratic forms in the spectral-factor coefficients.

The input spectrum is parameterized as ``phi_u(w) = 0.5 * W(w) Hc Hc^T W(w)^T``
where ``Hc`` stacks the coefficient blocks ``H_0..H_m`` vertically (shape
``r(m+1) x r``) and ``h = vec(Hc)`` is its column-stacked vector.  Every
quadratic quantity has the form ``Tr(Hc^T Q Hc) = h^T (I_r kron Q) h``, so
:class:`QuadraticForms` stores only the ``r(m+1)``-sized blocks ``Q`` and
expands to full ``n_h x n_h`` matrices on demand.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import build_W, gram, integrate_samples, quadrature
from .exceptions import AssemblyError, ConfigError
from .model import freq_response, param_gradient

PD_TOL = 1e-10


def vec(Hc):
    return np.asarray(Hc).reshape(-1, order="F")


def unvec(h, r):
    h = np.asarray(h, dtype=float)
    if h.size % r:
        raise ConfigError(f"length {h.size} not divisible by r={r}")
    return h.reshape(-1, r, order="F")


def kron_eye(block, r):
    return np.kron(np.eye(r), block)


def _sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _check_pd(mat, what):
    lam = np.linalg.eigvalsh(mat)
    if not lam[0] > PD_TOL:
        raise AssemblyError(f"{what} is not positive definite (min eigenvalue {lam[0]:.3e})")
    return mat


def input_gram(spec, r, rule=None):
    """``0.5 * int W^T W`` over the normalized band (the matrix called 𝒲)."""
    return _check_pd(np.kron(gram(spec, rule), np.eye(r)), "input Gram matrix")


def output_gram(sys, spec, rule=None, port=None):
    """``Re 0.5 * int W^T G^* G W``; ``port`` restricts to one output channel."""
    rule = rule or quadrature(spec.n_q)
    G = freq_response(sys, rule.nodes, spec.wc)
    if port is not None:
        G = G[:, port : port + 1, :]
    GW = G @ build_W(spec, rule.nodes, sys.r)
    samples = np.einsum("qai,qaj->qij", GW.conj(), GW)
    out = _sym(0.5 * integrate_samples(samples, rule).real)
    return out if port is not None else _check_pd(out, "output Gram matrix")


def input_port_gram(spec, r, port, rule=None):
    sel = np.zeros((r, r))
    sel[port, port] = 1.0
    return np.kron(gram(spec, rule), sel)


def assemble_input_power(spec, r):
    """``P_I = I_r kron 𝒲`` so that input power is ``h^T P_I h``."""
    return kron_eye(input_gram(spec, r), r)


def assemble_output_power(sys, spec):
    """``P_O = I_r kron 𝒲_G`` so that output power (noise excluded) is ``h^T P_O h``."""
    return kron_eye(output_gram(sys, spec), sys.r)


def fim_blocks(sys, index, spec, rule=None):
    """Reduced FIM forms ``S[l, m]`` with ``FIM_lm = Tr(Hc^T S_lm Hc)``.

    ``S_lm`` is the real symmetric part of
    ``0.5 * int W^T (dG/dth_m)^* (dG/dth_l) W`` averaged with its (m, l) twin.
    """
    rule = rule or quadrature(spec.n_q)
    dG = param_gradient(sys, index, rule.nodes, spec.wc)  # (q, N, p, r)
    GW = dG @ build_W(spec, rule.nodes, sys.r)[:, None]  # (q, N, p, d)
    wq = 0.5 * rule.weights
    Q = np.einsum("q,qmai,qlaj->lmij", wq, GW.conj(), GW, optimize=True)
    S = 0.5 * (Q + np.transpose(Q, (1, 0, 2, 3))).real
    return _sym(S)


def assemble_fim_forms(sys, index, spec):
    """Full ``M[l, m] = I_r kron S[l, m]`` (shape ``(N, N, n_h, n_h)``)."""
    S = fim_blocks(sys, index, spec)
    r = sys.r
    N, _, d, _ = S.shape
    M = np.zeros((N, N, r * d, r * d))
    for c in range(r):
        M[:, :, c * d : (c + 1) * d, c * d : (c + 1) * d] = S
    return M


@dataclass(frozen=True)
class QuadraticForms:
    """Kronecker-reduced FIM and power forms plus their budgets.

    ``S`` has shape ``(N, N, d, d)``; ``gram_in``/``gram_out`` are ``d x d``;
    the decision vector has length ``n_h = r * d``.  ``extra`` holds optional
    per-port caps as ``(label, block, budget)`` triples.
    """

    S: np.ndarray
    gram_in: np.ndarray
    gram_out: np.ndarray
    r: int
    K_u: float = 1.0
    K_y: float = 1.0
    noise_offset: float = 0.0
    extra: tuple = field(default_factory=tuple)
    labels: tuple = None

    def __post_init__(self):
        S = np.asarray(self.S, dtype=float)
        if S.ndim != 4 or S.shape[0] != S.shape[1] or S.shape[2] != S.shape[3]:
            raise ConfigError(f"S must have shape (N, N, d, d), got {S.shape}")
        if not np.allclose(S, np.transpose(S, (1, 0, 2, 3))) or not np.allclose(S, np.transpose(S, (0, 1, 3, 2))):
            raise ConfigError("FIM forms must satisfy M_lm = M_ml and be symmetric")
        if self.K_u <= 0 or self.K_y - self.noise_offset <= 0:
            raise ConfigError(f"budgets must leave a non-empty interior (K_u={self.K_u}, K_y-p={self.K_y - self.noise_offset})")
        for b, name in ((self.gram_in, "P_I"), (self.gram_out, "P_O")):
            if b.shape != S.shape[2:]:
                raise ConfigError(f"{name} block has shape {b.shape}, expected {S.shape[2:]}")
        object.__setattr__(self, "S", S)

    @property
    def N(self):
        return self.S.shape[0]

    @property
    def d(self):
        return self.S.shape[2]

    @property
    def n_h(self):
        return self.r * self.d

    @property
    def K_y_eff(self):
        return self.K_y - self.noise_offset

    @property
    def P_I(self):
        return kron_eye(self.gram_in, self.r)

    @property
    def P_O(self):
        return kron_eye(self.gram_out, self.r)

    @property
    def M(self):
        out = np.zeros((self.N, self.N, self.n_h, self.n_h))
        for c in range(self.r):
            out[:, :, c * self.d : (c + 1) * self.d, c * self.d : (c + 1) * self.d] = self.S
        return out

    def constraint_blocks(self):
        """Constraint blocks normalized to unit right-hand side: ``[(label, Q / K)]``."""
        out = [("input", self.gram_in / self.K_u), ("output", self.gram_out / self.K_y_eff)]
        out += [(label, block / budget) for label, block, budget in self.extra]
        return out

    def constraint_values(self, h):
        """Raw (un-normalized) constraint values and their budgets for ``h``."""
        Hc = unvec(h, self.r)
        vals = [("input", np.trace(Hc.T @ self.gram_in @ Hc), self.K_u),
                ("output", np.trace(Hc.T @ self.gram_out @ Hc), self.K_y_eff)]
        vals += [(label, np.trace(Hc.T @ block @ Hc), budget) for label, block, budget in self.extra]
        return vals

    def is_feasible(self, h, tol=1e-8):
        return all(v <= k * (1 + tol) for _, v, k in self.constraint_values(h))

    def to_dict(self):
        """Packed lower-triangular export of the full ``n_h``-sized matrices."""
        n = self.n_h
        rows, cols = np.tril_indices(n)
        M = self.M
        return {
            "N": self.N,
            "n_h": n,
            "r": self.r,
            "packing": "lower-triangular, row-major",
            "K_u": self.K_u,
            "K_y": self.K_y,
            "noise_offset": self.noise_offset,
            "P_I": self.P_I[rows, cols].tolist(),
            "P_O": self.P_O[rows, cols].tolist(),
            "M": {f"{l},{m}": M[l, m][rows, cols].tolist() for l in range(self.N) for m in range(l, self.N)},
            "extra": [{"label": lab, "budget": k, "P": kron_eye(b, self.r)[rows, cols].tolist()} for lab, b, k in self.extra],
        }


def save_forms(forms, path):
    Path(path).write_text(json.dumps(forms.to_dict()))


def unpack_lower(packed, n):
    out = np.zeros((n, n))
    rows, cols = np.tril_indices(n)
    out[rows, cols] = packed
    out[cols, rows] = packed
    return out


def build_forms(sys, index, spec, K_u, K_y, noise_offset=True, port_caps=None):
    """Assemble all forms for a system.

    ``noise_offset`` subtracts the output count ``p`` (unit-variance noise per
    channel) from the output budget.  ``port_caps`` may hold
    ``{"input": [..r budgets..], "output": [..p budgets..]}``; ``None`` entries
    are skipped.
    """
    if spec.wc <= 0:
        raise ConfigError("wc must be positive")
    rule = quadrature(spec.n_q)
    r = sys.r
    extra = []
    port_caps = port_caps or {}
    for i, k in enumerate(port_caps.get("input") or []):
        if k is not None:
            extra.append((f"input[{i + 1}]", input_port_gram(spec, r, i, rule), float(k)))
    for j, k in enumerate(port_caps.get("output") or []):
        if k is not None:
            extra.append((f"output[{j + 1}]", output_gram(sys, spec, rule, port=j), float(k)))
    return QuadraticForms(
        S=fim_blocks(sys, index, spec, rule),
        gram_in=input_gram(spec, r, rule),
        gram_out=output_gram(sys, spec, rule),
        r=r,
        K_u=float(K_u),
        K_y=float(K_y),
        noise_offset=float(sys.p) if noise_offset else 0.0,
        extra=tuple(extra),
        labels=tuple(index.labels()),
    )


def fim_at(forms, h):
    """Fisher information matrix ``[h^T M_lm h]`` for coefficient vector ``h``."""
    h = np.asarray(h, dtype=float)
    if h.shape != (forms.n_h,):
        raise ConfigError(f"h must have length {forms.n_h}, got shape {h.shape}")
    Hc = unvec(h, forms.r)
    F = np.einsum("lmij,ic,jc->lm", forms.S, Hc, Hc, optimize=True)
    return 0.5 * (F + F.T)


def fim_of_gram(forms, Y):
    """Relaxed FIM ``[Tr(S_lm Y)]`` for a ``d x d`` PSD matrix ``Y``."""
    F = np.einsum("lmij,ij->lm", forms.S, Y, optimize=True)
    return 0.5 * (F + F.T)


def spectrum_at(Hc, spec, w):
    """Designed input spectrum ``0.5 W Hc Hc^T W^T`` at normalized frequency ``w``."""
    Hc = np.asarray(Hc, dtype=float)
    r = Hc.shape[1]
    H = build_W(spec, w, r) @ Hc
    return 0.5 * H @ np.swapaxes(H, -1, -2)


def factor_at(Hc, spec, w):
    """Spectral factor ``H(w) = W(w) Hc``."""
    Hc = np.asarray(Hc, dtype=float)
    return build_W(spec, w, Hc.shape[1]) @ Hc
