"""MIMO rational transfer-function matrices and their parameter gradients.

Each entry is ``num(s) / den(s)`` with coefficient vectors in ascending powers
of ``s`` and a monic denominator.  The free parameters are every numerator
coefficient plus every denominator coefficient except the leading 1.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, ModelError

DEN_TOL = 1e-12


def horner(coef, s):
    """Evaluate a polynomial with ascending coefficients at ``s``."""
    s = np.asarray(s)
    acc = np.zeros_like(s, dtype=complex) + coef[-1]
    for c in coef[-2::-1]:
        acc = acc * s + c
    return acc


@dataclass(frozen=True)
class RationalTF:
    num: tuple
    den: tuple
    # only unit tests relax this (e.g. a static pass-through gain)
    strictly_proper: bool = True

    def __post_init__(self):
        num = tuple(float(c) for c in self.num)
        den = tuple(float(c) for c in self.den)
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)
        if not num or not den:
            raise ModelError("empty coefficient vector")
        if den[-1] != 1.0:
            raise ModelError(f"denominator must be monic (leading coefficient 1), got {den[-1]}")
        if self.strictly_proper and len(num) >= len(den):
            raise ModelError(f"transfer function must be strictly proper: deg num {len(num) - 1} >= deg den {len(den) - 1}")
        if not all(np.isfinite(num + den)):
            raise ModelError("non-finite coefficient")
        if np.any(self.poles().real >= 0):
            raise ModelError(f"unstable denominator {den}: poles {self.poles()}")

    def poles(self):
        n = len(self.den) - 1
        if n == 0:
            return np.array([], dtype=complex)
        comp = np.zeros((n, n))
        comp[0, :] = -np.asarray(self.den[-2::-1])
        comp[1:, :-1] = np.eye(n - 1)
        return np.linalg.eigvals(comp)

    @property
    def n_params(self):
        return len(self.num) + len(self.den) - 1

    def dc_gain(self):
        return self.num[0] / self.den[0]

    def __call__(self, s):
        return horner(self.num, s) / horner(self.den, s)

    def to_dict(self):
        return {"num": list(self.num), "den": list(self.den)}


@dataclass(frozen=True)
class MimoSystem:
    entries: tuple
    wc: float = None

    def __post_init__(self):
        rows = tuple(tuple(row) for row in self.entries)
        object.__setattr__(self, "entries", rows)
        if not rows or not rows[0]:
            raise ConfigError("system needs at least one entry")
        if any(len(row) != len(rows[0]) for row in rows):
            raise ConfigError("ragged transfer-function grid")
        for row in rows:
            for e in row:
                if not isinstance(e, RationalTF):
                    raise ConfigError("entries must be RationalTF instances")

    @property
    def p(self):
        return len(self.entries)

    @property
    def r(self):
        return len(self.entries[0])

    def __getitem__(self, ij):
        i, j = ij
        return self.entries[i][j]

    def fastest_pole(self):
        return max((np.max(np.abs(e.poles())) for row in self.entries for e in row), default=0.0)

    def slowest_decay(self):
        return min(np.min(-e.poles().real) for row in self.entries for e in row)

    def to_dict(self):
        d = {"p": self.p, "r": self.r}
        if self.wc is not None:
            d["wc"] = self.wc
        d["entries"] = [[e.to_dict() for e in row] for row in self.entries]
        return d


def system_from_dict(d):
    try:
        p, r = int(d["p"]), int(d["r"])
        rows = d["entries"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"system definition missing field: {exc}") from exc
    if len(rows) != p or any(len(row) != r for row in rows):
        raise ConfigError(f"entries grid does not match p={p}, r={r}")
    entries = []
    for i, row in enumerate(rows):
        out = []
        for j, e in enumerate(row):
            try:
                out.append(RationalTF(e["num"], e["den"]))
            except ModelError as exc:
                raise ModelError(f"entry ({i + 1},{j + 1}): {exc}") from exc
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"entry ({i + 1},{j + 1}) malformed: {exc}") from exc
        entries.append(out)
    wc = d.get("wc")
    if wc is not None and not float(wc) > 0:
        raise ConfigError(f"wc must be positive, got {wc}")
    return MimoSystem(entries, None if wc is None else float(wc))


def load_system(path):
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return system_from_dict(d)


def save_system(sys, path):
    Path(path).write_text(json.dumps(sys.to_dict(), indent=2))


@dataclass(frozen=True)
class ParamRef:
    i: int
    j: int
    kind: str  # "num" or "den"
    power: int


@dataclass(frozen=True)
class ParameterIndex:
    """Deterministic ordering of the free coefficients.

    Row-major over entries, numerator before denominator, ascending power.
    """

    refs: tuple = field(default_factory=tuple)

    @classmethod
    def from_system(cls, sys):
        refs = []
        for i in range(sys.p):
            for j in range(sys.r):
                e = sys[i, j]
                refs += [ParamRef(i, j, "num", k) for k in range(len(e.num))]
                refs += [ParamRef(i, j, "den", k) for k in range(len(e.den) - 1)]
        return cls(tuple(refs))

    def __len__(self):
        return len(self.refs)

    def __iter__(self):
        return iter(self.refs)

    def labels(self):
        return [f"{'b' if ref.kind == 'num' else 'a'}{ref.i + 1}{ref.j + 1}^{ref.power}" for ref in self.refs]

    def values(self, sys):
        return np.array([getattr(sys[ref.i, ref.j], ref.kind)[ref.power] for ref in self.refs])

    def with_values(self, sys, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (len(self),):
            raise ConfigError(f"expected {len(self)} parameters, got shape {theta.shape}")
        coef = {(i, j): [list(sys[i, j].num), list(sys[i, j].den)] for i in range(sys.p) for j in range(sys.r)}
        for ref, v in zip(self.refs, theta):
            coef[ref.i, ref.j][0 if ref.kind == "num" else 1][ref.power] = v
        entries = [[RationalTF(*coef[i, j]) for j in range(sys.r)] for i in range(sys.p)]
        return MimoSystem(entries, sys.wc)


def _check_den(den):
    if np.any(np.abs(den) < DEN_TOL):
        raise ModelError("degenerate model: denominator vanishes on the imaginary axis")


def freq_response(sys, w, wc):
    """``G(j wc w)``; shape ``w.shape + (p, r)``."""
    if not wc > 0:
        raise ConfigError(f"wc must be positive, got {wc}")
    s = 1j * wc * np.asarray(w, dtype=float)
    out = np.empty(s.shape + (sys.p, sys.r), dtype=complex)
    for i in range(sys.p):
        for j in range(sys.r):
            e = sys[i, j]
            den = horner(e.den, s)
            _check_den(den)
            out[..., i, j] = horner(e.num, s) / den
    return out


def param_gradient(sys, index, w, wc):
    """Derivatives of ``G(j wc w)`` with respect to each free parameter.

    Returns shape ``w.shape + (N, p, r)``; slice ``[..., l, :, :]`` is
    ``dG/dtheta_l``, which is zero outside entry ``(i, j)`` of that parameter.
    """
    if not wc > 0:
        raise ConfigError(f"wc must be positive, got {wc}")
    s = 1j * wc * np.asarray(w, dtype=float)
    out = np.zeros(s.shape + (len(index), sys.p, sys.r), dtype=complex)
    cache = {}
    for l, ref in enumerate(index):
        key = (ref.i, ref.j)
        if key not in cache:
            e = sys[key]
            den = horner(e.den, s)
            _check_den(den)
            cache[key] = (horner(e.num, s), den)
        num, den = cache[key]
        if ref.kind == "num":
            out[..., l, ref.i, ref.j] = s**ref.power / den
        else:
            out[..., l, ref.i, ref.j] = -num * s**ref.power / den**2
    return out
