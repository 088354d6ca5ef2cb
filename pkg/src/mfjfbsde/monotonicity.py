"""Monotonicity certificates and sampling-based falsification probes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .coefficients import AssembledField, Slot, _random_slot, sample_times, _take
from .grids_marks import MarkSpace

VARIANTS = ("H32", "H33", "R32i", "R32ii")


@dataclass(frozen=True)
class MonotonicityData:
    G: np.ndarray
    beta1: float
    beta2: float
    beta3: float
    mu1: float
    C0: float
    L_A: float
    L_Phi: float
    lambda1: Optional[float] = None
    # only used by the weakened condition for z/k-free diffusions
    L_f: float = 0.0
    L_g: float = 0.0
    T: float = 1.0

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        object.__setattr__(self, "G", G)
        vals = [self.beta1, self.beta2, self.beta3, self.mu1, self.C0, self.L_A, self.L_Phi, self.L_f, self.L_g, self.T]
        if self.lambda1 is not None:
            vals.append(self.lambda1)
        if not all(math.isfinite(float(v)) for v in vals) or not np.all(np.isfinite(G)):
            raise ValueError("monotonicity constants must be finite")

    @property
    def lam1(self) -> float:
        """Bound on ``|G l| / |l|``; the spectral norm of ``G`` unless supplied."""
        if self.lambda1 is not None:
            return float(self.lambda1)
        return float(np.linalg.norm(self.G, 2))

    def spectral_bound_holds(self) -> bool:
        return self.lam1 >= float(np.linalg.norm(self.G, 2)) * (1 - 1e-12)


@dataclass(frozen=True)
class CertificateReport:
    condition_set: str
    margin: tuple
    passed: bool
    variant: str
    labels: tuple = ()
    extra: dict = field(default_factory=dict)

    @property
    def pass_(self) -> bool:
        return self.passed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["margin"] = list(self.margin)
        d["labels"] = list(self.labels)
        d["pass"] = d.pop("passed")
        return d


def _pattern(s, strict):
    return all((v > 0) if st else (v >= 0) for v, st in zip(s, strict))


def check_constants(data: MonotonicityData, variant: str = "H32") -> CertificateReport:
    """Evaluate the constant inequalities of one certificate family.

    ``margin`` holds the literal left-minus-right value of each
    inequality in the printed order.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    b1, b2, b3, mu = float(data.beta1), float(data.beta2), float(data.beta3), float(data.mu1)
    C0, LA, LP, lam1 = float(data.C0), float(data.L_A), float(data.L_Phi), data.lam1

    if variant in ("H32", "H33"):
        s = (b1 - LA * C0, b2 - LA * C0, b3 - LA, mu - LP * lam1)
        labels = ("beta1-L_A*C0", "beta2-L_A*C0", "beta3-L_A", "mu1-L_Phi*lambda1")
        if _pattern(s, (True, False, False, True)):
            name, ok = f"{variant}-case1", True
        elif s[0] == 0 and _pattern(s[1:], (True, True, True)):
            name, ok = f"{variant}-case2", True
        else:
            name, ok = "none", False
        return CertificateReport(name, s, ok, variant, labels)

    if variant == "R32i":
        s = (b1 - C0 * LA, b2 - C0 * LA)
        ok = s[0] >= 0 and s[1] >= 0 and not (s[0] == 0 and s[1] == 0)
        return CertificateReport("R32-i" if ok else "none", s, ok, variant, ("beta1-C0*L_A", "beta2-C0*L_A"))

    Lf, T = float(data.L_f), float(data.T)
    C = math.exp((C0 * (4 * Lf + 12 * Lf**2 + 8 * Lf**2 * C0) + 1.0) * T)
    s = (b1 - (LA + 2 * LA * C * C0**2), mu - (LP * lam1 + 8 * C * LP**2 * LA * C0))
    ok = s[0] > 0 and s[1] > 0
    return CertificateReport("R32-ii" if ok else "none", s, ok, variant,
                             ("beta1-(L_A+2*L_A*C*C0^2)", "mu1-(L_Phi*lambda1+8*C*L_Phi^2*L_A*C0)"),
                             {"C_LgT": C, "L_f": Lf, "L_g": float(data.L_g)})


def _inner(a: Slot, b: Slot, w: np.ndarray) -> np.ndarray:
    out = np.sum(a.x * b.x, -1) + np.sum(a.y * b.y, -1) + np.sum(a.z * b.z, (-2, -1))
    if a.k.shape[-1]:
        out = out + np.sum(a.k * b.k * w, (-2, -1))
    return out


def _sub(a: Slot, b: Slot) -> Slot:
    return Slot(a.x - b.x, a.y - b.y, a.z - b.z, a.k - b.k)


def monotonicity_form(field: AssembledField, t: float, lam: Slot, lam_bar: Slot, lam_tilde: Slot,
                      weights: np.ndarray) -> np.ndarray:
    """``sum over marks of <A(lam) - A(lam_bar), lam - lam_bar>`` with weights on the jump block."""
    dA = _sub(field(t, lam, lam_tilde), field(t, lam_bar, lam_tilde))
    return _inner(dA, _sub(lam, lam_bar), weights)


def probe_monotonicity(field: AssembledField, marks: MarkSpace, G, samples: int, seed: int,
                       box: float = 10.0, T: float = 1.0, tol: float = 1e-9) -> dict:
    """Sample both monotonicity inequalities in ``[-box, box]``.

    Each constant is estimated from differences confined to its own block
    (``x``; ``(y, z)``; ``k``), so ``beta*_hat`` is the smallest observed
    ratio ``-Q / |block|^2``. Joint samples then test the combined
    inequality with the nonnegative parts of the estimates; any sample
    whose slack is below ``-tol * scale`` is reported as a violation.
    """
    if samples < 1:
        raise ValueError("probe_monotonicity needs at least one sample")
    G = np.atleast_2d(np.asarray(G, dtype=float))
    dims = field.coeffs.dims
    w = marks.weights
    rng = np.random.default_rng(seed)
    per = max(1, samples)

    def draw():
        lam_bar = _random_slot(rng, dims, per, box)
        lam_tilde = _random_slot(rng, dims, per, box)
        delta = _random_slot(rng, dims, per, box)
        return lam_bar, lam_tilde, delta

    blocks = {
        "x": lambda d: Slot(d.x, 0 * d.y, 0 * d.z, 0 * d.k),
        "yz": lambda d: Slot(0 * d.x, d.y, d.z, 0 * d.k),
        "k": lambda d: Slot(0 * d.x, 0 * d.y, 0 * d.z, d.k),
        "joint": lambda d: Slot(d.x, d.y, d.z, d.k),
    }
    norms = {
        "x": lambda d: np.sum(d.x**2, -1),
        "yz": lambda d: np.sum(d.y**2, -1) + np.sum(d.z**2, (-2, -1)),
        "k": lambda d: np.sum(d.k**2 * w, (-2, -1)) if d.k.shape[-1] else np.zeros(d.x.shape[:-1]),
    }
    records = {}
    for name, proj in blocks.items():
        lam_bar, lam_tilde, delta = draw()
        delta = proj(delta)
        lam = Slot(lam_bar.x + delta.x, lam_bar.y + delta.y, lam_bar.z + delta.z, lam_bar.k + delta.k, lam_bar.v)
        Q = np.empty(per)
        for t, sl in sample_times(rng, T, per):
            Q[sl] = monotonicity_form(field, t, _take(lam, sl), _take(lam_bar, sl), _take(lam_tilde, sl), w)
        records[name] = (Q, delta)

    est = {}
    for name in ("x", "yz", "k"):
        Q, delta = records[name]
        nrm = norms[name](delta)
        ok = nrm > 0
        est[name] = float(np.min(-Q[ok] / nrm[ok])) if np.any(ok) else 0.0

    b1p, b2p, b3p = (max(est[k], 0.0) for k in ("x", "yz", "k"))
    violations = []
    for name in ("x", "yz", "k", "joint"):
        Q, delta = records[name]
        rhs = b1p * norms["x"](delta) + b2p * norms["yz"](delta) + b3p * norms["k"](delta)
        slack = -Q - rhs
        scale = 1.0 + np.abs(Q) + rhs
        bad = np.nonzero(slack < -tol * scale)[0]
        for i in bad[:20]:
            violations.append({"block": name, "index": int(i), "slack": float(slack[i])})

    # terminal map: <Phi(x, xt) - Phi(xb, xt), G(x - xb)> >= mu1 |x - xb|^2
    xb = rng.uniform(-box, box, (per, dims.n))
    xt = rng.uniform(-box, box, (per, dims.n))
    dx = rng.uniform(-box, box, (per, dims.n))
    Phi = field.coeffs.Phi
    lhs = np.sum((Phi(xb + dx, xt) - Phi(xb, xt)) * (dx @ G.T), -1)
    nx = np.sum(dx**2, -1)
    ok = nx > 0
    mu_hat = float(np.min(lhs[ok] / nx[ok])) if np.any(ok) else 0.0

    return {
        "beta1_hat": est["x"],
        "beta2_hat": est["yz"],
        "beta3_hat": est["k"],
        "mu1_hat": mu_hat,
        "violations": violations,
        "samples": per,
        "box": box,
    }
