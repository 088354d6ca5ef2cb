"""Coefficient bundles for coupled forward-backward systems.

Every callback is vectorised over arbitrary leading batch axes. A point
of the solution space is a :class:`Slot` ``(x, y, z, k[, v])`` with
trailing shapes ``(n,)``, ``(m,)``, ``(m, d)``, ``(m, M)`` and ``(kc,)``.
The jump argument ``k`` is the full mark-indexed slice, so a coefficient
that integrates over marks does so explicitly with the mark weights.

Signatures (``s`` is the particle's own point, ``sp`` the independent
copy under the mean-field expectation):

* ``b(t, s, sp) -> (..., n)``
* ``sigma(t, s, sp) -> (..., n, d)``
* ``h(t, s, sp) -> (..., n, M)`` (one column per mark)
* ``f(t, s, sp) -> (..., m)``
* ``Phi(x, xp) -> (..., m)``
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import RankDeficientG, ShapeMismatch
from .grids_marks import MarkSpace


@dataclass(frozen=True)
class Dims:
    n: int
    m: int
    d: int
    M: int
    k_ctrl: int = 0

    def __post_init__(self):
        for name in ("n", "m", "d", "M", "k_ctrl"):
            if getattr(self, name) < 0:
                raise ValueError(f"dimension {name} must be nonnegative")

    @property
    def flat_size(self) -> int:
        return self.n + self.m + self.m * self.d + self.m * self.M


class Slot(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    k: np.ndarray
    v: Optional[np.ndarray] = None

    def map(self, fn) -> "Slot":
        return Slot(fn(self.x), fn(self.y), fn(self.z), fn(self.k), None if self.v is None else fn(self.v))

    def batch_shape(self) -> tuple:
        return self.x.shape[:-1]


def zeros_slot(dims: Dims, batch=()) -> Slot:
    b = tuple(batch)
    return Slot(
        np.zeros(b + (dims.n,)),
        np.zeros(b + (dims.m,)),
        np.zeros(b + (dims.m, dims.d)),
        np.zeros(b + (dims.m, dims.M)),
        np.zeros(b + (dims.k_ctrl,)) if dims.k_ctrl else None,
    )


def flatten_slot(s: Slot) -> np.ndarray:
    """Concatenate ``(x, y, z, k)`` into one trailing axis."""
    batch = np.broadcast_shapes(s.x.shape[:-1], s.y.shape[:-1], s.z.shape[:-2], s.k.shape[:-2])
    parts = [
        np.broadcast_to(s.x, batch + s.x.shape[-1:]),
        np.broadcast_to(s.y, batch + s.y.shape[-1:]),
        np.broadcast_to(s.z, batch + s.z.shape[-2:]).reshape(batch + (-1,)),
        np.broadcast_to(s.k, batch + s.k.shape[-2:]).reshape(batch + (-1,)),
    ]
    return np.concatenate(parts, axis=-1)


def unflatten_slot(vec: np.ndarray, dims: Dims) -> Slot:
    n, m, d, M = dims.n, dims.m, dims.d, dims.M
    batch = vec.shape[:-1]
    x = vec[..., :n]
    y = vec[..., n : n + m]
    z = vec[..., n + m : n + m + m * d].reshape(batch + (m, d))
    k = vec[..., n + m + m * d :].reshape(batch + (m, M))
    return Slot(x, y, z, k)


def weighted_sq_norm(s: Slot, weights: np.ndarray) -> np.ndarray:
    """``|x|^2 + |y|^2 + |z|^2 + sum_j lam_j |k_j|^2`` over trailing axes."""
    out = np.sum(s.x**2, axis=-1) + np.sum(s.y**2, axis=-1) + np.sum(s.z**2, axis=(-2, -1))
    if s.k.shape[-1]:
        out = out + np.sum(s.k**2 * weights, axis=(-2, -1))
    return out


@dataclass(frozen=True)
class Lipschitz:
    """Declared Lipschitz metadata.

    ``L_A`` and ``L_Phi`` are the constants with respect to the primed
    (independent-copy) arguments. ``L_f`` and ``L_g`` feed the weakened
    certificate for problems whose diffusion ignores ``z`` and ``k``.
    """

    L_A: float = 0.0
    L_Phi: float = 0.0
    L_f: float = 0.0
    L_g: float = 0.0


@dataclass(frozen=True)
class CoefficientSet:
    dims: Dims
    marks: MarkSpace
    b: Callable
    sigma: Callable
    h: Callable
    f: Callable
    Phi: Callable
    lipschitz: Lipschitz = field(default_factory=Lipschitz)
    affine_in_primed: bool = False
    forward_decoupled: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def with_name(self, name: str) -> "CoefficientSet":
        return replace(self, name=name)


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __init__(self, lo, hi):
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("control box needs lo <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def corners(self) -> np.ndarray:
        grids = np.meshgrid(*[[a, b] for a, b in zip(self.lo, self.hi)], indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=-1)

    def project(self, v: np.ndarray) -> np.ndarray:
        return np.clip(v, self.lo, self.hi)

    def contains(self, v: np.ndarray, tol: float = 0.0) -> bool:
        return bool(np.all(v >= self.lo - tol) and np.all(v <= self.hi + tol))


@dataclass(frozen=True)
class ControlProblem:
    """Controlled system plus cost data.

    The state callbacks in ``coeffs`` read the control from ``s.v``.
    ``g(t, s, sp) -> (...)`` is the running cost, ``phi(x, xp) -> (...)``
    the terminal cost and ``gamma(y) -> (...)`` the initial cost on
    ``y(0)``. The cost to minimise is
    ``E[sum g dt + E'[phi(x_T, x_T')] + gamma(y_0)]``.
    """

    coeffs: CoefficientSet
    g: Callable
    phi: Callable
    gamma: Callable
    U: Box
    x0: np.ndarray
    name: str = "control"
    params: dict = field(default_factory=dict, compare=False)

    @property
    def dims(self) -> Dims:
        return self.coeffs.dims


@dataclass(frozen=True)
class AssembledField:
    """``A(t, s, sp) = (-G^T f, G b, G sigma, G h)`` returned as a :class:`Slot`."""

    coeffs: CoefficientSet
    G: np.ndarray

    def __call__(self, t, s: Slot, sp: Slot) -> Slot:
        c = self.coeffs
        G = self.G
        ax = -np.einsum("ij,...i->...j", G, c.f(t, s, sp))
        ay = np.einsum("ij,...j->...i", G, c.b(t, s, sp))
        az = np.einsum("ij,...jk->...ik", G, c.sigma(t, s, sp))
        ak = np.einsum("ij,...jk->...ik", G, c.h(t, s, sp))
        return Slot(ax, ay, az, ak)

    def flat(self, t, s: Slot, sp: Slot) -> np.ndarray:
        return flatten_slot(self(t, s, sp))


def assemble_A(coeffs: CoefficientSet, G) -> AssembledField:
    G = np.atleast_2d(np.asarray(G, dtype=float))
    dims = coeffs.dims
    if G.shape != (dims.m, dims.n):
        raise ShapeMismatch(f"G must be {dims.m}x{dims.n}, got {G.shape}")
    if not np.all(np.isfinite(G)) or np.linalg.matrix_rank(G) < min(G.shape):
        raise RankDeficientG("G must have full rank")
    return AssembledField(coeffs, G)


def _random_slot(rng, dims: Dims, count: int, box: float) -> Slot:
    return Slot(
        rng.uniform(-box, box, (count, dims.n)),
        rng.uniform(-box, box, (count, dims.m)),
        rng.uniform(-box, box, (count, dims.m, dims.d)),
        rng.uniform(-box, box, (count, dims.m, dims.M)),
        rng.uniform(-box, box, (count, dims.k_ctrl)) if dims.k_ctrl else None,
    )


def _block_direction(rng, dims: Dims, count: int) -> Slot:
    """Random directions; half of them confined to one randomly chosen block."""
    d = _random_slot(rng, dims, count, 1.0)
    d = Slot(d.x, d.y, d.z, d.k, None)
    which = rng.integers(0, 5, count)  # 4 = unrestricted
    masks = [(which == j) | (which == 4) for j in range(4)]
    return Slot(
        d.x * masks[0][:, None],
        d.y * masks[1][:, None],
        d.z * masks[2][:, None, None],
        d.k * masks[3][:, None, None],
    )


def default_G(dims: Dims) -> np.ndarray:
    return np.eye(dims.m, dims.n)


def sample_times(rng, T: float, samples: int, groups: int = 16):
    """Split ``samples`` into groups sharing one uniform time draw.

    Callbacks always receive a scalar ``t``; grouping keeps that contract
    while still sampling ``t`` uniformly on ``[0, T]``.
    """
    groups = max(1, min(groups, samples))
    bounds = np.linspace(0, samples, groups + 1).astype(int)
    times = rng.uniform(0.0, T, groups)
    return [(float(times[g]), slice(bounds[g], bounds[g + 1])) for g in range(groups)]


def _take(s: Slot, sl) -> Slot:
    return Slot(s.x[sl], s.y[sl], s.z[sl], s.k[sl], None if s.v is None else s.v[sl])


def probe_lipschitz(coeffs: CoefficientSet, marks: MarkSpace, samples: int, seed: int,
                    G=None, box: float = 10.0, T: float = 1.0) -> dict:
    """Empirical Lipschitz constants of ``A`` and ``Phi`` in the primed slot.

    Points are drawn uniformly in ``[-box, box]`` per coordinate with ``t``
    uniform on ``[0, T]``; the result is a lower bound on the true
    constants.
    """
    if samples < 2:
        raise ValueError("probe_lipschitz needs at least 2 samples")
    dims = coeffs.dims
    A = assemble_A(coeffs, default_G(dims) if G is None else G)
    rng = np.random.default_rng(seed)
    w = marks.weights
    s = _random_slot(rng, dims, samples, box)
    sp1 = _random_slot(rng, dims, samples, box)
    step = _block_direction(rng, dims, samples)
    scale = rng.uniform(1e-3, box, samples)
    sp2 = Slot(
        sp1.x + step.x * scale[:, None],
        sp1.y + step.y * scale[:, None],
        sp1.z + step.z * scale[:, None, None],
        sp1.k + step.k * scale[:, None, None],
        sp1.v,
    )
    ratios = []
    for t, sl in sample_times(rng, T, samples):
        dA = _diff_slot(A(t, _take(s, sl), _take(sp1, sl)), A(t, _take(s, sl), _take(sp2, sl)))
        num = np.sqrt(weighted_sq_norm(dA, w))
        den = np.sqrt(weighted_sq_norm(_diff_slot(_take(sp1, sl), _take(sp2, sl)), w))
        ok = den > 0
        ratios.append(num[ok] / den[ok])
    r = np.concatenate(ratios)
    L_A = float(np.max(r)) if r.size else 0.0

    dxp = sp2.x - sp1.x
    dphi = coeffs.Phi(s.x, sp2.x) - coeffs.Phi(s.x, sp1.x)
    nd = np.linalg.norm(dxp, axis=-1)
    ok = nd > 0
    L_Phi = float(np.max(np.linalg.norm(dphi, axis=-1)[ok] / nd[ok])) if np.any(ok) else 0.0
    return {"L_A_hat": L_A, "L_Phi_hat": L_Phi}


def _diff_slot(a: Slot, b: Slot) -> Slot:
    return Slot(a.x - b.x, a.y - b.y, a.z - b.z, a.k - b.k)


# ---------------------------------------------------------------------------
# Built-in constructors
# ---------------------------------------------------------------------------


def _as_matrix(W, rows: int, cols: int, name: str) -> np.ndarray:
    if W is None:
        return np.zeros((rows, cols))
    W = np.asarray(W, dtype=float)
    if W.ndim == 1 and rows == 1:
        W = W[None, :]
    if W.shape != (rows, cols):
        raise ShapeMismatch(f"{name} must have shape {(rows, cols)}, got {W.shape}")
    return W


def _as_const(c, size: int, name: str) -> np.ndarray:
    if c is None:
        return np.zeros(size)
    c = np.atleast_1d(np.asarray(c, dtype=float)).reshape(-1)
    if c.shape != (size,):
        raise ShapeMismatch(f"{name} must have {size} entries")
    return c


def linear_mf(dims: Dims, marks: MarkSpace, *, b=(None, None, None), sigma=(None, None, None),
              h=(None, None, None), f=(None, None, None), Phi=(None, None, None),
              lipschitz: Optional[Lipschitz] = None, name: str = "linear_mf") -> CoefficientSet:
    """Coefficients affine in the own point and in the independent copy.

    Each of ``b, sigma, h, f`` is a triple ``(W_own, W_primed, const)``
    acting on the flattened point ``(x, y, z, k)`` of length
    ``n + m + m*d + m*M``; outputs are flattened row-major (``sigma`` to
    ``n*d``, ``h`` to ``n*M``). ``Phi`` is ``(W_x, W_xprimed, const)``.
    """
    D = dims.flat_size
    n, m, d, M = dims.n, dims.m, dims.d, dims.M
    mats = {}
    for key, layout, rows in (("b", b, n), ("sigma", sigma, n * d), ("h", h, n * M), ("f", f, m)):
        Wo, Wp, c = layout
        mats[key] = (_as_matrix(Wo, rows, D, key + "_own"), _as_matrix(Wp, rows, D, key + "_primed"),
                     _as_const(c, rows, key + "_const"))
    Px, Pp, Pc = Phi
    Px = _as_matrix(Px, m, n, "Phi_x")
    Pp = _as_matrix(Pp, m, n, "Phi_xprimed")
    Pc = _as_const(Pc, m, "Phi_const")

    def make(key, shape):
        Wo, Wp, c = mats[key]

        def fn(t, s, sp):
            out = flatten_slot(s) @ Wo.T + flatten_slot(sp) @ Wp.T + c
            return out.reshape(out.shape[:-1] + shape)

        return fn

    def Phi_fn(x, xp):
        return x @ Px.T + xp @ Pp.T + Pc

    own_yzk = slice(n, D)
    decoupled = all(
        not np.any(mats[key][0][:, own_yzk]) and not np.any(mats[key][1][:, own_yzk])
        for key in ("b", "sigma", "h")
    )
    if lipschitz is None:
        lipschitz = Lipschitz(L_A=_primed_norm(mats, dims, marks), L_Phi=float(np.linalg.norm(Pp, 2)) if Pp.size else 0.0)
    return CoefficientSet(
        dims=dims, marks=marks,
        b=make("b", (n,)), sigma=make("sigma", (n, d)), h=make("h", (n, M)), f=make("f", (m,)), Phi=Phi_fn,
        lipschitz=lipschitz, affine_in_primed=True, forward_decoupled=decoupled, name=name,
        params={"matrices": mats, "Phi": (Px, Pp, Pc)},
    )


def _primed_norm(mats, dims: Dims, marks: MarkSpace, G=None) -> float:
    """Operator norm of the primed part of ``A`` in the weighted norm."""
    n, m, d, M = dims.n, dims.m, dims.d, dims.M
    G = default_G(dims) if G is None else G
    D = dims.flat_size
    Wb, Wsig, Wh, Wf = (mats[k][1] for k in ("b", "sigma", "h", "f"))
    rows = []
    rows.append(-(G.T @ Wf))
    rows.append(G @ Wb)
    rows.append(np.einsum("ij,jkD->ikD", G, Wsig.reshape(n, d, D)).reshape(m * d, D))
    rows.append(np.einsum("ij,jkD->ikD", G, Wh.reshape(n, M, D)).reshape(m * M, D))
    A = np.concatenate(rows, axis=0)
    wdiag = np.concatenate([np.ones(n + m + m * d), np.repeat(marks.weights[None, :], m, axis=0).reshape(-1)])
    sq = np.sqrt(wdiag)
    A_w = sq[:, None] * A / sq[None, :]
    return float(np.linalg.norm(A_w, 2)) if A_w.size else 0.0


def example_3_1(marks: MarkSpace, terminal_coefficient: float = 2.0) -> CoefficientSet:
    """Monotone scalar example with coupling ``-y' - 2y`` in every forward slot.

    ``terminal_coefficient`` replaces the factor 2 in the terminal map
    ``x' + 2x`` (used by the continuity sweep).
    """
    M = marks.M
    dims = Dims(n=1, m=1, d=1, M=M)
    D = dims.flat_size  # x, y, z, k_1..k_M
    C0 = marks.C0
    K0 = 3  # slot layout: x, y, z, k_1..k_M

    def row(**entries):
        r = np.zeros(D)
        for idx, val in entries.items():
            r[int(idx[1:])] = val
        return r

    b = (row(i1=-2 * C0)[None], row(i1=-C0)[None], None)
    sig = (row(i2=-2 * C0)[None], row(i2=-C0)[None], None)
    h_own = np.zeros((M, D))
    h_pr = np.zeros((M, D))
    for j in range(M):
        h_own[j, K0 + j] = -2.0
        h_pr[j, K0 + j] = -1.0
    f = (row(i0=2 * C0)[None], row(i0=C0)[None], None)
    Phi = (np.array([[terminal_coefficient]]), np.array([[1.0]]), None)
    cs = linear_mf(dims, marks, b=b, sigma=sig, h=(h_own, h_pr, None), f=f, Phi=Phi,
                   lipschitz=Lipschitz(L_A=1.0, L_Phi=1.0), name="example_3_1")
    return replace(cs, params={**cs.params, "x0": np.array([1.0]), "G": np.array([[1.0]]), "beta1": 2.0,
                               "terminal_coefficient": terminal_coefficient})


def example_3_2(marks: MarkSpace) -> CoefficientSet:
    """Non-monotone scalar example: drift ``E[y]``, unit diffusion, jump ``k``."""
    M = marks.M
    dims = Dims(n=1, m=1, d=1, M=M)
    D = dims.flat_size
    b_pr = np.zeros((1, D))
    b_pr[0, 1] = 1.0
    h_own = np.zeros((M, D))
    for j in range(M):
        h_own[j, 3 + j] = 1.0
    f_pr = np.zeros((1, D))
    f_pr[0, 0] = 1.0
    cs = linear_mf(dims, marks, b=(None, b_pr, None), sigma=(None, None, [1.0]), h=(h_own, None, None),
                   f=(None, f_pr, None), Phi=(None, np.array([[-1.0]]), None),
                   lipschitz=Lipschitz(L_A=1.0, L_Phi=1.0), name="example_3_2")
    return replace(cs, params={**cs.params, "x0": np.array([1.0]), "G": np.array([[1.0]]), "beta1": 1.0})
