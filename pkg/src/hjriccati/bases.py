"""Trigonometric basis families and linear differential operators on them.

Three families are provided:

* ``exp_kernel_kl``: Karhunen-Loeve modes of ``exp(-|x1 - x2| / ell)`` on
  ``[-a, a]``, scaled by the square root of their eigenvalues;
* ``brownian_bridge``: ``sqrt(2) sin(k pi x) / (k pi)`` on ``[0, 1]``;
* ``sine2d``: tensor products ``sqrt(2L) sin(j pi x/L)/(j pi) * sqrt(2L) sin(k pi y/L)/(k pi)``
  on ``[0, L]^2``, enumerated row-major in ``(j, k)``.

Every mode is ``A sin(omega x + phase)``-shaped, so all derivatives are exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NotPerfectSquare, OutOfDomain, RootBracketFailure

EXP_KERNEL_KL = "exp_kernel_kl"
BROWNIAN_BRIDGE = "brownian_bridge"
SINE2D = "sine2d"

_DOMAIN_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class BasisFamily:
    kind: str
    n: int
    params: dict = field(default_factory=dict)
    # per-mode data of the 1-D families (for sine2d: per-axis data of length side)
    omega: np.ndarray | None = None
    amplitude: np.ndarray | None = None
    cosine: np.ndarray | None = None
    alpha: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return 2 if self.kind == SINE2D else 1

    @property
    def domain(self) -> tuple[float, float]:
        if self.kind == EXP_KERNEL_KL:
            a = self.params["a"]
            return (-a, a)
        if self.kind == BROWNIAN_BRIDGE:
            return (0.0, 1.0)
        return (0.0, self.params["L"])

    @property
    def side(self) -> int:
        return int(self.params["side"])

    def _check_points(self, pts: np.ndarray) -> None:
        lo, hi = self.domain
        tol = _DOMAIN_TOL * max(1.0, abs(lo), abs(hi))
        if pts.size and (pts.min() < lo - tol or pts.max() > hi + tol):
            raise OutOfDomain(f"points outside the basis domain [{lo}, {hi}]")

    def derivative(self, points, order) -> np.ndarray:
        """Matrix of mode derivatives at ``points``: ``(m, n)``.

        ``order`` is an int for 1-D families and a pair ``(a, b)`` (orders in
        ``x`` and ``y``) for ``sine2d``.
        """
        if self.dim == 1:
            x = np.atleast_1d(np.asarray(points, dtype=float))
            if x.ndim != 1:
                raise DimensionMismatch(f"1-D basis expects a vector of points, got shape {x.shape}")
            self._check_points(x)
            return _trig_derivative(x, self.omega, self.amplitude, self.cosine, int(order))
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(1, -1)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise DimensionMismatch(f"2-D basis expects (m, 2) points, got shape {pts.shape}")
        self._check_points(pts)
        ox, oy = order
        gx = _trig_derivative(pts[:, 0], self.omega, self.amplitude, self.cosine, int(ox))
        gy = _trig_derivative(pts[:, 1], self.omega, self.amplitude, self.cosine, int(oy))
        # row-major (j, k): column index (j-1)*side + (k-1)
        return (gx[:, :, None] * gy[:, None, :]).reshape(pts.shape[0], -1)

    def evaluate(self, points) -> np.ndarray:
        return self.derivative(points, (0, 0) if self.dim == 2 else 0)

    def eigenfunctions(self, points) -> np.ndarray:
        """Unit-norm KL eigenfunctions (before the ``sqrt(alpha)`` scaling)."""
        if self.kind != EXP_KERNEL_KL:
            raise TypeError("eigenfunctions are only defined for the KL family")
        return self.evaluate(points) / np.sqrt(self.alpha)

    def describe(self) -> dict:
        rec = {"kind": self.kind, "n": self.n, "params": dict(self.params)}
        if self.kind == EXP_KERNEL_KL:
            rec["omega"] = [float(v) for v in self.omega]
            rec["eigenvalue"] = [float(v) for v in self.alpha]
            rec["parity"] = ["even" if c else "odd" for c in self.cosine]
        return rec

    def describe_text(self) -> str:
        return json.dumps(self.describe(), indent=2, sort_keys=True)


def _trig_derivative(x, omega, amplitude, cosine, order: int) -> np.ndarray:
    # d^k/dx^k of cos cycles cos, -sin, -cos, sin; of sin cycles sin, cos, -sin, -cos
    if order < 0:
        raise ValueError("derivative order must be non-negative")
    arg = np.outer(x, omega)
    s, c = np.sin(arg), np.cos(arg)
    shift = order % 4
    cos_cycle = (c, -s, -c, s)
    sin_cycle = (s, c, -s, -c)
    vals = np.where(cosine[None, :], cos_cycle[shift], sin_cycle[shift])
    return vals * (amplitude * omega**order)[None, :]


# ---------------------------------------------------------------------------
# constructors


def _bisect(f, lo: float, hi: float, what: str) -> float:
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise RootBracketFailure(f"no sign change for {what} on [{lo}, {hi}]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        fm = f(mid)
        if fm == 0.0:
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def kl_residual(omega: float, c: float, a: float, even: bool) -> float:
    """Normalized residual of the KL frequency equation.

    Even modes solve ``c - omega tan(omega a) = 0``, odd modes
    ``omega + c tan(omega a) = 0``; both are multiplied through by
    ``cos(omega a) / sqrt(c^2 + omega^2)`` to remove the tangent poles.
    """
    scale = math.hypot(c, omega)
    if even:
        return (c * math.cos(omega * a) - omega * math.sin(omega * a)) / scale
    return (omega * math.cos(omega * a) + c * math.sin(omega * a)) / scale


def build_exp_kernel_kl(n: int, ell: float, a: float) -> BasisFamily:
    """Leading ``n`` KL modes of ``exp(-|x1 - x2| / ell)`` on ``[-a, a]``.

    Even modes ``cos(omega x)`` and odd modes ``sin(omega x)`` both have
    eigenvalue ``2c / (omega^2 + c^2)`` with ``c = 1/ell``, so sorting by
    frequency sorts by descending eigenvalue. Even roots lie in
    ``(k pi/a, (k + 1/2) pi/a)`` and odd roots in ``((k - 1/2) pi/a, k pi/a)``;
    each is bracketed away from the tangent poles and bisected.
    """
    if n < 1 or not ell > 0 or not a > 0:
        raise ValueError("need n >= 1, ell > 0, a > 0")
    c = 1.0 / ell
    roots: list[tuple[float, bool]] = []
    k = 0
    while len(roots) < n:
        lo, hi = k * math.pi / a, (k + 0.5) * math.pi / a
        w = _bisect(lambda w: kl_residual(w, c, a, True), max(lo, 1e-300), hi, f"even root {k}")
        roots.append((w, True))
        if len(roots) == n:
            break
        lo, hi = (k + 0.5) * math.pi / a, (k + 1) * math.pi / a
        w = _bisect(lambda w: kl_residual(w, c, a, False), lo, hi, f"odd root {k + 1}")
        roots.append((w, False))
        k += 1
    for w, even in roots:
        if abs(kl_residual(w, c, a, even)) >= 1e-12:
            raise RootBracketFailure(f"root {w} has residual {kl_residual(w, c, a, even):.3g}")
    omega = np.array([w for w, _ in roots])
    cosine = np.array([even for _, even in roots])
    alpha = 2.0 * c / (omega**2 + c**2)
    half = np.sin(2.0 * omega * a) / (2.0 * omega)
    norm_sq = np.where(cosine, a + half, a - half)
    amplitude = np.sqrt(alpha / norm_sq)
    return BasisFamily(EXP_KERNEL_KL, n, {"ell": float(ell), "a": float(a)}, omega, amplitude, cosine, alpha)


def build_brownian_bridge(n: int) -> BasisFamily:
    """``sqrt(2) sin(k pi x) / (k pi)``, k = 1..n, on ``[0, 1]``."""
    if n < 1:
        raise ValueError("need n >= 1")
    k = np.arange(1, n + 1, dtype=float)
    omega = k * math.pi
    return BasisFamily(BROWNIAN_BRIDGE, n, {}, omega, math.sqrt(2.0) / omega, np.zeros(n, dtype=bool))


def build_sine2d(n: int, L: float) -> BasisFamily:
    """Tensor sine family with ``sqrt(n)`` modes per axis on ``[0, L]^2``."""
    side = math.isqrt(n)
    if n < 1 or side * side != n:
        raise NotPerfectSquare(f"sine2d needs a perfect-square term count, got {n}")
    if not L > 0:
        raise ValueError("need L > 0")
    j = np.arange(1, side + 1, dtype=float)
    omega = j * math.pi / L
    amplitude = math.sqrt(2.0 * L) / (j * math.pi)
    return BasisFamily(SINE2D, n, {"side": side, "L": float(L)}, omega, amplitude, np.zeros(side, dtype=bool))


def build_basis(spec: dict) -> BasisFamily:
    """Construct a family from a config mapping with a ``kind`` key."""
    kind = spec["kind"]
    if kind == EXP_KERNEL_KL:
        return build_exp_kernel_kl(int(spec["n"]), float(spec["ell"]), float(spec["a"]))
    if kind == BROWNIAN_BRIDGE:
        return build_brownian_bridge(int(spec["n"]))
    if kind == SINE2D:
        return build_sine2d(int(spec["n"]), float(spec["L"]))
    raise ValueError(f"unknown basis kind {kind!r}")


# ---------------------------------------------------------------------------
# operators

IDENTITY = "identity"
DERIVATIVE1 = "derivative1"
BVP4 = "bvp4"
ADV_DIFF = "adv_diff"
HELMHOLTZ = "helmholtz"


@dataclass(frozen=True)
class OperatorSpec:
    """A linear differential operator with constant coefficients.

    In 1-D: ``bvp4 = kappa d4 + beta d2 + 1``, ``adv_diff = D d2 + kappa d1``,
    ``helmholtz = kappa2 - d2``, ``derivative1 = d1``. In 2-D the second
    derivative becomes the Laplacian, the fourth the bi-Laplacian and the first
    derivative ``d/dx``.
    """

    kind: str
    coeffs: tuple = ()

    def __post_init__(self):
        expected = {IDENTITY: 0, DERIVATIVE1: 0, BVP4: 2, ADV_DIFF: 2, HELMHOLTZ: 1}
        if self.kind not in expected:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if len(self.coeffs) != expected[self.kind]:
            raise ValueError(f"{self.kind} takes {expected[self.kind]} coefficients, got {len(self.coeffs)}")
        if not all(math.isfinite(c) for c in self.coeffs):
            raise ValueError("operator coefficients must be finite")
        if self.kind in (BVP4, ADV_DIFF) and self.coeffs[0] == 0:
            raise ValueError(f"{self.kind} leading coefficient must be nonzero")

    @classmethod
    def identity(cls):
        return cls(IDENTITY)

    @classmethod
    def derivative1(cls):
        return cls(DERIVATIVE1)

    @classmethod
    def bvp4(cls, kappa: float, beta: float):
        return cls(BVP4, (float(kappa), float(beta)))

    @classmethod
    def adv_diff(cls, D: float, kappa: float):
        return cls(ADV_DIFF, (float(D), float(kappa)))

    @classmethod
    def helmholtz(cls, kappa2: float):
        return cls(HELMHOLTZ, (float(kappa2),))

    @classmethod
    def from_config(cls, spec: dict):
        kind = spec["kind"]
        if kind == BVP4:
            return cls.bvp4(spec["kappa"], spec["beta"])
        if kind == ADV_DIFF:
            return cls.adv_diff(spec["D"], spec["kappa"])
        if kind == HELMHOLTZ:
            return cls.helmholtz(spec["kappa2"])
        return cls(kind)

    def to_config(self) -> dict:
        names = {BVP4: ("kappa", "beta"), ADV_DIFF: ("D", "kappa"), HELMHOLTZ: ("kappa2",)}
        return {"kind": self.kind, **dict(zip(names.get(self.kind, ()), self.coeffs))}

    def terms(self, dim: int) -> list[tuple[float, object]]:
        """The operator as ``[(coefficient, derivative order), ...]``."""
        if dim == 1:
            d0, d1, d2 = [(1.0, 0)], [(1.0, 1)], [(1.0, 2)]
            d4 = [(1.0, 4)]
        else:
            d0, d1 = [(1.0, (0, 0))], [(1.0, (1, 0))]
            d2 = [(1.0, (2, 0)), (1.0, (0, 2))]
            d4 = [(1.0, (4, 0)), (2.0, (2, 2)), (1.0, (0, 4))]

        def scaled(s, terms):
            return [(s * c, o) for c, o in terms]

        if self.kind == IDENTITY:
            return d0
        if self.kind == DERIVATIVE1:
            return d1
        if self.kind == BVP4:
            kappa, beta = self.coeffs
            return scaled(kappa, d4) + scaled(beta, d2) + d0
        if self.kind == ADV_DIFF:
            D, kappa = self.coeffs
            return scaled(D, d2) + scaled(kappa, d1)
        (kappa2,) = self.coeffs
        return scaled(kappa2, d0) + scaled(-1.0, d2)


def design_matrix(basis: BasisFamily, op: OperatorSpec, points) -> np.ndarray:
    """Rows ``(F[phi_1](p), ..., F[phi_n](p))`` for every point ``p``."""
    out = None
    for coef, order in op.terms(basis.dim):
        term = coef * basis.derivative(points, order)
        out = term if out is None else out + term
    return out


def design_row(basis: BasisFamily, op: OperatorSpec, point) -> np.ndarray:
    """Single design row at one point (a scalar in 1-D, a pair in 2-D)."""
    if basis.dim == 1:
        pt = np.asarray(point, dtype=float).reshape(-1)
        if pt.shape[0] != 1:
            raise DimensionMismatch("1-D basis takes a scalar point")
    else:
        pt = np.asarray(point, dtype=float).reshape(1, -1)
        if pt.shape[1] != 2:
            raise DimensionMismatch("2-D basis takes an (x, y) point")
    return design_matrix(basis, op, pt)[0]
