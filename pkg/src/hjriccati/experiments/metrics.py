"""Error measures and posterior prediction grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from ..bases import BasisFamily, OperatorSpec, design_matrix
from ..core import RiccatiState, posterior
from ..errors import DimensionMismatch, ZeroReference

# rows of the design evaluated at once by prediction_grid
_CHUNK = 8192


def _integral_sq(values: np.ndarray, x: np.ndarray, y: np.ndarray | None) -> float:
    sq = values**2
    if y is None:
        return float(trapezoid(sq, x))
    return float(trapezoid(trapezoid(sq, x, axis=1), y))


def relative_l2_error(predicted, exact, x, y=None) -> float:
    """Relative L2 error in percent, integrals by the (tensor) trapezoid rule.

    In 2-D the fields are ``(len(y), len(x))`` arrays on the grid ``x`` by ``y``.

    Raises
    ------
    ZeroReference
        If the exact field integrates to zero.
    """
    predicted = np.asarray(predicted, dtype=float)
    exact = np.asarray(exact, dtype=float)
    x = np.asarray(x, dtype=float)
    if predicted.shape != exact.shape:
        raise DimensionMismatch(f"predicted shape {predicted.shape} != exact shape {exact.shape}")
    expected = (len(x),) if y is None else (len(y), len(x))
    if exact.shape != expected:
        raise DimensionMismatch(f"fields have shape {exact.shape}, grid implies {expected}")
    ref = _integral_sq(exact, x, y)
    if ref <= 0.0:
        raise ZeroReference("exact field has zero L2 norm")
    return 100.0 * np.sqrt(_integral_sq(predicted - exact, x, y) / ref)


def max_relative_discrepancy(a, b) -> float:
    """``max|a - b| / max|b|`` (absolute when ``b`` vanishes)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    if a.size == 0:
        return 0.0
    diff = float(np.max(np.abs(a - b)))
    scale = float(np.max(np.abs(b)))
    return diff / scale if scale > 0 else diff


def state_discrepancy(a: RiccatiState, b: RiccatiState, x=None) -> float:
    """Largest relative posterior discrepancy over the mean and the covariance."""
    ma, sa = posterior(a, x)
    mb, sb = posterior(b, x)
    return max(max_relative_discrepancy(ma, mb), max_relative_discrepancy(sa, sb))


@dataclass(frozen=True, eq=False)
class PredictionGrid:
    """Posterior predictions of ``u`` and ``f`` with 2-sigma bands."""

    points: np.ndarray
    u_mean: np.ndarray
    f_mean: np.ndarray
    u_band: np.ndarray
    f_band: np.ndarray


def _band(rows: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    var = np.einsum("ij,ij->i", rows @ sigma, rows)
    # clip rounding-level negatives of an exactly zero variance
    return 2.0 * np.sqrt(np.maximum(var, 0.0))


def prediction_grid(state: RiccatiState, basis: BasisFamily, op: OperatorSpec, points, x=None) -> PredictionGrid:
    """Means and bands of ``u = Phi w`` and ``f = F[Phi] w`` at ``points``.

    Only the diagonals of ``Phi Sigma Phi^T`` are formed, in row chunks.
    """
    if basis.n != state.n:
        raise DimensionMismatch(f"basis has {basis.n} terms, state dimension is {state.n}")
    pts = np.asarray(points, dtype=float)
    mu, sigma = posterior(state, x)
    zero = 0 if basis.dim == 1 else (0, 0)
    parts = []
    for start in range(0, len(pts), _CHUNK):
        chunk = pts[start:start + _CHUNK]
        phi = basis.derivative(chunk, zero)
        fphi = design_matrix(basis, op, chunk)
        parts.append((phi @ mu, fphi @ mu, _band(phi, sigma), _band(fphi, sigma)))
    if parts:
        cols = [np.concatenate(c) for c in zip(*parts)]
    else:
        cols = [np.zeros(0)] * 4
    return PredictionGrid(pts, *cols)
