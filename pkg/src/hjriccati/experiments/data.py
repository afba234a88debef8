"""Exact solutions and seeded synthetic measurements for the scenarios.

Random numbers come from numpy's PCG64 generator. Each kind of draw uses
its own stream derived from ``(seed, stream id)`` so that, for example,
the boundary noise of the BVP scenarios is the same whichever scenario
asks for it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..bases import BasisFamily, OperatorSpec, design_matrix
from ..core import DataBlock

# stream ids
BOUNDARY, F_STREAM, VALIDATION, LOCATIONS, SENSORS, SUBDOMAIN = range(6)


def rng_stream(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), stream, *extra])))


# ---------------------------------------------------------------------------
# Example 1: u = exp(-2 tau) sin(15 tau) with f = kappa u'''' + beta u'' + u


def bvp_u(tau):
    tau = np.asarray(tau, dtype=float)
    return np.exp(-2.0 * tau) * np.sin(15.0 * tau)


def bvp_du(tau):
    tau = np.asarray(tau, dtype=float)
    return np.exp(-2.0 * tau) * (15.0 * np.cos(15.0 * tau) - 2.0 * np.sin(15.0 * tau))


def bvp_d2u(tau):
    tau = np.asarray(tau, dtype=float)
    return np.exp(-2.0 * tau) * (-221.0 * np.sin(15.0 * tau) - 60.0 * np.cos(15.0 * tau))


def bvp_d4u(tau):
    tau = np.asarray(tau, dtype=float)
    return np.exp(-2.0 * tau) * (45241.0 * np.sin(15.0 * tau) + 26520.0 * np.cos(15.0 * tau))


def bvp_f(tau, kappa: float, beta: float):
    return kappa * bvp_d4u(tau) + beta * bvp_d2u(tau) + bvp_u(tau)


@dataclass(frozen=True, eq=False)
class BVPData:
    """Measurements of one BVP scenario (blocks plus their locations)."""

    boundary: list
    boundary_tau: np.ndarray
    f_blocks: list
    f_tau: np.ndarray
    f_clean: np.ndarray


def bvp_boundary_blocks(basis: BasisFamily, seed: int, noise: dict, T: float, clean: bool = False):
    """Noisy ``u(0), u(T), u'(0), u'(T)`` as four single-row blocks."""
    rng = rng_stream(seed, BOUNDARY)
    tau = np.array([0.0, T])
    sd_u, sd_du = float(noise["u_boundary"]), float(noise["du_boundary"])
    phi_u = basis.derivative(tau, 0)
    phi_du = basis.derivative(tau, 1)
    eps_u = rng.standard_normal(2) * sd_u
    eps_du = rng.standard_normal(2) * sd_du
    if clean:
        eps_u[:] = 0.0
        eps_du[:] = 0.0
    y_u = bvp_u(tau) + eps_u
    y_du = bvp_du(tau) + eps_du
    blocks = [DataBlock(phi_u[i], y_u[i], sd_u**2) for i in range(2)]
    blocks += [DataBlock(phi_du[i], y_du[i], sd_du**2) for i in range(2)]
    return blocks, np.concatenate([tau, tau])


def bvp_f_values(tau, op: OperatorSpec, seed: int, sd: float, clean: bool = False, stream: int = F_STREAM):
    kappa, beta = op.coeffs
    clean_vals = bvp_f(tau, kappa, beta)
    if clean:
        return clean_vals, clean_vals
    return clean_vals + sd * rng_stream(seed, stream).standard_normal(len(tau)), clean_vals


def synth_bvp_data(basis: BasisFamily, op: OperatorSpec, seed: int, noise: dict, n_f: int,
                   T: float = 1.0, clean: bool = False, offsets: dict | None = None) -> BVPData:
    """Boundary blocks plus ``n_f`` equidistant measurements of ``f`` on ``[0, T]``.

    ``offsets`` maps f-indices to additive offsets (planted outliers).
    """
    boundary, btau = bvp_boundary_blocks(basis, seed, noise, T, clean)
    tau = np.linspace(0.0, T, n_f)
    sd = float(noise["f"])
    y, f_clean = bvp_f_values(tau, op, seed, sd, clean)
    if offsets:
        y = y.copy()
        for idx, off in offsets.items():
            y[int(idx)] += off
    rows = design_matrix(basis, op, tau)
    blocks = [DataBlock(rows[i], y[i], sd**2) for i in range(n_f)]
    return BVPData(boundary, btau, blocks, tau, f_clean)


def bvp_f_stream(basis: BasisFamily, op: OperatorSpec, seed: int, sd: float, n_f: int,
                 T: float = 1.0, clean: bool = False) -> Iterator[DataBlock]:
    """The f measurements of :func:`synth_bvp_data`, produced one block at a time."""
    rng = rng_stream(seed, F_STREAM)
    kappa, beta = op.coeffs
    for tau in np.linspace(0.0, T, n_f):
        noise = rng.standard_normal()
        y = float(bvp_f(tau, kappa, beta)) + (0.0 if clean else sd * noise)
        yield DataBlock(design_matrix(basis, op, np.array([tau]))[0], y, sd**2)


def validation_set(op: OperatorSpec, seed: int, sd: float, count: int, T: float = 1.0):
    """Uniformly random locations with noisy f values, sorted by location."""
    rng = rng_stream(seed, VALIDATION)
    tau = np.sort(rng.uniform(0.0, T, count))
    kappa, beta = op.coeffs
    return tau, bvp_f(tau, kappa, beta) + sd * rng.standard_normal(count)


# ---------------------------------------------------------------------------
# Example 2: manufactured u = sin(pi x) exp(-x) with f = D u'' + kappa u'


def advdiff_u(x):
    x = np.asarray(x, dtype=float)
    return np.sin(math.pi * x) * np.exp(-x)


def advdiff_du(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-x) * (math.pi * np.cos(math.pi * x) - np.sin(math.pi * x))


def advdiff_d2u(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-x) * ((1.0 - math.pi**2) * np.sin(math.pi * x) - 2.0 * math.pi * np.cos(math.pi * x))


def advdiff_f(x, D: float, kappa: float):
    return D * advdiff_d2u(x) + kappa * advdiff_du(x)


def advdiff_stream(basis: BasisFamily, op: OperatorSpec, seed: int, sd: float,
                   count: int | None = None) -> Iterator[DataBlock]:
    """Uniformly random noisy f measurements on ``[0, 1]``, one block per point.

    Runs forever when ``count`` is None. Nothing is retained between yields.
    """
    rng = rng_stream(seed, F_STREAM)
    D, kappa = op.coeffs
    k = 0
    while count is None or k < count:
        x = rng.uniform()
        y = float(advdiff_f(x, D, kappa)) + sd * rng.standard_normal()
        yield DataBlock(design_matrix(basis, op, np.array([x]))[0], y, sd**2)
        k += 1


# ---------------------------------------------------------------------------
# Example 3: (kappa2 - Laplacian) u = sin(6x) sin(4y) - 0.8 sin(5x) sin(7y)


def helmholtz_f(x, y):
    return np.sin(6.0 * x) * np.sin(4.0 * y) - 0.8 * np.sin(5.0 * x) * np.sin(7.0 * y)


def helmholtz_u(x, y, kappa2: float = 1.0):
    c1 = kappa2 + 6.0**2 + 4.0**2
    c2 = kappa2 + 5.0**2 + 7.0**2
    return np.sin(6.0 * x) * np.sin(4.0 * y) / c1 - 0.8 * np.sin(5.0 * x) * np.sin(7.0 * y) / c2


def multilevel_order(k: int) -> list[tuple[int, int]]:
    """Cells of a ``k x k`` partition (``k`` odd) in multi-level order.

    Level 1 is the centre cell, level 2 the other cells with both indices
    odd, level 3 the cells with both indices even and level 4 the rest.
    Within a level cells are row-major.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError(f"multi-level traversal needs an odd subdomain count per axis, got {k}")
    c = k // 2
    cells = [(r, col) for r in range(k) for col in range(k)]

    def level(cell):
        r, col = cell
        if cell == (c, c):
            return 0
        if r % 2 == 1 and col % 2 == 1:
            return 1
        if r % 2 == 0 and col % 2 == 0:
            return 2
        return 3

    return sorted(cells, key=lambda cell: (level(cell), cell))


def snake_order(k: int) -> list[tuple[int, int]]:
    """Row 0 left to right, row 1 right to left, and so on."""
    out = []
    for r in range(k):
        cols = range(k) if r % 2 == 0 else range(k - 1, -1, -1)
        out += [(r, col) for col in cols]
    return out


def traversal(kind: str, k: int) -> list[tuple[int, int]]:
    if kind == "snake":
        return snake_order(k)
    if kind == "multilevel":
        return multilevel_order(k)
    raise ValueError(f"unknown traversal {kind!r}; expected 'snake' or 'multilevel'")


@dataclass(frozen=True)
class HelmholtzGrid:
    """Uniform ``size x size`` grid on ``[0, L]^2`` split into ``k x k`` cells."""

    size: int
    L: float
    k: int

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(0.0, self.L, self.size)

    @property
    def interior(self) -> np.ndarray:
        return self.axis[1:-1]

    def cell_points(self, row: int, col: int) -> np.ndarray:
        """Interior points of cell ``(row, col)``; row indexes y, col indexes x."""
        ax = self.interior
        width = self.L / self.k
        idx = np.minimum((ax // width).astype(int), self.k - 1)
        xs = ax[idx == col]
        ys = ax[idx == row]
        X, Y = np.meshgrid(xs, ys)
        return np.column_stack([X.ravel(), Y.ravel()])


def helmholtz_block(basis: BasisFamily, op: OperatorSpec, grid: HelmholtzGrid, row: int, col: int,
                    seed: int, sd: float) -> DataBlock:
    """One subdomain's noisy f measurements stacked into a single block.

    The noise of a cell depends only on ``(seed, cell)``, never on the order
    in which cells are visited.
    """
    pts = grid.cell_points(row, col)
    rng = rng_stream(seed, SUBDOMAIN, row * grid.k + col)
    y = helmholtz_f(pts[:, 0], pts[:, 1]) + sd * rng.standard_normal(len(pts))
    return DataBlock(design_matrix(basis, op, pts), y, sd**2)
