"""The seven experiment scenarios as plain functions returning result records.

Runners only compute; :mod:`hjriccati.experiments.runner` writes files.
Every runner finishes by recomputing its final state in closed form and
reporting the discrepancy (the oracle gate).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from ..bases import BasisFamily, OperatorSpec, build_basis, design_matrix
from ..core import (
    DataBlock,
    GaussianPrior,
    RiccatiState,
    closed_form_state,
    init_state,
)
from ..errors import ConfigError
from ..prior import scale_prior_covariance
from . import data as D
from .config import ExperimentConfig
from .metrics import PredictionGrid, _band, prediction_grid, relative_l2_error, state_discrepancy

log = logging.getLogger(__name__)

# points of the coarse grid on which the mean u-band is traced after each block
_TRACE_POINTS = 101


@dataclass(frozen=True, eq=False)
class GridReport:
    """Predictions on the evaluation grid after ``n_data`` blocks."""

    label: str
    n_data: int
    grid: PredictionGrid
    u_exact: np.ndarray
    f_exact: np.ndarray
    u_error: float
    f_error: float

    @property
    def u_band_mean(self) -> float:
        return float(np.mean(self.grid.u_band))

    @property
    def f_band_mean(self) -> float:
        return float(np.mean(self.grid.f_band))


def _setup(config: ExperimentConfig) -> tuple[BasisFamily, OperatorSpec, GaussianPrior]:
    try:
        basis = build_basis(config.basis)
        op = OperatorSpec.from_config(config.operator)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad basis or operator spec: {exc}") from exc
    prior = GaussianPrior(config.prior_scale * np.eye(basis.n), epsilon=config.epsilon)
    return basis, op, prior


def _report_1d(label, n_data, state, basis, op, x, u_exact, f_exact) -> GridReport:
    grid = prediction_grid(state, basis, op, x)
    return GridReport(label, n_data, grid, u_exact, f_exact,
                      relative_l2_error(grid.u_mean, u_exact, x),
                      relative_l2_error(grid.f_mean, f_exact, x))


class _BandTrace:
    """Mean u-band on a coarse grid, recorded as blocks are incorporated."""

    def __init__(self, basis: BasisFamily, points):
        zero = 0 if basis.dim == 1 else (0, 0)
        self.phi = basis.derivative(points, zero)
        self.values: list[tuple[int, float]] = []

    def record(self, n_data: int, state: RiccatiState) -> None:
        self.values.append((n_data, float(np.mean(_band(self.phi, state.epsilon * state.P)))))

    def is_nonincreasing(self, rtol: float = 1e-9) -> bool:
        v = [b for _, b in self.values]
        return all(b <= a + rtol * max(abs(a), 1.0) for a, b in zip(v, v[1:]))


# ---------------------------------------------------------------------------
# 1A


@dataclass(frozen=True, eq=False)
class ContinualResult:
    checkpoints: list
    final_state: RiccatiState
    oracle_discrepancy: float
    n_blocks: int
    band_trace: list


def _bvp_common(config: ExperimentConfig):
    basis, op, prior = _setup(config)
    if op.kind != "bvp4":
        raise ConfigError("the BVP scenarios need a bvp4 operator")
    T = float(config.get("T", 1.0))
    x = np.linspace(0.0, T, int(config.get("eval_points", 1001)))
    kappa, beta = op.coeffs
    return basis, op, prior, T, x, D.bvp_u(x), D.bvp_f(x, kappa, beta)


def run_continual_learning(config: ExperimentConfig) -> ContinualResult:
    """Boundary blocks first, then the f stream one block at a time.

    The learner only ever holds the current block; the oracle regenerates
    the stream from the seed after the run.
    """
    basis, op, prior, T, x, u_ex, f_ex = _bvp_common(config)
    clean = bool(config.get("noiseless", False))
    n_f = int(config.get("n_f", 201))
    checkpoints = [int(c) for c in config.get("checkpoints", [n_f])]
    if checkpoints[-1] > n_f:
        raise ConfigError(f"checkpoint {checkpoints[-1]} exceeds the stream length {n_f}")
    policy = config.step
    trace = _BandTrace(basis, np.linspace(0.0, T, _TRACE_POINTS))

    state = init_state(prior)
    trace.record(0, state)
    boundary, _ = D.bvp_boundary_blocks(basis, config.seed, config.noise, T, clean)
    for blk in boundary:
        state = policy.incorporate(state, blk)
        trace.record(len(trace.values), state)

    reports = []
    sd = float(config.noise["f"])
    for k, blk in enumerate(D.bvp_f_stream(basis, op, config.seed, sd, n_f, T, clean), start=1):
        state = policy.incorporate(state, blk)
        trace.record(len(boundary) + k, state)
        if k in checkpoints:
            rep = _report_1d(f"after_{k}", k, state, basis, op, x, u_ex, f_ex)
            log.info("1a checkpoint %d: u error %.3f%%, f error %.3f%%", k, rep.u_error, rep.f_error)
            reports.append(rep)

    all_blocks = list(boundary) + list(D.bvp_f_stream(basis, op, config.seed, sd, n_f, T, clean))
    oracle = closed_form_state(prior, all_blocks)
    return ContinualResult(reports, state, state_discrepancy(state, oracle), len(all_blocks), trace.values)


# ---------------------------------------------------------------------------
# 1B


@dataclass(frozen=True, eq=False)
class TuningResult:
    """The sigma flow.

    ``rows`` are ``(branch, segment, step, sigma, validation_error, u(slices)...)``
    with ``branch`` -1 for the downward sweep and +1 for the upward one.
    ``nodes`` maps each segment's end sigma to its oracle discrepancy.
    """

    rows: list
    slices: np.ndarray
    nodes: dict
    baseline: RiccatiState
    node_states: dict
    segment_h: list
    validation_tau: np.ndarray
    validation_y: np.ndarray
    final_state: RiccatiState
    oracle_discrepancy: float


def run_hyperparameter_tuning(config: ExperimentConfig) -> TuningResult:
    """Sweep the prior standard deviation with the one-phase scaling flow."""
    basis, op, prior, T, _, _, _ = _bvp_common(config)
    sd = float(config.noise["f"])
    bvp = D.synth_bvp_data(basis, op, config.seed, config.noise, int(config.get("n_f", 41)), T)
    blocks = list(bvp.boundary) + list(bvp.f_blocks)
    val_tau, val_y = D.validation_set(op, config.seed, sd, int(config.get("n_validation", 10)), T)
    F_val = design_matrix(basis, op, val_tau)
    slices = np.asarray(config.get("u_slices", [0.25, 0.5, 0.75]), dtype=float)
    phi_sl = basis.derivative(slices, 0)
    val_norm = float(np.linalg.norm(val_y))
    max_rows = int(config.get("max_rows_per_segment", 2000))

    sigma0 = math.sqrt(config.prior_scale)
    baseline = closed_form_state(prior, blocks)
    states = {sigma0: baseline}
    override_h = config.raw.get("h")
    factor = float(config.get("h_factor", 1.0))

    def row(branch, seg, step, sigma, st):
        mu = st.q
        err = 100.0 * float(np.linalg.norm(F_val @ mu - val_y)) / val_norm
        return (branch, seg, step, sigma, err, *(phi_sl @ mu))

    rows = [row(0, 0, 0, sigma0, baseline)]
    nodes, seg_h = {}, []
    lam0 = np.eye(basis.n)
    for seg, (a, b, h_paper) in enumerate(config.get("sigma_schedule", []), start=1):
        a, b = float(a), float(b)
        start = next((st for s, st in states.items() if math.isclose(s, a, rel_tol=1e-12)), None)
        if start is None:
            raise ConfigError(f"sigma_schedule segment {a}->{b} starts where no earlier segment ended")
        h = float(override_h) if override_h is not None else float(h_paper) * factor
        seg_h.append(h)
        alpha = (b / a) ** 2
        n_steps = math.ceil(abs(1.0 / alpha - 1.0) / h - 1e-9)
        stride = max(1, math.ceil(n_steps / max_rows))
        branch = -1 if b < a else 1

        def on_step(k, elapsed, st, _a=a, _seg=seg, _branch=branch, _stride=stride, _n=n_steps):
            if (k + 1) % _stride == 0 or k == _n - 1:
                rows.append(row(_branch, _seg, k + 1, _a / math.sqrt(1.0 + elapsed), st))

        end = scale_prior_covariance(start, a * a * lam0, alpha, h, on_step=on_step)
        states[b] = end
        oracle = closed_form_state(GaussianPrior(b * b * lam0, epsilon=config.epsilon), blocks)
        nodes[b] = state_discrepancy(end, oracle)
        log.info("1b segment %g -> %g (h=%g): oracle discrepancy %.3g", a, b, h, nodes[b])

    last = max(states) if states else sigma0
    final = states[last]
    final_oracle = closed_form_state(GaussianPrior(last * last * lam0, epsilon=config.epsilon), blocks)
    return TuningResult(rows, slices, nodes, baseline, states, seg_h, val_tau, val_y,
                        final, state_discrepancy(final, final_oracle))


# ---------------------------------------------------------------------------
# 1C


@dataclass(frozen=True, eq=False)
class OutlierResult:
    reports: list
    outlier_indices: tuple
    final_state: RiccatiState
    oracle_discrepancy: float
    order_discrepancy: float


def run_outlier_removal(config: ExperimentConfig) -> OutlierResult:
    """Train on everything, then retract two planted outliers one after the other."""
    basis, op, prior, T, x, u_ex, f_ex = _bvp_common(config)
    spec = config.get("outliers", {})
    idx = [int(i) for i in spec.get("indices", [])]
    offs = [float(o) for o in spec.get("offsets_sd", [])]
    n_f = int(config.get("n_f", 41))
    if len(idx) != 2 or len(offs) != 2 or len(set(idx)) != 2:
        raise ConfigError("outliers needs exactly two distinct indices and two offsets")
    if any(not 0 <= i < n_f for i in idx):
        raise ConfigError(f"outlier indices {idx} out of range for {n_f} f measurements")
    sd = float(config.noise["f"])
    bvp = D.synth_bvp_data(basis, op, config.seed, config.noise, n_f, T,
                           offsets={i: o * sd for i, o in zip(idx, offs)})
    blocks = list(bvp.boundary) + list(bvp.f_blocks)
    n_all = len(blocks)

    baseline = closed_form_state(prior, blocks)
    a, b = bvp.f_blocks[idx[0]], bvp.f_blocks[idx[1]]
    policy = config.step
    first = policy.retract(baseline, a)
    second = policy.retract(first, b)
    swapped = policy.retract(policy.retract(baseline, b), a)

    reports = [
        _report_1d("baseline", n_all, baseline, basis, op, x, u_ex, f_ex),
        _report_1d("removed_first", n_all - 1, first, basis, op, x, u_ex, f_ex),
        _report_1d("removed_both", n_all - 2, second, basis, op, x, u_ex, f_ex),
    ]
    keep = list(bvp.boundary) + [blk for i, blk in enumerate(bvp.f_blocks) if i not in idx]
    oracle = closed_form_state(prior, keep)
    return OutlierResult(reports, tuple(idx), second, state_discrepancy(second, oracle),
                         state_discrepancy(second, swapped))


# ---------------------------------------------------------------------------
# 2A


@dataclass(frozen=True, eq=False)
class StreamResult:
    checkpoints: list
    final_state: RiccatiState
    first_checkpoint_state: RiccatiState
    oracle_discrepancy: float
    n_blocks: int
    band_trace: list


def _advdiff_common(config: ExperimentConfig):
    basis, op, prior = _setup(config)
    if op.kind != "adv_diff":
        raise ConfigError("the advection-diffusion scenarios need an adv_diff operator")
    x = np.linspace(0.0, 1.0, int(config.get("eval_points", 1001)))
    Dc, kappa = op.coeffs
    return basis, op, prior, x, D.advdiff_u(x), D.advdiff_f(x, Dc, kappa)


def stream_checkpoints(config: ExperimentConfig) -> list[int]:
    """Checkpoints after applying the desk-scale factor to the stream length."""
    cps = [int(c) for c in config.get("checkpoints", [1000])]
    total = max(1, int(round(cps[-1] * config.scale)))
    return [c for c in cps if c < total] + [total]


def run_bigdata_stream(config: ExperimentConfig,
                       source: Callable[[int | None], Iterable[DataBlock]] | None = None) -> StreamResult:
    """Stream random noisy f measurements one at a time.

    ``source(count)`` yields the blocks; the default is the seeded
    generator. Only the current block and the state are alive inside the
    loop.
    """
    basis, op, prior, x, u_ex, f_ex = _advdiff_common(config)
    sd = float(config.noise["f"])
    cps = stream_checkpoints(config)
    total = cps[-1]
    if source is None:
        def source(count):
            return D.advdiff_stream(basis, op, config.seed, sd, count)

    policy = config.step
    trace = _BandTrace(basis, np.linspace(0.0, 1.0, _TRACE_POINTS))
    every = max(1, total // 200)
    state = init_state(prior)
    trace.record(0, state)
    first_state = None
    reports = []
    k = 0
    for blk in source(total):
        state = policy.incorporate(state, blk)
        del blk
        k += 1
        if k % every == 0:
            trace.record(k, state)
        if k in cps:
            if first_state is None:
                first_state = state
            rep = _report_1d(f"after_{k}", k, state, basis, op, x, u_ex, f_ex)
            log.info("2a checkpoint %d: u error %.3f%%", k, rep.u_error)
            reports.append(rep)
        if k >= total:
            break
    if k < total:
        raise ConfigError(f"block source ended after {k} blocks, expected {total}")

    oracle = closed_form_state(prior, D.advdiff_stream(basis, op, config.seed, sd, cps[0]))
    return StreamResult(reports, state, first_state, state_discrepancy(first_state, oracle), k, trace.values)


# ---------------------------------------------------------------------------
# 2B


@dataclass(frozen=True, eq=False)
class ActiveResult:
    """Sensor log.

    ``log`` rows are ``(iteration, index, location, max_band_before,
    band_at_location_after, measurement, u_error, f_error)``;
    ``snapshots[i]`` holds the f-band on every candidate before iteration
    ``i`` (NaN where already sensed).
    """

    log: list
    snapshots: np.ndarray
    candidates: np.ndarray
    stop_reason: str
    final_state: RiccatiState
    oracle_discrepancy: float
    reports: list = field(default_factory=list)


def run_active_learning(config: ExperimentConfig) -> ActiveResult:
    """Place sensors one by one where the predicted f-band is widest."""
    basis, op, prior, x, u_ex, f_ex = _advdiff_common(config)
    Dc, kappa = op.coeffs
    sd = float(config.noise["f"])
    cand = np.linspace(0.0, 1.0, int(config.get("n_candidates", 101)))
    F_c = design_matrix(basis, op, cand)
    threshold = float(config.get("stop_threshold", 0.5))
    cap = config.get("max_sensors")
    cap = len(cand) if cap is None else min(int(cap), len(cand))
    rng = D.rng_stream(config.seed, D.SENSORS)
    policy = config.step

    state = init_state(prior)
    remaining = np.ones(len(cand), dtype=bool)
    rows, snaps, blocks, reports = [], [], [], []
    reason = "exhausted"
    for it in range(1, len(cand) + 1):
        if it > cap:
            reason = "max_sensors"
            break
        sigma = state.epsilon * state.P
        bands = np.full(len(cand), np.nan)
        bands[remaining] = _band(F_c[remaining], sigma)
        if np.nanmax(bands) < threshold:
            reason = "threshold"
            break
        snaps.append(bands)
        idx = int(np.nanargmax(bands))  # first maximal index on ties
        loc = float(cand[idx])
        y = float(D.advdiff_f(loc, Dc, kappa)) + sd * rng.standard_normal()
        blk = DataBlock(F_c[idx], y, sd**2)
        state = policy.incorporate(state, blk)
        blocks.append(blk)
        remaining[idx] = False
        after = float(_band(F_c[idx:idx + 1], state.epsilon * state.P)[0])
        rep = _report_1d(f"sensor_{it}", it, state, basis, op, x, u_ex, f_ex)
        reports.append(rep)
        rows.append((it, idx, loc, float(bands[idx]), after, y, rep.u_error, rep.f_error))
    oracle = closed_form_state(prior, blocks)
    snapshots = np.array(snaps) if snaps else np.zeros((0, len(cand)))
    return ActiveResult(rows, snapshots, cand, reason, state, state_discrepancy(state, oracle), reports)


def verify_active_log(result: ActiveResult, atol: float = 0.0) -> list[int]:
    """Iterations whose chosen index is not the first argmax of its snapshot."""
    bad = []
    for row, snap in zip(result.log, result.snapshots):
        it, idx = int(row[0]), int(row[1])
        best = np.nanmax(snap)
        first = int(np.flatnonzero(snap >= best - atol)[0])
        if np.isnan(snap[idx]) or idx != first:
            bad.append(it)
    return bad


# ---------------------------------------------------------------------------
# 3A / 3B


@dataclass(frozen=True, eq=False)
class HelmholtzResult:
    """Per-step rows are ``(step, row, col, m, u_error, f_error, u_band_mean)``."""

    traversal: str
    steps: list
    final_state: RiccatiState
    oracle_discrepancy: float
    other_traversal: str | None
    order_discrepancy: float | None
    grid_size: int
    subdomains: int


def helmholtz_setup(config: ExperimentConfig):
    basis, op, prior = _setup(config)
    if basis.dim != 2 or op.kind != "helmholtz":
        raise ConfigError("the Helmholtz scenarios need a sine2d basis and a helmholtz operator")
    size = int(round(int(config.get("paper_grid", 450)) * config.scale))
    k = int(config.get("subdomains", 3))
    if size < 3 or k < 1 or k > size - 2:
        raise ConfigError(f"grid of {size} points cannot be split into {k}x{k} subdomains")
    grid = D.HelmholtzGrid(size, float(basis.params["L"]), k)
    return basis, op, prior, grid


def _helmholtz_pass(config, basis, op, prior, grid, order, source, on_field=None):
    policy = config.step
    ax = grid.axis
    X, Y = np.meshgrid(ax, ax)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    kappa2 = op.coeffs[0]
    u_ex = D.helmholtz_u(X, Y, kappa2)
    f_ex = D.helmholtz_f(X, Y)
    state = init_state(prior)
    steps = []
    for step, (r, c) in enumerate(order, start=1):
        blk = source(r, c)
        m = blk.m
        state = policy.incorporate(state, blk)
        del blk
        g = prediction_grid(state, basis, op, pts)
        u_pred = g.u_mean.reshape(X.shape)
        f_pred = g.f_mean.reshape(X.shape)
        steps.append((step, r, c, m, relative_l2_error(u_pred, u_ex, ax, ax),
                      relative_l2_error(f_pred, f_ex, ax, ax), float(np.mean(g.u_band))))
        if on_field is not None:
            on_field(step, r, c, X, Y, np.abs(u_pred - u_ex))
    return state, steps


def run_helmholtz_decomposition(
    config: ExperimentConfig,
    source: Callable[[int, int], DataBlock] | None = None,
    on_field: Callable | None = None,
) -> HelmholtzResult:
    """Incorporate one stacked block per subdomain in the configured order.

    ``source(row, col)`` builds a subdomain's block (default: seeded
    synthetic data); ``on_field(step, row, col, X, Y, abs_error)`` receives
    the absolute u-error field after every subdomain. With
    ``compare_orders`` set the other traversal is run too and the final
    states are compared.
    """
    basis, op, prior, grid = helmholtz_setup(config)
    sd = float(config.noise["f"])
    if source is None:
        def source(r, c):
            return D.helmholtz_block(basis, op, grid, r, c, config.seed, sd)
    kind = str(config.get("traversal", "snake"))
    order = D.traversal(kind, grid.k)
    state, steps = _helmholtz_pass(config, basis, op, prior, grid, order, source, on_field)
    log.info("3 (%s): final u error %.3f%%", kind, steps[-1][4])

    other, order_disc = None, None
    if config.get("compare_orders", False):
        other = "multilevel" if kind == "snake" else "snake"
        alt = init_state(prior)
        for r, c in D.traversal(other, grid.k):
            alt = config.step.incorporate(alt, source(r, c))
        order_disc = state_discrepancy(state, alt)

    oracle = closed_form_state(prior, (source(r, c) for r, c in D.snake_order(grid.k)))
    return HelmholtzResult(kind, steps, state, state_discrepancy(state, oracle), other, order_disc,
                           grid.size, grid.k)


SCENARIO_RUNNERS = {
    "1a": run_continual_learning,
    "1b": run_hyperparameter_tuning,
    "1c": run_outlier_removal,
    "2a": run_bigdata_stream,
    "2b": run_active_learning,
    "3a": run_helmholtz_decomposition,
    "3b": run_helmholtz_decomposition,
}
