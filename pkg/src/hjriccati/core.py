"""Riccati-flow engine for Bayesian linear regression with a Gaussian prior.

The posterior of ``y_i = Phi_i w + noise_i`` (noise variance ``sigma_i^2``) under
the prior ``w ~ N(Lambda x, eps * Lambda)`` is carried by the coefficients of a
quadratic function ``S(x) = 1/2 x^T P x + q^T x + r``::

    posterior mean        mu    = P x + q
    posterior covariance  Sigma = eps * P

Each data block acts for a time ``t_i = eps / sigma_i^2`` along the flow::

    dP/ds = -P Phi^T Phi P
    dq/ds = -P Phi^T (Phi q - y)
    dr/ds = -1/2 |Phi q - y|^2 - eps/2 tr(Phi^T Phi P)

Adding a block integrates forward over its time, removing it integrates
backward, and retuning its variance integrates over the difference of times.
Everything here is value-in/value-out; no function mutates its arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DimensionMismatch, NonFinite, NonSPD, RiccatiError

__all__ = [
    "RiccatiState",
    "DataBlock",
    "GaussianPrior",
    "PosteriorSummary",
    "FlowSample",
    "init_state",
    "riccati_rhs",
    "evolve",
    "evolve_staged",
    "block_stiffness",
    "stage_schedule",
    "incorporate",
    "retract",
    "tune_observation_variance",
    "posterior",
    "state_from_posterior",
    "closed_form_posterior",
    "closed_form_state",
    "expected_hamiltonian",
    "state_to_text",
    "state_from_text",
    "save_state",
    "load_state",
]

StepCallback = Callable[[int, float, "RiccatiState"], None]


@dataclass(frozen=True, eq=False)
class RiccatiState:
    """Quadratic coefficients ``(P, q, r)`` of the value function plus ``eps``.

    ``r`` is only evolved when ``track_r`` is set; otherwise it stays at 0.
    """

    P: np.ndarray
    q: np.ndarray
    r: float = 0.0
    epsilon: float = 1.0
    track_r: bool = False

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        q = np.asarray(self.q, dtype=float).reshape(-1)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise DimensionMismatch(f"P must be square, got shape {P.shape}")
        if q.shape[0] != P.shape[0]:
            raise DimensionMismatch(f"q has length {q.shape[0]}, expected {P.shape[0]}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "epsilon", float(self.epsilon))

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def is_spd(self) -> bool:
        try:
            np.linalg.cholesky(self.P)
        except np.linalg.LinAlgError:
            return False
        return True


@dataclass(frozen=True, eq=False)
class DataBlock:
    """One observation batch: ``m`` rows of design, targets, one shared variance."""

    phi: np.ndarray
    y: np.ndarray
    sigma2: float

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        if phi.ndim == 1:
            phi = phi.reshape(1, -1)
        y = np.atleast_1d(np.asarray(self.y, dtype=float)).reshape(-1)
        if phi.ndim != 2:
            raise DimensionMismatch(f"phi must be 2-D, got shape {phi.shape}")
        if y.shape[0] != phi.shape[0]:
            raise DimensionMismatch(f"y has {y.shape[0]} entries for {phi.shape[0]} design rows")
        sigma2 = float(self.sigma2)
        if not (math.isfinite(sigma2) and sigma2 > 0):
            raise ValueError(f"sigma2 must be positive and finite, got {self.sigma2}")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def m(self) -> int:
        return self.phi.shape[0]

    @property
    def n(self) -> int:
        return self.phi.shape[1]

    def time(self, epsilon: float) -> float:
        """Flow duration ``eps / sigma2`` carried by this block."""
        return epsilon / self.sigma2

    def with_sigma2(self, sigma2: float) -> "DataBlock":
        return DataBlock(self.phi, self.y, sigma2)


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    """Prior ``N(lam @ x, epsilon * lam)``."""

    lam: np.ndarray
    x: np.ndarray | None = None
    epsilon: float = 1.0

    def __post_init__(self):
        lam = np.atleast_2d(np.asarray(self.lam, dtype=float))
        if lam.shape[0] != lam.shape[1]:
            raise DimensionMismatch(f"lambda must be square, got shape {lam.shape}")
        x = np.zeros(lam.shape[0]) if self.x is None else np.asarray(self.x, dtype=float).reshape(-1)
        if x.shape[0] != lam.shape[0]:
            raise DimensionMismatch(f"x has length {x.shape[0]}, expected {lam.shape[0]}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "epsilon", float(self.epsilon))

    @property
    def n(self) -> int:
        return self.lam.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.lam @ self.x

    @property
    def covariance(self) -> np.ndarray:
        return self.epsilon * self.lam


class PosteriorSummary(NamedTuple):
    mu: np.ndarray
    sigma: np.ndarray


class FlowSample(NamedTuple):
    """One point on a tuning flow: the implied hyperparameter and the posterior there."""

    param: float
    mu: np.ndarray
    sigma: np.ndarray


def _check_block(state: RiccatiState, block: DataBlock) -> None:
    if block.n != state.n:
        raise DimensionMismatch(f"block has {block.n} columns, state dimension is {state.n}")


def _eval_point(state: RiccatiState, x) -> np.ndarray:
    if x is None:
        return np.zeros(state.n)
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != state.n:
        raise DimensionMismatch(f"x has length {x.shape[0]}, state dimension is {state.n}")
    return x


def _cholesky(a: np.ndarray, what: str, operation: str | None = None):
    try:
        return cho_factor(a, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NonSPD(f"{what} is not symmetric positive definite", operation=operation) from exc


def init_state(prior: GaussianPrior, track_r: bool = False) -> RiccatiState:
    """State at time zero: ``P = Lambda``, ``q = 0`` and, if tracked,
    ``r = eps/2 log det Lambda + eps n/2 log(2 pi eps)``."""
    c, _ = _cholesky(prior.lam, "prior lambda", "init_state")
    r = 0.0
    if track_r:
        eps, n = prior.epsilon, prior.n
        logdet = 2.0 * np.sum(np.log(np.diag(c)))
        r = 0.5 * eps * logdet + 0.5 * eps * n * math.log(2.0 * math.pi * eps)
    return RiccatiState(prior.lam.copy(), np.zeros(prior.n), r, prior.epsilon, track_r)


def riccati_rhs(state: RiccatiState, block: DataBlock) -> tuple[np.ndarray, np.ndarray, float]:
    """Forward-time right-hand sides ``(dP, dq, dr)`` for one block's Hamiltonian."""
    _check_block(state, block)
    phi, P, q = block.phi, state.P, state.q
    V = phi @ P
    resid = phi @ q - block.y
    dP = -V.T @ V
    dq = -V.T @ resid
    dr = -0.5 * float(resid @ resid) - 0.5 * state.epsilon * float(np.sum(V * phi))
    return dP, dq, dr


class _Hamiltonian:
    """Block reduced to at most ``n`` rows with the same Gram matrix and residual norm."""

    __slots__ = ("phi", "y", "resid_const")

    def __init__(self, block: DataBlock):
        phi, y = block.phi, block.y
        if phi.shape[0] > phi.shape[1]:
            Q, R = np.linalg.qr(phi, mode="reduced")
            yq = Q.T @ y
            self.phi = R
            self.y = yq
            self.resid_const = max(float(y @ y) - float(yq @ yq), 0.0)
        else:
            self.phi = phi
            self.y = y
            self.resid_const = 0.0

    def rhs(self, P, q, eps, track_r):
        V = self.phi @ P
        e = self.phi @ q - self.y
        dP = -V.T @ V
        dq = -V.T @ e
        if track_r:
            dr = -0.5 * (float(e @ e) + self.resid_const) - 0.5 * eps * float(np.sum(V * self.phi))
        else:
            dr = 0.0
        return dP, dq, dr


def evolve(
    state: RiccatiState,
    block: DataBlock,
    duration: float,
    h: float,
    on_step: StepCallback | None = None,
    operation: str = "evolve",
) -> RiccatiState:
    """Integrate the block's Riccati system for ``duration`` (signed) with RK4.

    Steps have length ``h`` except the last, which is shortened to land on the
    endpoint. ``P`` is re-symmetrized after every step. ``on_step`` is called
    as ``on_step(k, elapsed, state)`` after each accepted step, with
    ``elapsed`` signed like ``duration``.

    Raises
    ------
    NonFinite
        If any entry of the state stops being finite.
    """
    _check_block(state, block)
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    duration = float(duration)
    if duration == 0.0:
        return state
    total = abs(duration)
    sign = 1.0 if duration > 0 else -1.0
    n_full = int(math.floor(total / h))
    rest = total - n_full * h
    # drop a rounding-sized tail step instead of taking it
    if rest <= 1e-12 * total:
        rest = 0.0
    steps = [h] * n_full + ([rest] if rest > 0.0 else [])

    ham = _Hamiltonian(block)
    eps, track = state.epsilon, state.track_r
    P, q, r = state.P, state.q, state.r
    elapsed = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for k, hk in enumerate(steps):
            dt = sign * hk
            half = 0.5 * dt
            k1P, k1q, k1r = ham.rhs(P, q, eps, track)
            k2P, k2q, k2r = ham.rhs(P + half * k1P, q + half * k1q, eps, track)
            k3P, k3q, k3r = ham.rhs(P + half * k2P, q + half * k2q, eps, track)
            k4P, k4q, k4r = ham.rhs(P + dt * k3P, q + dt * k3q, eps, track)
            sixth = dt / 6.0
            P = P + sixth * (k1P + 2.0 * (k2P + k3P) + k4P)
            P = 0.5 * (P + P.T)
            q = q + sixth * (k1q + 2.0 * (k2q + k3q) + k4q)
            if track:
                r = r + sixth * (k1r + 2.0 * (k2r + k3r) + k4r)
            if not (np.isfinite(P).all() and np.isfinite(q).all() and math.isfinite(r)):
                raise NonFinite("state became non-finite; step too large or flow left the SPD cone",
                                operation=operation, step=k)
            elapsed += dt
            if on_step is not None:
                on_step(k, elapsed, RiccatiState(P, q, r, eps, track))
    return RiccatiState(P, q, r, eps, track)


def block_stiffness(state: RiccatiState, block: DataBlock) -> float:
    """Largest eigenvalue of ``Phi P Phi^T``, the fastest rate in the block's flow."""
    _check_block(state, block)
    phi = _Hamiltonian(block).phi
    G = phi @ state.P @ phi.T
    if G.shape[0] == 1:
        return max(float(G[0, 0]), 0.0)
    return max(float(np.linalg.eigvalsh(0.5 * (G + G.T))[-1]), 0.0)


def stage_schedule(lam_hi: float, total: float, courant: float, h_max: float = math.inf):
    """Split ``[0, total]`` into stages with per-stage fixed RK4 steps.

    ``lam_hi`` is the stiffness at the information-poor end (s = 0). Along the
    flow the stiffness decays as ``lam_hi / (1 + s lam_hi)``, so stage ``k``
    spans ``[(2^k - 1), (2^{k+1} - 1)] / lam_hi`` with step
    ``courant * 2^k / lam_hi``: about ``1/courant`` steps per stage.
    Returns a list of ``(length, h)`` ordered from s = 0.
    """
    if not total > 0:
        return []
    if lam_hi <= 0 or lam_hi * total <= courant:
        return [(total, min(h_max, total))]
    stages = []
    start = 0.0
    k = 0
    while start < total:
        end = min((2.0 ** (k + 1) - 1.0) / lam_hi, total)
        h = min(h_max, courant * 2.0**k / lam_hi)
        stages.append((end - start, h))
        start = end
        k += 1
    return stages


def evolve_staged(
    state: RiccatiState,
    block: DataBlock,
    duration: float,
    courant: float = 0.02,
    h_max: float = math.inf,
    on_step: StepCallback | None = None,
    operation: str = "evolve",
) -> RiccatiState:
    """Evolve like :func:`evolve`, choosing a fixed step per stage from the stiffness.

    Each stage is a plain :func:`evolve` call; the schedule only decides where
    stages begin and which ``h`` each uses, keeping ``h * stiffness <= courant``.
    Backward flows are checked up front: if removing the block's time would
    leave the SPD cone, ``NonSPD`` is raised before integrating.
    """
    duration = float(duration)
    if duration == 0.0:
        return state
    lam = block_stiffness(state, block)
    total = abs(duration)
    if duration > 0:
        stages = stage_schedule(lam, total, courant, h_max)
        sign = 1.0
    else:
        if lam * total >= 1.0:
            raise NonSPD("backward flow would leave the SPD cone (block was not incorporated "
                         "with at least this much time)", operation=operation)
        lam_hi = lam / (1.0 - lam * total)
        stages = stage_schedule(lam_hi, total, courant, h_max)[::-1]
        sign = -1.0

    offset = 0.0
    count = 0
    for length, h in stages:
        cb = None
        if on_step is not None:
            def cb(k, elapsed, st, _off=offset, _cnt=count):
                on_step(_cnt + k, _off + elapsed, st)
        state = evolve(state, block, sign * length, h, on_step=cb, operation=operation)
        offset += sign * length
        count += int(math.ceil(length / h - 1e-12))
    return state


def incorporate(state: RiccatiState, block: DataBlock, h: float, on_step: StepCallback | None = None) -> RiccatiState:
    """Add a block: evolve forward for ``eps / sigma2``."""
    return evolve(state, block, block.time(state.epsilon), h, on_step=on_step, operation="incorporate")


def retract(state: RiccatiState, block: DataBlock, h: float, on_step: StepCallback | None = None) -> RiccatiState:
    """Remove a previously incorporated block: evolve backward for ``eps / sigma2``.

    Nothing checks that the block was ever incorporated; retracting foreign
    data typically ends in ``NonFinite``.
    """
    return evolve(state, block, -block.time(state.epsilon), h, on_step=on_step, operation="retract")


def tune_observation_variance(
    state: RiccatiState,
    block: DataBlock,
    sigma2_new: float,
    h: float,
    emit: bool = False,
    x=None,
    on_step: StepCallback | None = None,
):
    """Move an incorporated block's variance from ``block.sigma2`` to ``sigma2_new``.

    With ``emit`` set, also returns the flow as a list of
    :class:`FlowSample` whose ``param`` is the implied variance at each step.
    """
    if not (math.isfinite(sigma2_new) and sigma2_new > 0):
        raise ValueError(f"sigma2_new must be positive and finite, got {sigma2_new}")
    eps = state.epsilon
    t_old = eps / block.sigma2
    duration = eps / sigma2_new - t_old
    trace: list[FlowSample] = []
    xv = _eval_point(state, x)

    def record(k, elapsed, st):
        if emit:
            trace.append(FlowSample(eps / (t_old + elapsed), st.P @ xv + st.q, eps * st.P))
        if on_step is not None:
            on_step(k, elapsed, st)

    hook = record if (emit or on_step is not None) else None
    out = evolve(state, block, duration, h, on_step=hook, operation="tune_observation_variance")
    if emit:
        return out, trace
    return out


def posterior(state: RiccatiState, x=None) -> PosteriorSummary:
    """Posterior mean ``P x + q`` and covariance ``eps P`` at evaluation point ``x``."""
    xv = _eval_point(state, x)
    return PosteriorSummary(state.P @ xv + state.q, state.epsilon * state.P)


def state_from_posterior(summary: PosteriorSummary, x=None, epsilon: float = 1.0) -> RiccatiState:
    """Inverse of :func:`posterior`: ``P = Sigma/eps``, ``q = mu - P x``."""
    sigma = np.asarray(summary.sigma, dtype=float)
    mu = np.asarray(summary.mu, dtype=float).reshape(-1)
    if sigma.shape != (mu.shape[0], mu.shape[0]):
        raise DimensionMismatch(f"sigma shape {sigma.shape} does not match mean length {mu.shape[0]}")
    _cholesky(sigma, "posterior covariance", "state_from_posterior")
    P = sigma / epsilon
    xv = np.zeros(mu.shape[0]) if x is None else np.asarray(x, dtype=float).reshape(-1)
    if xv.shape[0] != mu.shape[0]:
        raise DimensionMismatch(f"x has length {xv.shape[0]}, expected {mu.shape[0]}")
    return RiccatiState(P, mu - P @ xv, 0.0, epsilon, False)


def _closed_form(prior: GaussianPrior, blocks: Iterable[DataBlock]):
    eps, n = prior.epsilon, prior.n
    lam_c = _cholesky(prior.lam, "prior lambda", "closed_form_posterior")
    precision = cho_solve(lam_c, np.eye(n))
    b = np.zeros(n)
    c0 = 0.0
    count = 0
    for blk in blocks:
        count += 1
        if blk.n != n:
            raise DimensionMismatch(f"block has {blk.n} columns, prior dimension is {n}")
        t = blk.time(eps)
        precision += t * (blk.phi.T @ blk.phi)
        b += t * (blk.phi.T @ blk.y)
        c0 += 0.5 * t * float(blk.y @ blk.y)
        del blk  # keep streamed sources at one live block
    if count == 0:
        # the prior itself, exactly, rather than Lambda inverted twice
        logdet = 2.0 * np.sum(np.log(np.diag(lam_c[0])))
        r = 0.5 * eps * logdet + 0.5 * eps * n * math.log(2.0 * math.pi * eps)
        return prior.lam.copy(), b, r
    precision = 0.5 * (precision + precision.T)
    a_c = _cholesky(precision, "posterior precision", "closed_form_posterior")
    P = cho_solve(a_c, np.eye(n))
    P = 0.5 * (P + P.T)
    q = cho_solve(a_c, b)
    logdet = 2.0 * np.sum(np.log(np.diag(a_c[0])))
    r = 0.5 * eps * n * math.log(2.0 * math.pi * eps) - 0.5 * eps * logdet + 0.5 * float(b @ q) - c0
    return P, q, r


def closed_form_posterior(prior: GaussianPrior, blocks: Iterable[DataBlock]) -> PosteriorSummary:
    """Exact posterior by the normal equations (the oracle for every flow).

    In flow time ``t_i = eps / sigma_i^2``:
    ``P = (Lambda^-1 + sum_i t_i Phi_i^T Phi_i)^-1`` and
    ``q = P sum_i t_i Phi_i^T y_i``, solved through Cholesky factors.
    """
    P, q, _ = _closed_form(prior, blocks)
    return PosteriorSummary(P @ prior.x + q, prior.epsilon * P)


def closed_form_state(prior: GaussianPrior, blocks: Iterable[DataBlock], track_r: bool = False) -> RiccatiState:
    """The flow state after all ``blocks``, computed directly (including ``r`` if asked)."""
    P, q, r = _closed_form(prior, blocks)
    return RiccatiState(P, q, r if track_r else 0.0, prior.epsilon, track_r)


def expected_hamiltonian(state: RiccatiState, block: DataBlock, x=None) -> float:
    """Posterior expectation of ``1/2 |Phi w - y|^2``; equals minus the time
    derivative of the value function in this block's time."""
    _check_block(state, block)
    mu, sigma = posterior(state, x)
    resid = block.phi @ mu - block.y
    return 0.5 * float(resid @ resid) + 0.5 * float(np.sum((block.phi @ sigma) * block.phi))


# checkpoint text format ----------------------------------------------------

MAGIC = "HJRICCATI-STATE"
VERSION = 1


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def state_to_text(state: RiccatiState, header: dict | None = None) -> str:
    """Versioned text checkpoint; ``header`` items become leading ``# key=value`` lines."""
    lines = [f"# {k}={v}" for k, v in (header or {}).items()]
    lines += [
        f"{MAGIC} {VERSION}",
        f"n {state.n}",
        f"epsilon {_fmt(state.epsilon)}",
        f"track_r {int(state.track_r)}",
        "P",
    ]
    lines += [",".join(_fmt(v) for v in row) for row in state.P]
    lines += ["q", ",".join(_fmt(v) for v in state.q), "r", _fmt(state.r)]
    return "\n".join(lines) + "\n"


class MalformedState(RiccatiError, ValueError):
    pass


def state_from_text(text: str) -> RiccatiState:
    lines = [ln.strip() for ln in text.strip().splitlines()]
    while lines and lines[0].startswith("#"):
        lines.pop(0)
    try:
        magic, version = lines[0].split()
        if magic != MAGIC:
            raise MalformedState(f"bad magic {magic!r}")
        if int(version) != VERSION:
            raise MalformedState(f"unsupported version {version}")
        header = dict(ln.split(None, 1) for ln in lines[1:4])
        n = int(header["n"])
        eps = float(header["epsilon"])
        track = bool(int(header["track_r"]))
        if lines[4] != "P":
            raise MalformedState("expected 'P' section")
        P = np.array([[float(v) for v in ln.split(",")] for ln in lines[5:5 + n]])
        if lines[5 + n] != "q" or lines[7 + n] != "r":
            raise MalformedState("expected 'q' and 'r' sections")
        q = np.array([float(v) for v in lines[6 + n].split(",")])
        r = float(lines[8 + n])
    except MalformedState:
        raise
    except (IndexError, KeyError, ValueError) as exc:
        raise MalformedState(f"cannot parse state checkpoint: {exc}") from exc
    if P.shape != (n, n) or q.shape != (n,):
        raise MalformedState(f"dimension check failed: header n={n}, P {P.shape}, q {q.shape}")
    return RiccatiState(P, q, r, eps, track)


def save_state(state: RiccatiState, path, header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(state_to_text(state, header))


def load_state(path) -> RiccatiState:
    with open(path, encoding="utf-8") as fh:
        return state_from_text(fh.read())
