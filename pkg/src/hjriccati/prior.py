"""Retuning the Gaussian prior of an already trained state.

The prior precision ``Lambda^-1 / eps`` enters the flow like the Hamiltonian of
a pseudo-observation ``Phi = Lambda^{-1/2}``, ``y = 0`` acting for unit time.
Swapping priors therefore means adding the new pseudo-block and removing the
old one, without touching the data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DataBlock,
    FlowSample,
    PosteriorSummary,
    RiccatiState,
    StepCallback,
    evolve,
    posterior,
    _eval_point,
)
from .errors import DimensionMismatch, NonSPD


@dataclass(frozen=True, eq=False)
class CovarianceRetune:
    """Change of prior covariance factor ``lambda_old -> lambda_new``.

    If ``scale_alpha`` is given, ``lambda_new`` must equal ``scale_alpha * lambda_old``.
    """

    lambda_old: np.ndarray
    lambda_new: np.ndarray
    scale_alpha: float | None = None

    def __post_init__(self):
        old = np.atleast_2d(np.asarray(self.lambda_old, dtype=float))
        new = np.atleast_2d(np.asarray(self.lambda_new, dtype=float))
        if old.shape != new.shape or old.shape[0] != old.shape[1]:
            raise DimensionMismatch(f"lambda shapes {old.shape} and {new.shape} must be equal and square")
        for name, mat in (("lambda_old", old), ("lambda_new", new)):
            try:
                np.linalg.cholesky(mat)
            except np.linalg.LinAlgError as exc:
                raise NonSPD(f"{name} is not symmetric positive definite", operation="CovarianceRetune") from exc
        if self.scale_alpha is not None:
            if not self.scale_alpha > 0:
                raise ValueError(f"scale_alpha must be positive, got {self.scale_alpha}")
            scale = max(np.abs(new).max(), 1.0)
            if np.abs(new - self.scale_alpha * old).max() > 1e-12 * scale:
                raise ValueError("lambda_new is not scale_alpha * lambda_old")
        object.__setattr__(self, "lambda_old", old)
        object.__setattr__(self, "lambda_new", new)

    @classmethod
    def scaled(cls, lam, alpha: float) -> "CovarianceRetune":
        lam = np.atleast_2d(np.asarray(lam, dtype=float))
        return cls(lam, alpha * lam, alpha)


def retarget_prior_mean(state: RiccatiState, x_new) -> PosteriorSummary:
    """Posterior under the prior mean ``Lambda x_new``; the covariance is unchanged."""
    return posterior(state, x_new)


def matrix_inv_sqrt(a) -> np.ndarray:
    """Principal inverse square root of an SPD matrix via ``eigh``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"matrix must be square, got shape {a.shape}")
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    top = vals[-1]
    if not top > 0 or vals[0] <= 1e-14 * top:
        raise NonSPD(f"matrix is not SPD (eigenvalues in [{vals[0]:.3g}, {top:.3g}])",
                     operation="matrix_inv_sqrt")
    out = (vecs / np.sqrt(vals)) @ vecs.T
    return 0.5 * (out + out.T)


def _pseudo_block(lam: np.ndarray, epsilon: float) -> DataBlock:
    # sigma2 = eps makes the block's own flow time exactly 1
    return DataBlock(matrix_inv_sqrt(lam), np.zeros(lam.shape[0]), epsilon)


def tune_prior_covariance(state: RiccatiState, retune: CovarianceRetune, x=None, h: float = 1e-3) -> RiccatiState:
    """Swap the prior covariance ``eps*lambda_old`` for ``eps*lambda_new``.

    Phase one adds the new prior precision (forward over unit time with
    ``Phi = lambda_new^{-1/2}``, ``y = 0``); phase two removes the old one
    (backward over unit time with ``Phi = lambda_old^{-1/2}``). The backward
    phase may leave the SPD cone if the new prior is much tighter in
    directions the data never constrained; that is reported, not clamped.
    """
    if retune.lambda_old.shape[0] != state.n:
        raise DimensionMismatch(f"retune dimension {retune.lambda_old.shape[0]} != state dimension {state.n}")
    _eval_point(state, x)
    eps = state.epsilon
    mid = evolve(state, _pseudo_block(retune.lambda_new, eps), 1.0, h, operation="tune_prior_covariance")
    out = evolve(mid, _pseudo_block(retune.lambda_old, eps), -1.0, h, operation="tune_prior_covariance")
    if not out.is_spd():
        raise NonSPD("prior swap left the SPD cone", operation="tune_prior_covariance")
    return out


def scale_prior_covariance(
    state: RiccatiState,
    lam,
    alpha: float,
    h: float,
    emit: bool = False,
    x=None,
    on_step: StepCallback | None = None,
):
    """Rescale the prior covariance ``eps*lam -> eps*alpha*lam`` with a single flow.

    The pseudo-block ``Phi = lam^{-1/2}, y = 0`` is run from ``s = 1`` to
    ``s = 1/alpha``; every intermediate ``s`` is the posterior under prior
    covariance ``(eps/s) lam``. With ``emit`` set, each step is returned as a
    :class:`FlowSample` whose ``param`` is the implied ``alpha = 1/s``.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    if lam.shape[0] != state.n:
        raise DimensionMismatch(f"lambda dimension {lam.shape[0]} != state dimension {state.n}")
    xv = _eval_point(state, x)
    eps = state.epsilon
    trace: list[FlowSample] = []

    def record(k, elapsed, st):
        if emit:
            trace.append(FlowSample(1.0 / (1.0 + elapsed), st.P @ xv + st.q, eps * st.P))
        if on_step is not None:
            on_step(k, elapsed, st)

    hook = record if (emit or on_step is not None) else None
    out = evolve(state, _pseudo_block(lam, eps), 1.0 / alpha - 1.0, h, on_step=hook,
                 operation="scale_prior_covariance")
    if emit:
        return out, trace
    return out
