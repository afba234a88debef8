"""Experiment configuration: defaults, overrides and the RK4 step policy."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from importlib import resources

from ..core import DataBlock, RiccatiState, StepCallback, evolve, evolve_staged
from ..errors import ConfigError

SCENARIOS = ("1a", "1b", "1c", "2a", "2b", "3a", "3b")

# keys whose value is replaced wholesale when an override names a different kind
_KINDED = ("basis", "operator")


def default_configs() -> dict:
    """All shipped scenario defaults, keyed by scenario id."""
    text = resources.files(__package__).joinpath("configs/default.json").read_text(encoding="utf-8")
    return json.loads(text)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            if key in _KINDED and "kind" in val and val["kind"] != out[key].get("kind"):
                out[key] = copy.deepcopy(val)
            else:
                out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


@dataclass(frozen=True)
class StepPolicy:
    """How RK4 steps are chosen for each flow segment.

    With ``h`` set every segment uses that fixed step. Otherwise steps are
    staged from the block's stiffness so that ``h * stiffness <= courant``;
    see :func:`hjriccati.core.evolve_staged`.
    """

    h: float | None = None
    courant: float = 0.02

    def __post_init__(self):
        if self.h is not None and not (math.isfinite(self.h) and self.h > 0):
            raise ConfigError(f"step size h must be positive, got {self.h}")
        if not (math.isfinite(self.courant) and 0 < self.courant <= 1):
            raise ConfigError(f"courant must lie in (0, 1], got {self.courant}")

    @property
    def fixed(self) -> bool:
        return self.h is not None

    def evolve(self, state: RiccatiState, block: DataBlock, duration: float,
               operation: str = "evolve", on_step: StepCallback | None = None) -> RiccatiState:
        if self.h is not None:
            return evolve(state, block, duration, self.h, on_step=on_step, operation=operation)
        return evolve_staged(state, block, duration, self.courant, on_step=on_step, operation=operation)

    def incorporate(self, state: RiccatiState, block: DataBlock) -> RiccatiState:
        return self.evolve(state, block, block.time(state.epsilon), "incorporate")

    def retract(self, state: RiccatiState, block: DataBlock) -> RiccatiState:
        return self.evolve(state, block, -block.time(state.epsilon), "retract")

    def describe(self) -> str:
        if self.h is not None:
            return format(self.h, ".17g")
        return f"staged(courant={self.courant:g})"


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved settings of one scenario run.

    ``params`` holds every scenario-specific knob from the JSON object
    (checkpoints, schedules, grids, thresholds); ``raw`` is the merged JSON
    echoed into the run manifest.
    """

    scenario: str
    seed: int
    epsilon: float
    prior_scale: float
    basis: dict
    operator: dict
    noise: dict
    step: StepPolicy
    scale: float
    paper_scale: bool
    params: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {', '.join(SCENARIOS)}")
        if not (self.epsilon > 0 and self.prior_scale > 0):
            raise ConfigError("epsilon and prior_scale must be positive")
        if not 0 < self.scale <= 1:
            raise ConfigError(f"scale factor must lie in (0, 1], got {self.scale}")
        for name, sd in self.noise.items():
            if not (isinstance(sd, (int, float)) and sd > 0):
                raise ConfigError(f"noise standard deviation {name!r} must be positive, got {sd!r}")
        cps = self.params.get("checkpoints")
        if cps is not None:
            if not cps or any(int(b) <= int(a) for a, b in zip(cps, cps[1:])) or int(cps[0]) < 1:
                raise ConfigError(f"checkpoints must be positive and strictly increasing, got {cps}")
        for seg in self.params.get("sigma_schedule", []):
            if len(seg) != 3 or not all(v > 0 for v in seg):
                raise ConfigError(f"sigma_schedule entries must be positive [from, to, h], got {seg}")

    def get(self, key, default=None):
        return self.params.get(key, default)

    def header(self) -> dict:
        """The ``# key=value`` lines that open every CSV of this run."""
        return {"seed": self.seed, "scenario": self.scenario, "h": self.step.describe()}


def _select_override(doc: dict, scenario: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    if doc and all(k in SCENARIOS for k in doc):
        return doc.get(scenario, {})
    return doc


def load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def resolve_config(
    scenario: str,
    path=None,
    *,
    override: dict | None = None,
    seed: int | None = None,
    h: float | None = None,
    scale: float | None = None,
    paper_scale: bool = False,
) -> ExperimentConfig:
    """Merge defaults, an optional config file and command-line overrides.

    The file may be the full per-scenario document or one scenario's object.
    ``paper_scale`` restores the published problem sizes (and the published
    sigma-schedule steps, which live in a dimensionless flow variable);
    data flows stay on staged steps because the published ``paper_h`` values
    assume an unstated epsilon. ``h`` forces a fixed step everywhere.
    """
    defaults = default_configs()
    if scenario not in defaults:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of {', '.join(SCENARIOS)}")
    doc = defaults[scenario]
    if path is not None:
        doc = _merge(doc, _select_override(load_config_file(path), scenario))
    if override:
        doc = _merge(doc, override)
    if seed is not None:
        doc["seed"] = int(seed)
    if paper_scale:
        doc["scale"] = 1.0
        if "paper_basis_n" in doc:
            doc["basis"]["n"] = doc["paper_basis_n"]
        if "paper_subdomains" in doc:
            doc["subdomains"] = doc["paper_subdomains"]
        if "h_factor" in doc:
            doc["h_factor"] = 1.0
    if scale is not None:
        doc["scale"] = float(scale)
    if h is not None:
        doc["h"] = float(h)
    doc["paper_scale"] = bool(paper_scale)
    return from_dict(scenario, doc)


_COMMON = {"seed", "epsilon", "prior_scale", "basis", "operator", "noise", "h", "courant",
           "paper_h", "scale", "paper_scale", "description"}


def from_dict(scenario: str, doc: dict) -> ExperimentConfig:
    try:
        paper_scale = bool(doc.get("paper_scale", False))
        fixed_h = doc.get("h")
        step = StepPolicy(None if fixed_h is None else float(fixed_h), float(doc.get("courant", 0.02)))
        params = {k: v for k, v in doc.items() if k not in _COMMON}
        return ExperimentConfig(
            scenario=scenario,
            seed=int(doc["seed"]),
            epsilon=float(doc.get("epsilon", 1.0)),
            prior_scale=float(doc.get("prior_scale", 1.0)),
            basis=dict(doc["basis"]),
            operator=dict(doc["operator"]),
            noise=dict(doc.get("noise", {})),
            step=step,
            scale=float(doc.get("scale", 1.0)),
            paper_scale=paper_scale,
            params=params,
            raw=copy.deepcopy(doc),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config for scenario {scenario}: {exc!r}") from exc
