"""Experiment configuration files (YAML) and their validation.

A config has four sections::

    physical:    # rates and couplings in units of kappa (kappa itself is fixed to 1)
    experiment:  # `type` plus the block for that experiment
    numerics:    # optional overrides of solver and detector thresholds
    output:      # optional directory and file stem

Exactly one of ``g`` and ``cooperativity`` must be given. Unknown keys are
rejected in strict mode and dropped with a warning in lenient mode.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, fields
from typing import Annotated, Any, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .detect import LATCH_THRESHOLD, WINDOW, DetectorSpec
from .integrate import Schedule
from .model import PhysicalParams, cooperativity_to_g
from .sweep import SweepNumerics, SweepSpec

log = logging.getLogger(__name__)

EXPERIMENTS = ("steady", "evolve", "sweep", "grid", "threshold", "detect")

_SWEEP_DEFAULTS = SweepNumerics()


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


NonNeg = Annotated[float, Field(ge=0, allow_inf_nan=False)]
Finite = Annotated[float, Field(allow_inf_nan=False)]
Positive = Annotated[float, Field(gt=0, allow_inf_nan=False)]


class PhysicalBlock(_Block):
    gamma31: NonNeg
    gamma32: NonNeg
    deph2: NonNeg = 0.0
    deph3: NonNeg = 0.0
    g: Optional[NonNeg] = None
    cooperativity: Optional[NonNeg] = None
    n_atoms: Annotated[int, Field(ge=0)]
    omega_c: NonNeg = 0.0
    epsilon: NonNeg = 0.0
    delta_p: Finite = 0.0
    delta1: Finite = 0.0
    delta2: Finite = 0.0

    @model_validator(mode="after")
    def _one_coupling(self):
        if (self.g is None) == (self.cooperativity is None):
            raise ValueError("give exactly one of 'g' and 'cooperativity'")
        if self.cooperativity is not None and self.n_atoms == 0:
            raise ValueError("'cooperativity' needs n_atoms > 0; give 'g' instead")
        if self.n_atoms > 0 and self.gamma31 + self.gamma32 == 0:
            raise ValueError("gamma31 + gamma32 must be positive when atoms are present")
        return self

    def resolve(self) -> PhysicalParams:
        kw = self.model_dump(exclude={"g", "cooperativity"})
        base = PhysicalParams(**kw)
        g = self.g if self.g is not None else cooperativity_to_g(self.cooperativity, base)
        return base.replace(g=g)


class SweepBlock(_Block):
    parameter: Literal["epsilon_sq", "delta_p", "omega_c"]
    start: Finite
    stop: Finite
    points: Annotated[int, Field(ge=2)]
    mode: Literal["newton", "integrate"] = "newton"

    @model_validator(mode="after")
    def _check(self):
        self.spec()
        return self

    def spec(self) -> SweepSpec:
        return SweepSpec(self.parameter, self.start, self.stop, self.points, self.mode)


class AxisBlock(_Block):
    parameter: Literal["epsilon", "delta_p", "omega_c"]
    start: Finite
    stop: Finite
    points: Annotated[int, Field(ge=1)]

    @model_validator(mode="after")
    def _check(self):
        if self.points == 1 and self.start != self.stop:
            raise ValueError("a one-point axis needs start == stop")
        if self.parameter != "delta_p" and min(self.start, self.stop) < 0:
            raise ValueError(f"{self.parameter} must stay nonnegative")
        return self

    def values(self) -> np.ndarray:
        return np.linspace(self.start, self.stop, self.points)


class ScheduleBlock(_Block):
    target: Literal["delta_p", "omega_c", "epsilon"]
    amplitude: Finite
    center: NonNeg
    fwhm: Positive
    sigma_convention: Literal["paper", "standard"] = "paper"

    def schedule(self, params: PhysicalParams) -> Schedule:
        return Schedule(self.target, getattr(params, self.target), self.amplitude, self.center,
                        self.fwhm, self.sigma_convention)


class SteadyExperiment(_Block):
    type: Literal["steady"]
    all_branches: bool = True


class EvolveExperiment(_Block):
    type: Literal["evolve"]
    t_end: Positive
    dt: Optional[Positive] = None
    initial: Literal["ground", "empty_cavity"] = "ground"
    schedules: list[ScheduleBlock] = []

    @field_validator("schedules")
    @classmethod
    def _distinct_targets(cls, v):
        targets = [s.target for s in v]
        if len(set(targets)) != len(targets):
            raise ValueError("at most one schedule per parameter")
        return v


class SweepExperiment(_Block):
    type: Literal["sweep"]
    sweep: SweepBlock


class GridExperiment(_Block):
    type: Literal["grid"]
    sweep: SweepBlock
    rows: AxisBlock
    cols: AxisBlock
    max_missing_fraction: Annotated[float, Field(ge=0, le=1)] = 0.05

    @model_validator(mode="after")
    def _check(self):
        if self.rows.parameter == self.cols.parameter:
            raise ValueError("rows and cols must scan different parameters")
        swept = "epsilon" if self.sweep.parameter == "epsilon_sq" else self.sweep.parameter
        if swept in (self.rows.parameter, self.cols.parameter):
            raise ValueError(f"grid axis {swept!r} is the swept parameter")
        return self


class ThresholdExperiment(_Block):
    type: Literal["threshold"]
    sweep: SweepBlock
    cooperativities: Annotated[list[NonNeg], Field(min_length=1)]
    width_floor: Optional[NonNeg] = None

    @field_validator("cooperativities")
    @classmethod
    def _sorted(cls, v):
        if any(b < a for a, b in zip(v, v[1:])):
            raise ValueError("cooperativities must be sorted ascending")
        return v


class DetectExperiment(_Block):
    type: Literal["detect"]
    sweep: SweepBlock
    target: Finite
    branch: Literal["upper", "lower"]
    amplitude: Optional[Finite] = None
    relative_amplitude: Optional[Finite] = None
    fwhm: Annotated[list[Positive], Field(min_length=1)]
    center: Positive
    t_end: Optional[Positive] = None
    sigma_convention: Literal["paper", "standard"] = "paper"

    @field_validator("fwhm", mode="before")
    @classmethod
    def _listify(cls, v):
        return v if isinstance(v, (list, tuple)) else [v]

    @field_validator("fwhm")
    @classmethod
    def _ascending(cls, v):
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("fwhm values must be strictly ascending")
        return v

    @model_validator(mode="after")
    def _one_amplitude(self):
        if (self.amplitude is None) == (self.relative_amplitude is None):
            raise ValueError("give exactly one of 'amplitude' and 'relative_amplitude'")
        return self

    def base_value(self) -> float:
        return math.sqrt(self.target) if self.sweep.parameter == "epsilon_sq" else self.target

    def absolute_amplitude(self) -> float:
        if self.amplitude is not None:
            return self.amplitude
        return self.relative_amplitude * self.base_value()


Experiment = Annotated[
    Union[SteadyExperiment, EvolveExperiment, SweepExperiment, GridExperiment, ThresholdExperiment,
          DetectExperiment],
    Field(discriminator="type"),
]


class NumericsBlock(_Block):
    gap_threshold: Positive = _SWEEP_DEFAULTS.gap_threshold
    jump_factor: Positive = _SWEEP_DEFAULTS.jump_factor
    jump_rel: Positive = _SWEEP_DEFAULTS.jump_rel
    n_floor: Positive = _SWEEP_DEFAULTS.n_floor
    steady_tol: Positive = _SWEEP_DEFAULTS.steady_tol
    t_max: Positive = _SWEEP_DEFAULTS.t_max
    t_max_extended: Positive = _SWEEP_DEFAULTS.t_max_extended
    newton_tol: Positive = _SWEEP_DEFAULTS.newton_tol
    verify_change: Positive = _SWEEP_DEFAULTS.verify_change
    max_gap_fraction: Annotated[float, Field(ge=0, le=1)] = _SWEEP_DEFAULTS.max_gap_fraction
    latch_threshold: Positive = LATCH_THRESHOLD
    window: Positive = WINDOW
    sample_dt: Positive = 0.1
    pulse_samples: Annotated[int, Field(ge=2)] = 401

    def sweep_numerics(self) -> SweepNumerics:
        names = {f.name for f in fields(SweepNumerics)}
        return SweepNumerics(**{k: v for k, v in self.model_dump().items() if k in names})


class OutputBlock(_Block):
    dir: str = "."
    stem: Annotated[str, Field(pattern=r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")] = "run"


class _Document(_Block):
    physical: PhysicalBlock
    experiment: Experiment
    numerics: NumericsBlock = NumericsBlock()
    output: OutputBlock = OutputBlock()


@dataclass(frozen=True)
class ExperimentConfig:
    params: PhysicalParams
    physical: PhysicalBlock
    experiment: Any
    numerics: NumericsBlock
    output: OutputBlock

    @property
    def kind(self) -> str:
        return self.experiment.type

    def resolved(self) -> dict:
        """Fully explicit document: g resolved, every default written out.

        Feeding this back to ``parse_config`` gives an identical config.
        """
        phys = self.params.to_dict()
        phys.pop("kappa")
        return {
            "physical": phys,
            "experiment": self.experiment.model_dump(mode="json"),
            "numerics": self.numerics.model_dump(mode="json"),
            "output": self.output.model_dump(mode="json"),
        }

    def detector_spec(self, fwhm: float) -> DetectorSpec:
        e, num = self.experiment, self.numerics
        return DetectorSpec(
            params=self.params, sweep=e.sweep.spec(), target=e.target, branch=e.branch,
            amplitude=e.absolute_amplitude(), fwhm=fwhm, center=e.center, t_end=e.t_end,
            sigma_convention=e.sigma_convention, dt=num.sample_dt, pulse_samples=num.pulse_samples,
            latch_threshold=num.latch_threshold, n_floor=num.n_floor, window=num.window,
            numerics=num.sweep_numerics(),
        )


def _strip_tag(loc) -> tuple:
    # pydantic inserts the union tag right after "experiment"
    loc = tuple(loc)
    if len(loc) >= 2 and loc[0] == "experiment" and loc[1] in EXPERIMENTS:
        return loc[:1] + loc[2:]
    return loc


def _path(loc) -> str:
    return ".".join(str(p) for p in _strip_tag(loc)) or "<root>"


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        msg = e["msg"].removeprefix("Value error, ")
        if e["type"] == "extra_forbidden":
            msg = "unknown key"
            if e["loc"] and e["loc"][-1] == "kappa":
                msg = "unknown key (kappa is the unit of all rates and is fixed to 1)"
        lines.append(f"{_path(e['loc'])}: {msg}")
    return "; ".join(lines)


def _drop(data, loc):
    *parents, key = _strip_tag(loc)
    node = data
    for p in parents:
        node = node[p]
    node.pop(key, None)


def parse_config(data: Any, strict: bool = True, experiment: str | None = None) -> ExperimentConfig:
    """Validate a config document (YAML text or an already-loaded mapping).

    ``experiment`` names the subcommand; it fills in a missing
    ``experiment.type`` and must match a given one.
    """
    if isinstance(data, str):
        try:
            data = yaml.safe_load(data)
        except yaml.YAMLError as exc:
            raise ConfigError(f"<root>: not valid YAML ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError("<root>: config must be a mapping with physical/experiment sections")
    data = copy.deepcopy(data)
    exp = data.get("experiment")
    if experiment is not None:
        if experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment.type: unknown experiment {experiment!r}")
        if isinstance(exp, dict):
            given = exp.setdefault("type", experiment)
            if given != experiment:
                raise ConfigError(f"experiment.type: config is for {given!r} but the command is {experiment!r}")
    while True:
        try:
            doc = _Document.model_validate(data)
            break
        except ValidationError as err:
            extra = [e for e in err.errors() if e["type"] == "extra_forbidden"]
            if strict or not extra or len(extra) != len(err.errors()):
                raise ConfigError(_format(err)) from None
            for e in extra:
                log.warning("ignoring unknown key %s", _path(e["loc"]))
                _drop(data, e["loc"])
    try:
        params = doc.physical.resolve()
    except ValueError as exc:
        raise ConfigError(f"physical: {exc}") from None
    return ExperimentConfig(params, doc.physical, doc.experiment, doc.numerics, doc.output)


def load_config(path, strict: bool = True, experiment: str | None = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"<file>: cannot read {path}: {exc.strerror}") from None
    return parse_config(text, strict=strict, experiment=experiment)
