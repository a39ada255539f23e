"""YAML experiment configuration with strict keys.

Layout::

    seed: 0
    budget: null            # enumeration budget; TILTLAB_BUDGET wins when set
    out: runs/demo
    scenario: {vocab, depth, s, w_S, M_h, M_l, beta, gamma, m}
    schedule: {T, lambda | lambdas, alpha, reference, modulator}
    talr: {tau, floor}
    sweep: {lambdas, T, modulators}
    constants: {runs, lambdas, steps, percentile}
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .scenario import SparseShiftScenario
from .talr import TalrConfig
from .tilting import TiltingSchedule
from .tree import DEFAULT_BUDGET


@dataclass
class ScenarioSection:
    vocab: int = 4
    depth: int = 4
    s: float | None = None
    w_S: float | None = None
    M_h: float = 2.0
    M_l: float = 0.05
    beta: float = 0.0
    gamma: float = 0.0
    m: int | None = None


@dataclass
class ScheduleSection:
    T: int = 5
    # one of the two; an explicit list overrides the equal-step pair (T, lambda)
    # and must have length T when both are given
    lam: float | None = 0.05
    lambdas: list | None = None
    alpha: float = 0.01
    reference: str = "uniform"
    modulator: str = "none"


@dataclass
class TalrSection:
    tau: float | str = "dynamic-median"
    floor: float = 0.01


@dataclass
class SweepSection:
    lambdas: list = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.2])
    T: list = field(default_factory=lambda: [1, 5, 20])
    modulators: list = field(default_factory=lambda: ["none", "talr"])


@dataclass
class ConstantsSection:
    runs: int = 50
    lambdas: list = field(default_factory=lambda: [0.01, 0.02, 0.05, 0.1, 0.15, 0.2])
    steps: list = field(default_factory=lambda: [1, 5])
    percentile: float = 99.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    budget: int | None = None
    out: str = "runs/default"
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    talr: TalrSection = field(default_factory=TalrSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    constants: ConstantsSection = field(default_factory=ConstantsSection)

    # ---- derived objects

    def scenario_params(self, seed: int | None = None) -> SparseShiftScenario:
        sc = self.scenario
        return SparseShiftScenario(
            vocab=sc.vocab, depth=sc.depth, s=sc.s, w_S=sc.w_S, M_h=sc.M_h, M_l=sc.M_l,
            beta=sc.beta, gamma=sc.gamma, m=sc.m, alpha=self.schedule.alpha,
            seed=self.seed if seed is None else seed,
        )

    def tilting_schedule(self) -> TiltingSchedule:
        sch = self.schedule
        lams = list(sch.lambdas) if sch.lambdas is not None else [sch.lam] * sch.T
        return TiltingSchedule(tuple(lams), alpha=sch.alpha, reference=sch.reference)

    def talr_config(self) -> TalrConfig:
        return TalrConfig(tau=self.talr.tau, floor=self.talr.floor)

    def resolved_budget(self) -> int:
        raw = os.environ.get("TILTLAB_BUDGET")
        if raw:
            return int(raw)
        return DEFAULT_BUDGET if self.budget is None else int(self.budget)

    # ---- serialization

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"]["lambda"] = d["schedule"].pop("lam")
        return d

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def validate(self) -> "ExperimentConfig":
        try:
            self.scenario_params()
            self.tilting_schedule()
            self.talr_config()
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"{type(exc).__name__}: {exc}") from exc
        sch = self.schedule
        if sch.modulator not in ("none", "talr"):
            raise ConfigError(f"schedule.modulator must be 'none' or 'talr', got {sch.modulator!r}")
        if sch.lambdas is not None and len(sch.lambdas) != sch.T:
            raise ConfigError(f"schedule.lambdas has {len(sch.lambdas)} entries but T={sch.T}")
        if sch.lambdas is None and sch.lam is None:
            raise ConfigError("schedule needs lambda or lambdas")
        sw = self.sweep
        if not sw.lambdas or not sw.T or not sw.modulators:
            raise ConfigError("sweep grids must be nonempty")
        for lam in sw.lambdas:
            if not (0.0 <= float(lam) <= 1.0):
                raise ConfigError(f"sweep lambda {lam} outside [0, 1]")
        for T in sw.T:
            if int(T) < 1:
                raise ConfigError(f"sweep T {T} must be >= 1")
        for mod in sw.modulators:
            if mod not in ("none", "talr"):
                raise ConfigError(f"unknown sweep modulator {mod!r}")
        if self.constants.runs < 1:
            raise ConfigError("constants.runs must be positive")
        if self.budget is not None and int(self.budget) < 1:
            raise ConfigError("budget must be positive")
        return self


_SECTIONS = {
    "scenario": ScenarioSection,
    "schedule": ScheduleSection,
    "talr": TalrSection,
    "sweep": SweepSection,
    "constants": ConstantsSection,
}
_TOP = {"seed", "budget", "out"} | set(_SECTIONS)


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    raw = dict(raw)
    if cls is ScheduleSection and "lambda" in raw:
        raw["lam"] = raw.pop("lambda")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        shown = ["lambda" if u == "lam" else u for u in unknown]
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(shown)}")
    if cls is ScheduleSection and "lambdas" in raw and raw["lambdas"] is not None and "lam" not in raw:
        raw["lam"] = None
    return cls(**raw)


def from_dict(raw: dict | None) -> ExperimentConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(raw) - _TOP)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kw = {k: raw[k] for k in ("seed", "budget", "out") if k in raw}
    for name, cls in _SECTIONS.items():
        kw[name] = _section(cls, raw.get(name), name)
    try:
        cfg = ExperimentConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def loads(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return from_dict(raw)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())
