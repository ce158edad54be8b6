"""Scenario and sweep documents: JSON schema validation, loading and expansion."""

from __future__ import annotations

import copy
import itertools
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import jsonschema

from .schedules import Scheme
from .sim import CommModel
from .workload import Checkpointing, CostModel, ModelConfig, ParallelismConfig, RunConfig

SCENARIO_FORMAT = "pipelab.scenario/1"
SWEEP_FORMAT = "pipelab.sweep/1"
EXCHANGE_MODES = ("off", "on", "early")


class ScenarioError(ValueError):
    """A scenario or sweep document is malformed or inconsistent."""


def load_schema(name: str) -> dict:
    text = resources.files("pipelab").joinpath("data", "schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def _check(doc: Any, name: str):
    try:
        jsonschema.validate(doc, load_schema(name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(x) for x in exc.absolute_path) or "<root>"
        raise ScenarioError(f"{name} document invalid at {where}: {exc.message}") from None


@dataclass(frozen=True)
class CommSpec:
    bandwidth: Optional[float] = None  # bytes per work unit; None means infinite
    latency: float = 0

    def model(self) -> CommModel:
        bw = math.inf if self.bandwidth is None else self.bandwidth
        return CommModel(bandwidth=bw, latency=self.latency)


@dataclass(frozen=True)
class Scenario:
    scheme: Scheme
    model: ModelConfig
    parallelism: ParallelismConfig
    run: RunConfig
    cost: CostModel = CostModel()
    comm: CommSpec = CommSpec()
    exchange: str = "off"
    seed: int = 0
    name: str = ""
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.exchange not in EXCHANGE_MODES:
            raise ScenarioError(f"exchange must be one of {EXCHANGE_MODES}")

    @property
    def sizes(self) -> tuple[int, int, int, int]:
        """(p, m, n, v)."""
        return (self.parallelism.pp, self.run.microbatches, self.run.slices, self.parallelism.stages_per_device)

    @property
    def vocab_mode(self) -> Optional[bool]:
        """Explicit vocab passes are placed when the vocab GEMM costs anything or is distributed."""
        if self.cost.vocab_gemm or self.run.vocab_parallel:
            return self.run.vocab_parallel
        return None

    def to_dict(self) -> dict:
        run = asdict(self.run)
        run["checkpointing"] = self.run.checkpointing.value
        if run["coefficients"] is not None:
            run["coefficients"] = {k: _plain(v) for k, v in sorted(run["coefficients"].items())}
        doc = {
            "format": SCENARIO_FORMAT,
            "name": self.name,
            "description": self.description,
            "scheme": self.scheme.value,
            "model": asdict(self.model),
            "parallelism": asdict(self.parallelism),
            "run": run,
            "cost": {k: _plain(v) for k, v in asdict(self.cost).items()},
            "comm": asdict(self.comm),
            "exchange": self.exchange,
            "seed": self.seed,
        }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        _check(doc, "scenario")
        try:
            run = dict(doc["run"])
            if "checkpointing" in run:
                run["checkpointing"] = Checkpointing(run["checkpointing"])
            return cls(
                scheme=Scheme(doc["scheme"]),
                model=ModelConfig(**doc["model"]),
                parallelism=ParallelismConfig(**doc["parallelism"]),
                run=RunConfig(**run),
                cost=CostModel(**doc.get("cost", {})),
                comm=CommSpec(**doc.get("comm", {})),
                exchange=doc.get("exchange", "off"),
                seed=doc.get("seed", 0),
                name=doc.get("name", ""),
                description=doc.get("description", ""),
            )
        except ScenarioError:
            raise
        except (TypeError, ValueError) as exc:
            raise ScenarioError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _plain(x):
    if isinstance(x, Fraction):
        return int(x) if x.denominator == 1 else float(x)
    return x


def load_scenario(path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from None
    return Scenario.from_dict(doc)


# ----------------------------------------------------------------- overrides and sweeps

# shorthand key -> (section, field)
OVERRIDES = {
    "scheme": (None, "scheme"),
    "exchange": (None, "exchange"),
    "p": ("parallelism", "pp"),
    "v": ("parallelism", "stages_per_device"),
    "m": ("run", "microbatches"),
    "n": ("run", "slices"),
    "seq_len": ("run", "seq_len"),
    "vocab_parallel": ("run", "vocab_parallel"),
    "beta_attn": ("cost", "beta_attn"),
}


def override_doc(doc: dict, **kw) -> dict:
    """Copy of a scenario document with shorthand overrides applied (None values skipped)."""
    out = copy.deepcopy(doc)
    n_per_p = kw.pop("n_per_p", None)
    for key, value in kw.items():
        if value is None:
            continue
        if key not in OVERRIDES:
            raise ScenarioError(f"unknown override {key!r}")
        section, name = OVERRIDES[key]
        (out if section is None else out.setdefault(section, {}))[name] = value
    if n_per_p is not None:
        out.setdefault("run", {})["slices"] = n_per_p * out.get("parallelism", {}).get("pp", 1)
    return out


def apply_overrides(scn: Scenario, **kw) -> Scenario:
    return Scenario.from_dict(override_doc(scn.to_dict(), **kw))


@dataclass(frozen=True)
class SweepPoint:
    index: int
    overrides: dict
    scenario: Optional[Scenario]
    error: str = ""


def expand_sweep(doc: dict) -> list[SweepPoint]:
    """Expand a sweep into points, in a fixed order.

    Grid keys vary in declaration order with the last key fastest.  Explicit
    ``points`` are crossed with the grid (point-major) when both are given.
    Invalid combinations stay in the output as points carrying an error
    message, so results keep one row per grid point.
    """
    _check(doc, "sweep")
    base = doc["base"]
    grid = doc.get("grid") or {}
    keys = list(grid)
    grid_combos = [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]
    points = [dict(pt) for pt in doc.get("points", ())] or [{}]
    combos = [{**pt, **g} for pt in points for g in grid_combos]
    out = []
    for j, ov in enumerate(combos):
        try:
            scn = Scenario.from_dict(override_doc(base, **ov))
            out.append(SweepPoint(j, ov, scn))
        except ScenarioError as exc:
            out.append(SweepPoint(j, ov, None, str(exc)))
    return out


def load_sweep(path) -> list[SweepPoint]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read sweep {path}: {exc}") from None
    return expand_sweep(doc)


def bundled(name: str) -> Path:
    """Path of a scenario or sweep file shipped with the package."""
    path = resources.files("pipelab").joinpath("data", "scenarios", name)
    return Path(str(path))


def bundled_names() -> list[str]:
    root = resources.files("pipelab").joinpath("data", "scenarios")
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))
