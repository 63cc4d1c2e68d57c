"""Declarative experiment configuration: YAML files validated against a strict schema."""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

log = logging.getLogger(__name__)


class ConfigError(Exception):
    """Raised with one human-readable line per schema violation."""

    def __init__(self, problems: list[str], source: str = "<config>"):
        self.problems = problems
        self.source = source
        super().__init__("\n".join(f"{source}: {p}" for p in problems))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EnvironmentCfg(_Strict):
    width: int = Field(15, ge=1)
    height: int = Field(15, ge=1)
    discount: float = Field(0.9, ge=0.0, lt=1.0)


class BehaviorCfg(_Strict):
    base: Literal["optimal", "down_left", "uniform"] = "optimal"
    weight: float = Field(0.2, ge=0.0, le=1.0)
    suboptimal_policy: Literal["half_down_half_left", "all_down", "all_left"] = "half_down_half_left"


class DataCfg(_Strict):
    n_trajectories: int = Field(100, ge=1)
    horizon: int = Field(100, ge=1)


class EvalCfg(_Strict):
    transition_source: Literal["oracle", "empirical"] = "oracle"
    n_sweeps: int = Field(0, ge=0)
    tol: float = Field(1e-10, gt=0.0)
    warm_start: Literal["previous_q", "reward_init"] = "reward_init"


class ImprovementCfg(_Strict):
    operator: Literal["behavior_clone", "easy_bcq", "reverse_kl", "exp_weighted"] = "reverse_kl"
    alpha: float = Field(0.1, gt=0.0)
    m_samples: int = Field(5, ge=1)
    tau: float = Field(1.0, gt=0.0)
    weight_clip: float = Field(100.0, gt=0.0)
    bcq_anchor: Literal["previous", "behavior"] = "previous"


class AlgorithmCfg(_Strict):
    variants: list[Literal["one_step", "multi_step", "iterative"]] = ["multi_step"]
    k_multi_step: int = Field(5, ge=1)
    k_iterative: int = Field(500, ge=1)
    eval: EvalCfg = EvalCfg()
    iterative_eval: EvalCfg = EvalCfg(n_sweeps=1, warm_start="previous_q")
    improvement: ImprovementCfg = ImprovementCfg()
    behavior_source: Literal["oracle", "empirical"] = "oracle"
    mixing_rate: float = Field(1.0, gt=0.0, le=1.0)

    @field_validator("variants")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("at least one variant is required")
        return v

    @field_validator("iterative_eval")
    @classmethod
    def _iterative_warm(cls, v):
        if v.warm_start != "previous_q":
            raise ValueError("the iterative variant requires warm_start 'previous_q'")
        return v


class SweepCfg(_Strict):
    grid: list[float]

    @field_validator("grid")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("sweep grid must not be empty")
        return v


class MixtureCfg(_Strict):
    p_grid: list[float] = [0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0]
    size: Optional[int] = Field(None, ge=1)
    random_behavior: Literal["uniform"] = "uniform"
    with_replacement: bool = False

    @field_validator("p_grid")
    @classmethod
    def _probabilities(cls, v):
        if not v or any(not 0.0 <= p <= 1.0 for p in v):
            raise ValueError("p_grid must be a non-empty list of probabilities")
        return v


class DiagnosticsCfg(_Strict):
    weights: Literal["dataset", "visitation"] = "dataset"
    refit_control: bool = True


class OutputCfg(_Strict):
    dir: str = "lab_out"
    tables: bool = True


class ExperimentConfig(_Strict):
    name: str
    experiment: Literal["runs", "mixture_sweep"] = "runs"
    environment: EnvironmentCfg = EnvironmentCfg()
    behavior: BehaviorCfg = BehaviorCfg()
    data: DataCfg = DataCfg()
    algorithm: AlgorithmCfg = AlgorithmCfg()
    sweep: Optional[SweepCfg] = None
    mixture: Optional[MixtureCfg] = None
    diagnostics: DiagnosticsCfg = DiagnosticsCfg()
    seeds: Optional[list[int]] = None
    output: OutputCfg = OutputCfg()

    @model_validator(mode="after")
    def _consistent(self):
        if self.experiment == "mixture_sweep" and self.sweep is None:
            raise ValueError("a mixture_sweep experiment needs a 'sweep' grid for tuning")
        if self.experiment == "mixture_sweep" and self.algorithm.behavior_source != "empirical":
            raise ValueError("mixed datasets have no single true behavior; use behavior_source 'empirical'")
        if self.sweep is not None and self.algorithm.improvement.operator == "behavior_clone":
            raise ValueError("behavior_clone has no hyperparameter to sweep")
        if self.seeds is not None and (not self.seeds or len(set(self.seeds)) != len(self.seeds)):
            raise ValueError("seeds must be a non-empty list of distinct integers")
        return self

    def config_hash(self) -> str:
        """Digest of everything that determines per-seed results (not seeds or output location)."""
        payload = self.model_dump(mode="json", exclude={"seeds", "output"})
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Loading with line references


def _node_line(root, loc) -> int | None:
    """1-based line of the YAML node addressed by a pydantic error location."""
    node, line = root, (root.start_mark.line + 1 if root is not None else None)
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                if key.value == part:
                    node = value
                    line = key.start_mark.line + 1
                    break
            else:
                return line
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
            line = node.start_mark.line + 1
        else:
            return line
    return line


def _format_errors(exc: ValidationError, root) -> list[str]:
    problems = []
    for err in exc.errors():
        loc = tuple(err["loc"])
        where = ".".join(str(p) for p in loc) or "<root>"
        line = _node_line(root, loc) if root is not None else None
        prefix = f"line {line}: " if line else ""
        if err["type"] == "extra_forbidden":
            problems.append(f"{prefix}unknown key '{loc[-1]}' at {where}")
        else:
            problems.append(f"{prefix}{where}: {err['msg']}")
    return problems


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        root = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigError([f"{where}invalid YAML ({getattr(exc, 'problem', exc)})"], source) from None
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a mapping"], source)
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, root), source) from None
    if cfg.seeds is None:
        log.warning("%s: no seeds given; defaulting to seed 0", source)
        cfg = cfg.model_copy(update={"seeds": [0]})
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"file not found: {path}"], str(path))
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def parse_seeds(text: str) -> list[int]:
    """Parse ``"0..19"``, ``"1,4,7"`` or mixtures like ``"0..3,9"`` (ranges inclusive)."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds or len(set(seeds)) != len(seeds):
        raise ValueError(f"seed list {text!r} must be non-empty and free of duplicates")
    return seeds
