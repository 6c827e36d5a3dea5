"""experiment_config.py
Declarative description of one experiment run, loaded from a single JSON document.

Every section is validated on load; unknown keys anywhere are rejected with a ConfigError.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from typing import Dict, List, Union

from common import Config, ConfigError, DpslError
from moe import MoEConfig
from optim import AdamConfig
from shaping import ShapingConfig
from upcycle import UpcycleConfig

KINDS = ("shape-toy", "router-sim", "upcycle-check")
TASKS = ("none", "regression")
REGULARIZERS = ("none", "dpsl", "load-balance", "z-loss", "deepseek")

# Weights used when a regularizer entry does not give one. The dpsl weight multiplies shaping.lambda.
DEFAULT_REGULARIZER_WEIGHTS = {"none": 0.0, "dpsl": 1.0, "load-balance": 0.01, "z-loss": 0.001, "deepseek": 1.0}
DEFAULT_DEEPSEEK_RATE = 0.001

# Defaults that differ between experiment kinds.
KIND_DEFAULTS = {
    "shape-toy": {"steps": 100, "lr": 0.1},
    "router-sim": {"steps": 300, "lr": 2e-3},
    "upcycle-check": {"steps": 1, "lr": 0.0},
}


@dataclass
class RegularizerSpec:
    """One entry of the regularizer list."""

    name: str
    weight: float
    update_rate: float = DEFAULT_DEEPSEEK_RATE

    KEYS = ("name", "weight", "update_rate")

    @classmethod
    def from_dict(cls, data: Union[dict, str]) -> RegularizerSpec:
        if isinstance(data, str):
            data = {"name": data}
        if not isinstance(data, dict) or "name" not in data:
            raise ConfigError(f"A regularizer needs at least a name, got {data}.")
        unknown = sorted(set(data) - set(cls.KEYS))
        if unknown:
            raise ConfigError(f"Unknown key(s) in regularizer: {', '.join(unknown)}.")
        name = data["name"]
        if name not in REGULARIZERS:
            raise ConfigError(f"Unknown regularizer '{name}', expected one of {REGULARIZERS}.")
        weight = float(data.get("weight", DEFAULT_REGULARIZER_WEIGHTS[name]))
        rate = float(data.get("update_rate", DEFAULT_DEEPSEEK_RATE))
        if weight < 0 or rate <= 0:
            raise ConfigError(f"Regularizer '{name}' needs weight >= 0 and update_rate > 0.")
        return cls(name, weight, rate)

    def as_dict(self) -> dict:
        return {"name": self.name, "weight": self.weight, "update_rate": self.update_rate}


@dataclass
class SourceSpec:
    """A data source: its tag, how many points it contributes and, for router-sim, its feature clusters."""

    tag: str
    count: int
    clusters: int = 4
    center_scale: float = 1.0
    spread: float = 0.5

    KEYS = ("tag", "count", "clusters", "center_scale", "spread")

    @classmethod
    def from_dict(cls, data: dict) -> SourceSpec:
        if not isinstance(data, dict) or "tag" not in data or "count" not in data:
            raise ConfigError(f"A source needs a tag and a count, got {data}.")
        unknown = sorted(set(data) - set(cls.KEYS))
        if unknown:
            raise ConfigError(f"Unknown key(s) in source '{data['tag']}': {', '.join(unknown)}.")
        source = cls(
            str(data["tag"]),
            int(data["count"]),
            int(data.get("clusters", 4)),
            float(data.get("center_scale", 1.0)),
            float(data.get("spread", 0.5)),
        )
        if source.count < 1 or source.clusters < 1 or source.center_scale < 0 or source.spread < 0:
            raise ConfigError(f"Source '{source.tag}' has an invalid count, cluster count or scale.")
        return source

    def as_dict(self) -> dict:
        return {
            "tag": self.tag,
            "count": self.count,
            "clusters": self.clusters,
            "center_scale": self.center_scale,
            "spread": self.spread,
        }


class ExperimentConfig(Config):
    """Everything needed to reproduce one run."""

    DEFAULTS = {
        "kind": "shape-toy",
        "seed": 0,
        "steps": None,
        "lr": None,
        "output_dir": "results",
        "sources": [],
        "regularizers": [],
        "regularizer_steps": None,
        "task": "none",
        "init_scale": 0.1,
        "hist_bins": 20,
        "log_every": 10,
        "shaping": {},
        "moe": {},
        "upcycle": {},
        "adam": {},
    }

    def __init__(self) -> None:
        """Initialises the config with the shape-toy defaults."""
        self.kind = "shape-toy"
        self.seed = 0
        self.steps = KIND_DEFAULTS["shape-toy"]["steps"]
        self.lr = KIND_DEFAULTS["shape-toy"]["lr"]
        self.output_dir = "results"
        self.sources: List[SourceSpec] = []
        self.regularizers: List[RegularizerSpec] = []
        self.regularizer_steps: Union[int, None] = None
        self.task = "none"
        self.init_scale = 0.1
        self.hist_bins = 20
        self.log_every = 10
        self.shaping = ShapingConfig()
        self.moe = MoEConfig()
        self.upcycle = UpcycleConfig(self.moe.n_experts)
        self.adam = AdamConfig()

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        conf = cls()
        conf.load_dict(data)
        return conf

    @classmethod
    def from_file(cls, filename: str) -> ExperimentConfig:
        conf = cls()
        conf.load_file(filename)
        return conf

    def load_dict(self, data: dict) -> None:
        """Loads and validates a whole experiment document.

        Args:
            data (dict): The parsed JSON document.

        Raises:
            ConfigError: If anything is missing, unknown or out of range.
        """
        data = self.merged(data, "experiment")
        if data["kind"] not in KINDS:
            raise ConfigError(f"Unknown experiment kind '{data['kind']}', expected one of {KINDS}.")
        self.kind = data["kind"]
        kind_defaults = KIND_DEFAULTS[self.kind]
        try:
            self.seed = int(data["seed"])
            self.steps = int(kind_defaults["steps"] if data["steps"] is None else data["steps"])
            self.lr = float(kind_defaults["lr"] if data["lr"] is None else data["lr"])
            self.output_dir = str(data["output_dir"])
            self.regularizer_steps = None if data["regularizer_steps"] is None else int(data["regularizer_steps"])
            self.init_scale = float(data["init_scale"])
            self.hist_bins = int(data["hist_bins"])
            self.log_every = int(data["log_every"])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid value in experiment config: {e}") from e
        if not isinstance(data["sources"], list) or not isinstance(data["regularizers"], list):
            raise ConfigError("sources and regularizers must be lists.")
        self.sources = [SourceSpec.from_dict(s) for s in data["sources"]]
        self.regularizers = [RegularizerSpec.from_dict(r) for r in data["regularizers"]]
        self.task = data["task"]

        try:
            self.shaping = ShapingConfig.from_dict(data["shaping"])
            self.moe = MoEConfig.from_dict(data["moe"])
            self.upcycle = UpcycleConfig.from_dict(data["upcycle"], self.moe.n_experts, self.seed)
            self.adam = AdamConfig.from_dict(data["adam"])
        except ConfigError:
            raise
        except (DpslError, TypeError) as e:
            raise ConfigError(str(e)) from e
        self.validate()

    def load_file(self, filename: str) -> None:
        """Loads a JSON file as the config.

        Args:
            filename (str): The filename.

        Raises:
            ConfigError: If the file is not valid JSON or not a valid config.
        """
        try:
            with open(filename, "r") as file:
                data = json.load(file)
        except json.JSONDecodeError as e:
            raise ConfigError(f"'{filename}' is not valid JSON: {e}") from e
        except OSError as e:
            raise OSError(f"Could not read config '{filename}': {e}") from e
        self.load_dict(data)

    def validate(self) -> None:
        """Checks the cross-field constraints.

        Raises:
            ConfigError: If the config cannot be run.
        """
        if self.kind not in KINDS:
            raise ConfigError(f"Unknown experiment kind '{self.kind}'.")
        if self.steps < 1:
            raise ConfigError(f"steps must be at least 1, got {self.steps}.")
        if self.task not in TASKS:
            raise ConfigError(f"Unknown task '{self.task}', expected one of {TASKS}.")
        if self.regularizer_steps is not None and self.regularizer_steps < 0:
            raise ConfigError("regularizer_steps must be non-negative.")
        if self.init_scale < 0 or self.hist_bins < 1 or self.log_every < 1:
            raise ConfigError("init_scale must be >= 0 and hist_bins, log_every >= 1.")
        names = [r.name for r in self.regularizers]
        if len(set(names)) != len(names):
            raise ConfigError(f"Each regularizer may only be listed once, got {names}.")
        tags = [s.tag for s in self.sources]
        if len(set(tags)) != len(tags):
            raise ConfigError(f"Source tags must be unique, got {tags}.")
        if self.kind in ("shape-toy", "router-sim") and not self.sources:
            raise ConfigError(f"A {self.kind} run needs at least one source.")
        if self.kind == "shape-toy":
            others = [name for name in names if name != "dpsl"]
            if others:
                raise ConfigError(f"shape-toy only trains the shaping loss, remove {others} from regularizers.")
            for tag in tags:
                self.shaping.prior_for(tag)
            if len({self.shaping.prior_for(t).K for t in tags}) > 1:
                raise ConfigError("All shape-toy priors must have the same number of categories.")
        if self.kind == "router-sim" and self.regularizer("dpsl") is not None:
            for tag in tags:
                if self.shaping.prior_for(tag).K != self.moe.n_experts:
                    raise ConfigError(f"The prior for '{tag}' does not have {self.moe.n_experts} components.")

    def regularizer(self, name: str) -> Union[RegularizerSpec, None]:
        """The entry for a regularizer, or None if it is not listed."""
        for reg in self.regularizers:
            if reg.name == name:
                return reg
        return None

    def regularizer_active(self, step: int) -> bool:
        """Whether regularizers apply at the given (0-indexed) step."""
        return self.regularizer_steps is None or step < self.regularizer_steps

    def with_overrides(self, **overrides) -> ExperimentConfig:
        """Deep copy with some top-level attributes replaced (e.g. seed or output_dir)."""
        conf = copy.deepcopy(self)
        for key, value in overrides.items():
            if value is None:
                continue
            if not hasattr(conf, key):
                raise ConfigError(f"Unknown experiment setting '{key}'.")
            setattr(conf, key, value)
        if "seed" in overrides and overrides["seed"] is not None:
            conf.upcycle.seed = conf.seed
        return conf

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "steps": self.steps,
            "lr": self.lr,
            "output_dir": self.output_dir,
            "sources": [s.as_dict() for s in self.sources],
            "regularizers": [r.as_dict() for r in self.regularizers],
            "regularizer_steps": self.regularizer_steps,
            "task": self.task,
            "init_scale": self.init_scale,
            "hist_bins": self.hist_bins,
            "log_every": self.log_every,
            "shaping": self.shaping.as_dict(),
            "moe": self.moe.as_dict(),
            "upcycle": self.upcycle.as_dict(),
            "adam": self.adam.as_dict(),
        }

    @classmethod
    def full_schema(cls) -> Dict[str, dict]:
        """Accepted keys and defaults of every section, as echoed into report.json."""
        schema = cls.schema()
        schema["shaping"] = ShapingConfig.schema()
        schema["moe"] = MoEConfig.schema()
        schema["upcycle"] = UpcycleConfig.schema()
        schema["adam"] = AdamConfig.schema()
        schema["sources"] = {key: None for key in SourceSpec.KEYS}
        schema["regularizers"] = {key: None for key in RegularizerSpec.KEYS}
        return schema
