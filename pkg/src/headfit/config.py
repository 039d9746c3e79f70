"""Run configuration: loss weights, optimizer schedule, resolution, seed and paths."""
from dataclasses import dataclass, field
from pathlib import Path

from . import io
from .engine import FitConfig
from .errors import ValidationError
from .objective import LossWeights


@dataclass
class RunConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: FitConfig = field(default_factory=FitConfig)
    width: int = 128
    height: int = 128
    levels: int = 2
    dilate_facial: bool = False
    seed: int = 0
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError("resolution must be at least 1x1")
        if self.levels < 1:
            raise ValidationError("subdivision levels must be >= 1")
        self.schedule.seed = self.seed

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {"weights", "schedule", "width", "height", "levels", "dilate_facial", "seed", "paths"}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown config keys: {sorted(extra)}")
        weights = LossWeights.from_dict(d.pop("weights", {}))
        schedule = FitConfig.from_dict(d.pop("schedule", {}))
        paths = d.pop("paths", {})
        if not isinstance(paths, dict):
            raise ValidationError("paths must be a JSON object")
        return cls(weights=weights, schedule=schedule, paths=paths, **d)

    @classmethod
    def load(cls, path):
        try:
            data = io.read_json(path)
        except ValueError as exc:
            raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
        cfg = cls.from_dict(data)
        base = Path(path).parent
        cfg.paths = {k: str(base / v) for k, v in cfg.paths.items()}
        return cfg

    def to_dict(self):
        return {"weights": self.weights.to_dict(), "schedule": self.schedule.to_dict(), "width": self.width,
                "height": self.height, "levels": self.levels, "dilate_facial": self.dilate_facial,
                "seed": self.seed, "paths": dict(self.paths)}

    def hash(self):
        # paths do not change results, so they stay out of the hash
        d = self.to_dict()
        d.pop("paths")
        return io.config_hash(d)

    def check_paths(self):
        missing = [f"{k}={v}" for k, v in self.paths.items() if not Path(v).exists()]
        if missing:
            raise ValidationError(f"config paths do not exist: {', '.join(missing)}")


def default_config():
    return RunConfig()
