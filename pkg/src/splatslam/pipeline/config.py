"""Run configuration: one dataclass per stage, loaded from a YAML file with
one section per stage. Unknown keys are rejected."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from ..loopclosure import LoopConfig
from ..mapping import MappingConfig
from ..tracking import TrackingConfig


@dataclass
class GraphConfig:
    max_iters: int = 100
    lambda_init: float = 1e-4
    tol: float = 1e-10
    odometry_weight: float = 1e2
    rotation_factor: float = 2.0


@dataclass
class MergeConfig:
    # joint map refinement after re-anchoring, per keyframe of all agents; 0 disables
    map_refine_iters_per_keyframe: int = 5

    def __post_init__(self):
        if self.map_refine_iters_per_keyframe < 0:
            raise ValueError("map_refine_iters_per_keyframe must be >= 0")


@dataclass
class SlamConfig:
    mapping: MappingConfig = field(default_factory=MappingConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    voxel_eval: float = 0.0

    def __post_init__(self):
        # the tracking loss reuses the mapping loss settings
        self.tracking.loss = self.mapping

    @classmethod
    def from_dict(cls, data: dict | None) -> "SlamConfig":
        data = dict(data or {})
        sections = {"mapping": MappingConfig, "tracking": TrackingConfig, "loop": LoopConfig, "graph": GraphConfig, "merge": MergeConfig}
        unknown = set(data) - set(sections)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        built = {}
        for name, kind in sections.items():
            vals = dict(data.get(name) or {})
            known = {f.name for f in fields(kind)} - {"loss"}
            bad = set(vals) - known
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            if name == "mapping" and "theta_max_deg" in vals:
                raise ValueError("give theta_max in radians")
            built[name] = kind(**vals)
        return cls(**built)

    @classmethod
    def from_file(cls, path) -> "SlamConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def to_dict(self) -> dict:
        out = {}
        for name in ("mapping", "tracking", "loop", "graph", "merge"):
            d = asdict(getattr(self, name))
            d.pop("loss", None)
            out[name] = {k: (float(v) if isinstance(v, np.floating) else v) for k, v in d.items()}
        return out
