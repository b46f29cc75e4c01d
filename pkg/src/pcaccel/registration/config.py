"""Pipeline configuration, JSON round-trip and named presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from ..twostage import ApproxConfig
from .backend import BackendConfig, ErrorInjection
from .solver import DistanceRejection, IcpConfig, RansacRejection


@dataclass(frozen=True)
class KeypointParams:
    curvature_threshold: float = 0.03
    nonmax_radius: float = 0.5

    def __post_init__(self):
        if self.curvature_threshold < 0 or self.nonmax_radius < 0:
            raise ValueError("keypoint parameters must be >= 0")


@dataclass(frozen=True)
class RejectionConfig:
    method: str = "ransac"
    distance_threshold: float = 0.25
    iterations: int = 1000
    inlier_threshold: float = 0.3

    def __post_init__(self):
        if self.method not in ("ransac", "distance"):
            raise ValueError("rejection method must be 'ransac' or 'distance'")

    def build(self, seed: int):
        if self.method == "distance":
            return DistanceRejection(self.distance_threshold)
        return RansacRejection(self.iterations, self.inlier_threshold, seed)


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the seven-stage pipeline. Serialises to nested JSON."""

    normal_radius: float = 0.75
    keypoints: KeypointParams = field(default_factory=KeypointParams)
    descriptor_radius: float = 1.5
    kpce_reciprocal: bool = False
    rejection: RejectionConfig = field(default_factory=RejectionConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    injections: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if not (self.normal_radius > 0 and self.descriptor_radius > 0):
            raise ValueError("radii must be > 0")
        object.__setattr__(self, "injections", tuple(self.injections))
        stages = [inj.stage for inj in self.injections]
        if len(set(stages)) != len(stages):
            raise ValueError("at most one injection per stage")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["injections"] = [inj.to_dict() for inj in self.injections]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "keypoints" in d:
            d["keypoints"] = KeypointParams(**d["keypoints"])
        if "rejection" in d:
            d["rejection"] = RejectionConfig(**d["rejection"])
        if "icp" in d:
            d["icp"] = IcpConfig(**d["icp"])
        if "backend" in d:
            b = dict(d["backend"])
            if "approx" in b:
                b["approx"] = ApproxConfig(**b["approx"])
            d["backend"] = BackendConfig(**b)
        if "injections" in d:
            d["injections"] = tuple(ErrorInjection.from_dict(x) for x in d["injections"] or ())
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    def with_backend(self, **kw) -> "PipelineConfig":
        return replace(self, backend=replace(self.backend, **kw))

    def with_injections(self, *injections) -> "PipelineConfig":
        return replace(self, injections=tuple(injections))


# Named presets differ in the normal-estimation radius; everything else is shared.
PRESETS = {
    "dp4-like": PipelineConfig(normal_radius=0.30),
    "dp7-like": PipelineConfig(normal_radius=0.75),
}


def preset(name: str) -> PipelineConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
