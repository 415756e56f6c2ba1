"""Run configuration: a JSON document whose unknown keys are rejected."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

from .errors import ConfigError
from .patch_model import LightVector
from .proposal_engine import DEFAULT_J, NoiseModel, SolverConfig
from .reconstructor import ReconConfig


@dataclass
class LightConfig:
    vector: list | None = None
    elevation: float = 60.0
    azimuth: float = 0.0
    strength: float = 1.0

    def resolve(self) -> LightVector:
        try:
            if self.vector is not None:
                return LightVector.from_array(self.vector)
            return LightVector.from_elevation(self.elevation, self.azimuth, self.strength)
        except (ValueError, TypeError) as exc:
            raise ConfigError("light", str(exc)) from None


@dataclass
class SceneConfig:
    size: list = field(default_factory=lambda: [128, 128])
    amplitude: float | None = None
    noise_sigma: float = 0.0
    beckmann_roughness: float | None = None
    specular_strength: float = 1.0


@dataclass
class RunConfig:
    light: LightConfig = field(default_factory=LightConfig)
    noise: dict = field(default_factory=lambda: {"sigma_i": 0.01, "sigma_n0_sq": 1e-6})
    J: int = DEFAULT_J
    patch_sizes: list = field(default_factory=lambda: [3, 5, 9, 17])
    reconstruction: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    scene: SceneConfig = field(default_factory=SceneConfig)
    workers: int = 1
    seed: int = 0
    paths: dict = field(default_factory=dict)

    # typed views -----------------------------------------------------------

    def noise_model(self) -> NoiseModel:
        return _build(NoiseModel, self.noise, "noise")

    def solver_config(self) -> SolverConfig:
        return _build(SolverConfig, self.solver, "solver")

    def recon_config(self) -> ReconConfig:
        return _build(ReconConfig, self.reconstruction, "reconstruction")

    def validate(self):
        self.light.resolve()
        self.noise_model()
        self.solver_config()
        self.recon_config()
        if not isinstance(self.J, int) or self.J < 3:
            raise ConfigError("J", "must be an integer >= 3")
        if not self.patch_sizes or any(not isinstance(s, int) or s < 3 or s % 2 == 0
                                       for s in self.patch_sizes):
            raise ConfigError("patch_sizes", "must be odd integers >= 3")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError("workers", "must be an integer >= 1")
        sc = self.scene
        if len(sc.size) != 2 or any(not isinstance(v, int) or v < 16 for v in sc.size):
            raise ConfigError("scene.size", "must be two integers >= 16")
        if not (isinstance(sc.noise_sigma, (int, float)) and math.isfinite(sc.noise_sigma)
                and sc.noise_sigma >= 0):
            raise ConfigError("scene.noise_sigma", "must be finite and >= 0")
        if sc.beckmann_roughness is not None and not sc.beckmann_roughness > 0:
            raise ConfigError("scene.beckmann_roughness", "must be > 0")
        if not sc.specular_strength >= 0:
            raise ConfigError("scene.specular_strength", "must be >= 0")
        return self

    def resolved(self) -> dict:
        """Every setting with defaults expanded."""
        return {
            "light": dataclasses.asdict(self.light),
            "light_vector": self.light.resolve().array.tolist(),
            "noise": dataclasses.asdict(self.noise_model()),
            "J": self.J,
            "patch_sizes": list(self.patch_sizes),
            "reconstruction": self.recon_config().as_dict(),
            "solver": self.solver_config().as_dict(),
            "scene": dataclasses.asdict(self.scene),
            "workers": self.workers,
            "seed": self.seed,
            "paths": dict(self.paths),
        }


def _build(cls, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}", "unknown key")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from None


def _from_section(cls, values, section):
    if not isinstance(values, dict):
        raise ConfigError(section, "must be an object")
    return _build(cls, values, section)


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    kw = dict(d)
    if "light" in kw:
        kw["light"] = _from_section(LightConfig, kw["light"], "light")
    if "scene" in kw:
        kw["scene"] = _from_section(SceneConfig, kw["scene"], "scene")
    for sec, cls in (("noise", NoiseModel), ("solver", SolverConfig),
                     ("reconstruction", ReconConfig)):
        if sec in kw:
            _from_section(cls, kw[sec], sec)
            kw[sec] = dict(kw[sec])
    if "noise" in kw:
        kw["noise"] = {**RunConfig().noise, **kw["noise"]}
    return RunConfig(**kw).validate()
