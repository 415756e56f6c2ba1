"""Synthetic scenes: random smooth surfaces and their shaded images."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .patch_model import LightVector, _as_light

CONTROL_SIZE = 5


def default_amplitude(output_size) -> float:
    """Control-value range giving surface slopes of order one (8 units at 128 px)."""
    return 8.0 * min(output_size) / 128.0


@dataclass
class SurfaceSpec:
    seed: int = 0
    output_size: tuple = (128, 128)
    amplitude: float | None = None
    control_grid: np.ndarray | None = None

    def __post_init__(self):
        self.output_size = tuple(int(v) for v in self.output_size)
        if self.amplitude is None:
            self.amplitude = default_amplitude(self.output_size)
        if self.control_grid is None:
            rng = np.random.default_rng(self.seed)
            self.control_grid = rng.uniform(-self.amplitude, self.amplitude,
                                            size=(CONTROL_SIZE, CONTROL_SIZE))
        self.control_grid = np.asarray(self.control_grid, dtype=float)

    def describe(self) -> dict:
        return {"seed": self.seed, "output_size": list(self.output_size),
                "amplitude": self.amplitude, "distribution": "uniform",
                "control_grid": self.control_grid.tolist()}


@dataclass
class RenderSpec:
    light: LightVector = field(default_factory=lambda: LightVector.from_elevation(60.0))
    noise_sigma: float = 0.0
    beckmann_roughness: float | None = None
    specular_strength: float = 0.0
    saturation_level: float = 1.0

    def __post_init__(self):
        self.light = _as_light(self.light)
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.beckmann_roughness is not None and not self.beckmann_roughness > 0:
            raise ValueError("beckmann_roughness must be > 0")
        if not self.specular_strength >= 0:
            raise ValueError("specular_strength must be >= 0")

    def describe(self) -> dict:
        d = asdict(self)
        d["light"] = self.light.array.tolist()
        return d


def control_coords(n_out: int) -> np.ndarray:
    return np.linspace(0.0, n_out - 1.0, CONTROL_SIZE)


def _spline_surface(control: np.ndarray, output_size, nu=(0, 0)) -> np.ndarray:
    H, W = output_size
    cy, cx = control_coords(H), control_coords(W)
    # rows first, then columns; natural end conditions on both axes
    along_x = CubicSpline(cx, control, axis=1, bc_type="natural")(np.arange(W), nu[1])
    return CubicSpline(cy, along_x, axis=0, bc_type="natural")(np.arange(H), nu[0])


def random_surface(spec: SurfaceSpec) -> np.ndarray:
    """Natural bicubic spline through the control grid, sampled at every pixel."""
    H, W = spec.output_size
    if H < 16 or W < 16:
        raise ValueError("output size must be at least 16x16")
    return _spline_surface(spec.control_grid, spec.output_size)


def surface_gradient(spec: SurfaceSpec):
    """Analytic spline derivatives (dZ/dx, dZ/dy) at every pixel."""
    return (_spline_surface(spec.control_grid, spec.output_size, (0, 1)),
            _spline_surface(spec.control_grid, spec.output_size, (1, 0)))


def normals_from_depth(Z) -> np.ndarray:
    """Un-normalised normals ``(-dZ/dx, -dZ/dy, 1)``, shape (H, W, 3)."""
    Z = np.asarray(Z, dtype=float)
    if Z.shape[0] < 3 or Z.shape[1] < 3:
        raise ValueError("depth map must be at least 3x3")
    gy, gx = np.gradient(Z)
    return np.stack([-gx, -gy, np.ones_like(Z)], axis=-1)


def beckmann(cos_alpha, roughness: float):
    """Beckmann microfacet distribution for the angle between normal and half vector."""
    c2 = np.clip(cos_alpha, 1e-12, 1.0) ** 2
    tan2 = (1.0 - c2) / c2
    return np.exp(-tan2 / roughness ** 2) / (math.pi * roughness ** 2 * c2 * c2)


def render_components(Z, rs: RenderSpec):
    """Noise-free diffuse and specular images."""
    n = normals_from_depth(Z)
    norm = np.linalg.norm(n, axis=-1)
    l = rs.light.array
    diffuse = np.maximum(n @ l / norm, 0.0)
    specular = np.zeros_like(diffuse)
    if rs.beckmann_roughness is not None and rs.specular_strength > 0:
        half = l / np.linalg.norm(l) + np.array([0.0, 0.0, 1.0])
        half /= np.linalg.norm(half)
        cos_alpha = (n @ half) / norm
        specular = rs.specular_strength * beckmann(cos_alpha, rs.beckmann_roughness)
        specular = np.where(diffuse > 0, specular, 0.0)
    return diffuse, specular


def render_scene(Z, rs: RenderSpec, seed: int = 0):
    """Shaded image and usable-pixel mask; saturated pixels are clamped and masked out."""
    diffuse, specular = render_components(Z, rs)
    raw = diffuse + specular
    if rs.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        raw = raw + rng.normal(0.0, rs.noise_sigma, size=raw.shape)
    saturated = raw > rs.saturation_level
    image = np.where(saturated, rs.saturation_level, raw)
    return image, ~saturated


def saturated_fraction(Z, rs: RenderSpec) -> float:
    diffuse, specular = render_components(Z, rs)
    return float(np.mean(diffuse + specular > rs.saturation_level))


def roughness_for_saturation(Z, rs: RenderSpec, target: float, lo: float = 0.01,
                             hi: float = 2.0, steps: int = 60) -> float:
    """Beckmann roughness giving roughly ``target`` saturated (noise-free) pixels.

    Sharper highlights saturate more pixels near the mirror direction, so the
    saturated fraction is searched over roughness by bisection.
    """
    def frac(m):
        return saturated_fraction(Z, RenderSpec(rs.light, 0.0, m, rs.specular_strength,
                                                rs.saturation_level))

    # saturated fraction is not monotone over the whole range; scan then bisect
    grid = np.geomspace(lo, hi, 80)
    fr = np.array([frac(m) for m in grid])
    above = np.flatnonzero(fr >= target)
    if len(above) == 0:
        return float(grid[int(np.argmax(fr))])
    k = above[-1]
    if k == len(grid) - 1:
        return float(grid[k])
    a, b = grid[k], grid[k + 1]
    for _ in range(steps):
        m = math.sqrt(a * b)
        if frac(m) >= target:
            a = m
        else:
            b = m
    return float(a)


def strength_for_saturation(Z, rs: RenderSpec, target: float, steps: int = 60) -> float:
    """Specular strength giving ``target`` saturated (noise-free) pixels at fixed roughness.

    The saturated fraction is non-decreasing in strength, so plain bisection works.
    """
    if rs.beckmann_roughness is None:
        raise ValueError("a Beckmann roughness is required")
    if not 0 < target < 1:
        raise ValueError("target must be in (0, 1)")

    def frac(k):
        return saturated_fraction(Z, RenderSpec(rs.light, 0.0, rs.beckmann_roughness, k,
                                                rs.saturation_level))

    lo, hi = 0.0, 1.0
    while frac(hi) < target:
        hi *= 2.0
        if hi > 1e6:
            raise ValueError("target saturation unreachable")
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if frac(mid) >= target:
            hi = mid
        else:
            lo = mid
    return float(hi)


def make_scene(seed: int, size=(128, 128), elevation: float = 60.0, noise: float = 0.0,
               roughness: float | None = None, specular_strength: float = 0.0,
               amplitude: float | None = None):
    """Convenience wrapper: (Z, image, mask, surface spec, render spec)."""
    sspec = SurfaceSpec(seed=seed, output_size=size, amplitude=amplitude)
    Z = random_surface(sspec)
    rs = RenderSpec(LightVector.from_elevation(elevation), noise, roughness, specular_strength)
    image, mask = render_scene(Z, rs, seed)
    return Z, image, mask, sspec, rs
