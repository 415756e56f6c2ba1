"""Per-patch inference of quadratic shape proposals along the angle manifold.

For each sampled orientation angle the best-fitting quadratic patch is found
by damped nonlinear least squares over ``(a1, a2, a3, r)``, with ``(a4, a5)``
tied to the angle.  Each proposal is scored by the negative log-likelihood of
the observed intensities under additive noise plus a shape-dependent term.
"""
from __future__ import annotations

import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _lm
from .errors import (
    DegenerateLight,
    InfeasibleTheta,
    NoFeasibleTheta,
    TooFewPixels,
    ViewAlignedLight,
    ZeroVariance,
)
from .patch_model import IntensityPatch, LightVector, PatchGrid, QuadShape, _as_light, _as_shape

DEFAULT_J = 21
CHUNK_PATCHES = 128


@dataclass(frozen=True)
class NoiseModel:
    sigma_i: float = 0.01
    sigma_n0_sq: float = 1e-6

    def __post_init__(self):
        if not (math.isfinite(self.sigma_i) and self.sigma_i >= 0):
            raise ValueError("sigma_i must be finite and >= 0")
        if not (math.isfinite(self.sigma_n0_sq) and self.sigma_n0_sq > 0):
            raise ValueError("sigma_n0_sq must be finite and > 0")


@dataclass(frozen=True)
class SolverConfig:
    """Constants of the per-angle fit.  All of them are written to output metadata."""

    max_iter: int = 200
    step_tol: float = 1e-10
    rel_tol: float = 1e-12
    mu0: float = 1e-3
    mu_up: float = 10.0
    mu_down: float = 0.1
    mu_min: float = 1e-12
    mu_max: float = 1e12
    r_min: float = 1e-6
    probe: int = 720
    bisect_steps: int = 40
    center_tol: float = 1e-6
    min_valid_fraction: float = 0.6
    # extra curvature starts +-c*(1, 1, 0) and +-c*(1, -1, 0) on (a1, a2, a3),
    # c = start_curvature / patch half-width; 0 keeps only the flat start
    start_curvature: float = 0.2
    # iterations an extra start gets before it must beat the best SSE so far
    start_probe_iter: int = 15

    def as_dict(self):
        return asdict(self)

    def starts(self, xs, ys) -> np.ndarray:
        """Curvature offsets tried for every fit; the flat start comes first."""
        if self.start_curvature == 0:
            return np.zeros((1, 3))
        h = max(float(np.max(np.abs(xs))), float(np.max(np.abs(ys))), 1.0)
        c = self.start_curvature / h
        return np.array([[0.0, 0.0, 0.0], [c, c, 0.0], [-c, -c, 0.0], [c, -c, 0.0], [-c, c, 0.0]])

    def kernel_args(self):
        return (self.r_min, self.max_iter, self.step_tol, self.rel_tol, self.mu0,
                self.mu_up, self.mu_down, self.mu_min, self.mu_max)


@dataclass
class ThetaGrid:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    @property
    def J(self) -> int:
        return len(self.values)

    @classmethod
    def uniform(cls, J: int) -> "ThetaGrid":
        return cls(-math.pi + 2 * math.pi * np.arange(1, J + 1) / J)


@dataclass
class Proposal:
    theta: float
    shape: QuadShape
    residual_sse: float
    cost: float | None = None
    status: int | None = None       # solver termination code


@dataclass
class ProposalSet:
    proposals: list
    patch_size: int
    patch_origin: tuple = (0, 0)
    dummy_cost: float | None = None

    @property
    def costs(self) -> np.ndarray:
        return np.array([p.cost for p in self.proposals])

    @property
    def thetas(self) -> np.ndarray:
        return np.array([p.theta for p in self.proposals])

    def shapes(self) -> np.ndarray:
        return np.array([p.shape.array for p in self.proposals])


# ---------------------------------------------------------------------------
# angle geometry

def _require_planar_light(l: LightVector):
    if l.lx == 0.0 and l.ly == 0.0:
        raise DegenerateLight("light planar component is zero")


def _directions(theta, l: LightVector):
    c = np.cos(theta)
    s = np.sin(theta)
    dx = -(l.lx / l.lz) * c + l.ly * s
    dy = -(l.ly / l.lz) * c - l.lx * s
    return dx, dy


def reparam_a45(theta: float, r: float, l) -> tuple:
    """Linear coefficients of a patch whose centre normal sits at (theta, r)."""
    l = _as_light(l)
    dx, dy = _directions(theta, l)
    return float(-l.lx / l.lz - r * dx), float(-l.ly / l.lz - r * dy)


def _center_roots(theta, intensity, l: LightVector):
    """Both candidate roots (nan where absent) of the centre-conic equation.

    Arrays broadcast over ``theta`` and ``intensity``; a root is kept when it is
    non-negative and puts the centre normal on the lit side.
    """
    theta = np.asarray(theta, dtype=float)
    intensity = np.asarray(intensity, dtype=float)
    s = l.planar_norm_sq
    K = s + l.lz * l.lz
    c = np.cos(theta)
    sn = np.sin(theta)
    i2 = intensity * intensity
    gap = K - i2
    gap = np.where((gap < 0) & (gap > -1e-12 * K), 0.0, gap)
    qa = s * s * c * c - i2 * s * (c * c + l.lz * l.lz * sn * sn)
    qb = -2.0 * s * c * gap
    qc = K * gap
    disc = qb * qb - 4.0 * qa * qc
    disc = np.where((disc < 0) & (disc > -1e-12 * (qb * qb + np.abs(4 * qa * qc))), 0.0, disc)
    with np.errstate(invalid="ignore", divide="ignore"):
        sq = np.sqrt(disc)
        # numerically stable pair; falls back to the linear root when qa ~ 0
        qq = -0.5 * (qb + np.where(qb >= 0, sq, -sq))
        r1 = np.where(qa != 0, qq / qa, np.where(qb != 0, -qc / qb, np.nan))
        r2 = np.where(qq != 0, qc / qq, np.where(qa != 0, -qb / qa, np.nan))
    roots = np.stack(np.broadcast_arrays(r1, r2), axis=-1)
    roots = np.where(np.isfinite(roots) & (roots > -1e-12), np.maximum(roots, 0.0), np.nan)
    lit = (K - roots * s * c[..., None]) > 0
    bad = (disc < 0) | (gap < 0)
    roots = np.where(lit & ~bad[..., None], roots, np.nan)
    return np.sort(roots, axis=-1)


def solve_center_r(theta: float, I_center: float, l) -> list:
    """Non-negative ``r`` placing the centre normal on the conic of ``I_center``."""
    l = _as_light(l)
    _require_planar_light(l)
    if not I_center > 0:
        raise ValueError("centre intensity must be positive")
    roots = _center_roots(theta, I_center, l)
    out = []
    for r in roots[~np.isnan(roots)]:
        if not any(abs(r - o) <= 1e-12 * max(1.0, abs(o)) for o in out):
            out.append(float(r))
    return out


def _smallest_root(theta, intensity, l):
    """Smallest valid root, ``inf`` where there is none."""
    roots = _center_roots(theta, intensity, l)
    return np.min(np.where(np.isnan(roots), np.inf, roots), axis=-1)


def _feasible(theta, intensity, l):
    return np.any(~np.isnan(_center_roots(theta, intensity, l)), axis=-1)


def _largest_run(flags: np.ndarray):
    """(start, length) of the longest circular run of True values."""
    n = len(flags)
    best = (0, 0)
    start = int(np.flatnonzero(~flags)[0]) + 1
    i = 0
    while i < n:
        k = (start + i) % n
        if flags[k]:
            length = 0
            while length < n and flags[(k + length) % n]:
                length += 1
            if length > best[1]:
                best = (k, length)
            i += length
        else:
            i += 1
    return best


def _theta_grids(center: np.ndarray, l: LightVector, J: int, solver: SolverConfig,
                 strict: bool = True) -> np.ndarray:
    """Angle samples for each centre intensity, shape (K, J).

    ``nan`` centre intensities (masked or dark centres) get the full circle.
    With ``strict=False`` over-bright centres are clamped to the light
    magnitude and centres with no feasible angle fall back to the full circle.
    """
    center = np.asarray(center, dtype=float)
    K = len(center)
    full = ThetaGrid.uniform(J).values
    out = np.tile(full, (K, 1))
    usable = np.isfinite(center) & (center > 0)
    norm = l.norm
    too_bright = usable & (center > norm + solver.center_tol)
    if strict and np.any(too_bright):
        raise NoFeasibleTheta(
            f"centre intensity {center[too_bright][0]:.6g} exceeds light magnitude {norm:.6g}")
    ic = np.where(usable, np.minimum(center, norm), np.nan)
    probe = -math.pi + 2 * math.pi * np.arange(1, solver.probe + 1) / solver.probe
    step = 2 * math.pi / solver.probe
    for k in np.flatnonzero(usable):
        flags = _feasible(probe, ic[k], l)
        if flags.all():
            continue
        if not flags.any():
            if not strict:
                continue
            raise NoFeasibleTheta(f"no feasible angle for centre intensity {ic[k]:.6g}")
        s0, length = _largest_run(flags)
        lo_in = probe[s0]
        hi_in = probe[s0] + (length - 1) * step
        lo_out, hi_out = lo_in - step, hi_in + step
        for _ in range(solver.bisect_steps):
            mid = 0.5 * (lo_in + lo_out)
            if _feasible(mid, ic[k], l):
                lo_in = mid
            else:
                lo_out = mid
            mid = 0.5 * (hi_in + hi_out)
            if _feasible(mid, ic[k], l):
                hi_in = mid
            else:
                hi_out = mid
        vals = lo_in + (hi_in - lo_in) * (np.arange(1, J + 1) - 0.5) / J
        vals = np.where(vals > math.pi, vals - 2 * math.pi, vals)
        vals = np.where(vals <= -math.pi, vals + 2 * math.pi, vals)
        out[k] = np.sort(vals)
    return out


def theta_grid_for_patch(patch: IntensityPatch, l, J: int = DEFAULT_J,
                         solver: SolverConfig = SolverConfig()) -> ThetaGrid:
    if J < 3:
        raise ValueError("J must be at least 3")
    l = _as_light(l)
    _require_planar_light(l)
    ic = patch.center_intensity()
    return ThetaGrid(_theta_grids(np.array([np.nan if ic is None else ic]), l, J, solver)[0])


def _initial_r(thetas: np.ndarray, center: np.ndarray, fallback: np.ndarray,
               l: LightVector) -> np.ndarray:
    """Smallest feasible root per (patch, angle); falls back to the mean intensity, then 1."""
    norm = l.norm
    ic = np.where(np.isfinite(center) & (center > 0), np.minimum(center, norm), np.nan)
    with np.errstate(invalid="ignore"):
        r0 = _smallest_root(thetas, ic[:, None], l)
        alt = _smallest_root(thetas, np.minimum(fallback, norm)[:, None], l)
    r0 = np.where(np.isfinite(r0), r0, alt)
    return np.where(np.isfinite(r0), r0, 1.0)


# ---------------------------------------------------------------------------
# single-patch operations

def _grid_arrays(grid: PatchGrid):
    return np.ascontiguousarray(grid.x), np.ascontiguousarray(grid.y)


def lm_jacobian(params, patch: IntensityPatch, l, theta: float) -> np.ndarray:
    """Derivatives of the model intensity w.r.t. ``(a1, a2, a3, r)``, shape (N, 4)."""
    l = _as_light(l)
    xs, ys = _grid_arrays(patch.grid)
    dx, dy = _directions(theta, l)
    out_i = np.empty(len(xs))
    out_j = np.empty((len(xs), 4))
    _lm.model_rows(np.asarray(params, dtype=float), xs, ys, l.lx, l.ly, l.lz,
                   -l.lx / l.lz, -l.ly / l.lz, float(dx), float(dy), out_i, out_j)
    return out_j


def model_intensity(params, grid: PatchGrid, l, theta: float) -> np.ndarray:
    l = _as_light(l)
    xs, ys = _grid_arrays(grid)
    dx, dy = _directions(theta, l)
    out_i = np.empty(len(xs))
    out_j = np.empty((len(xs), 4))
    _lm.model_rows(np.asarray(params, dtype=float), xs, ys, l.lx, l.ly, l.lz,
                   -l.lx / l.lz, -l.ly / l.lz, float(dx), float(dy), out_i, out_j)
    return out_i


def params_to_shape(params, theta: float, l) -> QuadShape:
    a4, a5 = reparam_a45(theta, params[3], l)
    return QuadShape(float(params[0]), float(params[1]), float(params[2]), a4, a5)


def sse_of_params(params, patch: IntensityPatch, l, theta: float) -> float:
    pred = model_intensity(params, patch.grid, l, theta)
    res = (patch.intensities - pred)[patch.mask]
    return float(res @ res)


def fit_proposal(patch: IntensityPatch, l, theta: float, init=None,
                 solver: SolverConfig = SolverConfig()) -> Proposal:
    l = _as_light(l)
    _require_planar_light(l)
    if patch.n_valid < 5:
        raise TooFewPixels(f"{patch.n_valid} usable pixels; at least 5 required")
    xs, ys = _grid_arrays(patch.grid)
    if init is None:
        ic = patch.center_intensity()
        if ic is None or ic <= 0:
            mean_i = np.array([patch.intensities[patch.mask].mean()])
            r0 = float(_initial_r(np.array([[theta]]), np.array([np.nan]), mean_i, l)[0, 0])
        else:
            roots = solve_center_r(theta, min(ic, l.norm), l)
            if not roots:
                raise InfeasibleTheta(f"no centre-conic root at theta={theta:.6g}")
            r0 = roots[0]
        p0 = np.array([0.0, 0.0, 0.0, r0])
        starts = solver.starts(xs, ys)
    else:
        p0 = np.asarray(init, dtype=float)
        starts = np.zeros((1, 3))
    dx, dy = _directions(theta, l)
    p, sse, _, code = _lm.multi_start_fit(
        p0, starts, solver.start_probe_iter, patch.intensities, patch.mask.astype(float),
        xs, ys, l.lx, l.ly, l.lz, -l.lx / l.lz, -l.ly / l.lz, float(dx), float(dy),
        *solver.kernel_args())
    return Proposal(float(theta), params_to_shape(p, theta, l), float(sse), status=int(code))


def _check_light_for_sigma(l: LightVector):
    if l.planar_norm_sq == 0.0:
        raise ViewAlignedLight("shape-noise approximation needs a light off the view axis")


def sigma_z_sq(a, x: float, y: float, l, nm: NoiseModel) -> float:
    """Approximate intensity variance caused by normal perturbations of size ``sigma_n0``."""
    a = _as_shape(a)
    l = _as_light(l)
    _check_light_for_sigma(l)
    nx = -2 * a.a1 * x - a.a3 * y - a.a4
    ny = -a.a3 * x - 2 * a.a2 * y - a.a5
    return l.planar_norm_sq * nm.sigma_n0_sq / (nx * nx + ny * ny + 1.0)


def likelihood_cost(patch: IntensityPatch, a, l, nm: NoiseModel) -> float:
    a = _as_shape(a)
    l = _as_light(l)
    _check_light_for_sigma(l)
    from .patch_model import normals

    n = normals(a, patch.grid)[patch.mask]
    dot = n @ l.array
    m2 = np.sum(n * n, axis=1)
    pred = np.where(dot > 0, dot / np.sqrt(m2), 0.0)
    var = nm.sigma_i ** 2 + l.planar_norm_sq * nm.sigma_n0_sq / m2
    if np.any(var <= 0):
        raise ZeroVariance("zero predicted variance at a masked-in pixel")
    res = patch.intensities[patch.mask] - pred
    return float(np.sum(0.5 * (np.log(var) + res * res / var)))


def infer_patch(patch: IntensityPatch, l, nm: NoiseModel = NoiseModel(), J: int = DEFAULT_J,
                solver: SolverConfig = SolverConfig(), patch_origin=(0, 0)) -> ProposalSet:
    l = _as_light(l)
    _require_planar_light(l)
    _check_light_for_sigma(l)
    if patch.n_valid < 5:
        raise TooFewPixels(f"{patch.n_valid} usable pixels; at least 5 required")
    ic = patch.center_intensity()
    center = np.array([np.nan if ic is None else ic])
    res = _fit_chunk(patch.intensities[None, :], patch.mask[None, :], center,
                     _grid_arrays(patch.grid), l.array, J, nm, solver, strict=True)
    props = []
    for j in range(J):
        props.append(Proposal(float(res["theta"][0, j]), QuadShape.from_array(res["shapes"][0, j]),
                              float(res["sse"][0, j]), float(res["cost"][0, j]),
                              int(res["codes"][0, j])))
    size = int(round(math.sqrt(len(patch.grid))))
    return ProposalSet(props, size, tuple(patch_origin))


# ---------------------------------------------------------------------------
# batched image inference

def _fit_chunk(intensities, mask, center, grid_xy, light, J, nm: NoiseModel,
               solver: SolverConfig, strict: bool = False):
    """Fit all angles for a block of patches; every output has leading shape (K, J)."""
    l = LightVector.from_array(light)
    K, N = intensities.shape
    xs, ys = grid_xy
    weights = mask.astype(float)
    inten = np.where(mask, intensities, 0.0).astype(float)
    thetas = _theta_grids(center, l, J, solver, strict)
    mean_i = np.where(weights.sum(1) > 0, (inten * weights).sum(1) / np.maximum(weights.sum(1), 1), np.nan)
    r0 = _initial_r(thetas, center, mean_i, l)
    p0 = np.zeros((K * J, 4))
    p0[:, 3] = r0.ravel()
    patch_index = np.repeat(np.arange(K), J)
    params, sse, cost, iters, codes = _lm.fit_batch(
        p0, patch_index, np.ascontiguousarray(inten), np.ascontiguousarray(weights),
        np.ascontiguousarray(xs, dtype=float), np.ascontiguousarray(ys, dtype=float),
        np.asarray(light, dtype=float), thetas.ravel(),
        solver.starts(xs, ys), solver.start_probe_iter, *solver.kernel_args(),
        nm.sigma_i ** 2, nm.sigma_n0_sq)
    if np.any(np.isnan(cost)):
        raise ZeroVariance("zero predicted variance at a masked-in pixel")
    dx, dy = _directions(thetas.ravel(), l)
    shapes = np.empty((K * J, 5))
    shapes[:, :3] = params[:, :3]
    shapes[:, 3] = -l.lx / l.lz - params[:, 3] * dx
    shapes[:, 4] = -l.ly / l.lz - params[:, 3] * dy
    return {
        "theta": thetas,
        "shapes": shapes.reshape(K, J, 5),
        "sse": sse.reshape(K, J),
        "cost": cost.reshape(K, J),
        "iters": iters.reshape(K, J),
        "codes": codes.reshape(K, J),
    }


@dataclass
class ScaleProposals:
    """Proposals for every fully-interior patch centre at one patch size."""

    size: int
    rows: np.ndarray          # centre row of each patch-grid row
    cols: np.ndarray          # centre column of each patch-grid column
    present: np.ndarray       # (nr, nc) bool; False = skipped patch
    theta: np.ndarray         # (nr, nc, J)
    shapes: np.ndarray        # (nr, nc, J, 5)
    sse: np.ndarray           # (nr, nc, J)
    cost: np.ndarray          # (nr, nc, J)

    @property
    def J(self) -> int:
        return self.theta.shape[-1]

    @property
    def grid_shape(self):
        return self.present.shape

    def patch_set(self, i: int, j: int) -> ProposalSet | None:
        if not self.present[i, j]:
            return None
        props = [Proposal(float(self.theta[i, j, k]), QuadShape.from_array(self.shapes[i, j, k]),
                          float(self.sse[i, j, k]), float(self.cost[i, j, k]))
                 for k in range(self.J)]
        return ProposalSet(props, self.size, (int(self.rows[i]), int(self.cols[j])))


@dataclass
class ProposalCollection:
    image_shape: tuple
    light: LightVector
    noise: NoiseModel
    J: int
    scales: list
    solver: SolverConfig = field(default_factory=SolverConfig)
    meta: dict = field(default_factory=dict)

    def scale(self, size: int) -> ScaleProposals:
        for s in self.scales:
            if s.size == size:
                return s
        raise KeyError(size)


def _extract_patches(image, mask, size):
    H, W = image.shape
    h = size // 2
    rows = np.arange(h, H - h)
    cols = np.arange(h, W - h)
    win = np.lib.stride_tricks.sliding_window_view(image, (size, size))
    mwin = np.lib.stride_tricks.sliding_window_view(mask, (size, size))
    nr, nc = len(rows), len(cols)
    return rows, cols, win.reshape(nr * nc, size * size), mwin.reshape(nr * nc, size * size)


def _chunk_task(args):
    return _fit_chunk(*args)


_POOL_CONTEXT = None


def _pool_context():
    global _POOL_CONTEXT
    if _POOL_CONTEXT is None:
        methods = multiprocessing.get_all_start_methods()
        _POOL_CONTEXT = multiprocessing.get_context("fork" if "fork" in methods else "spawn")
    return _POOL_CONTEXT


def warmup():
    """Compile the fitting kernels (cached on disk after the first run)."""
    g = PatchGrid.square(3)
    infer_patch(IntensityPatch(g, np.full(9, 0.8)), LightVector(0.6, 0.0, 0.8), J=3)


def infer_image(image, mask, l, patch_sizes=(5,), nm: NoiseModel = NoiseModel(),
                J: int = DEFAULT_J, workers: int = 1,
                solver: SolverConfig = SolverConfig()) -> ProposalCollection:
    """Proposal sets for all overlapping patches at each size.

    Work is split into fixed blocks of patches, so results do not depend on
    ``workers``.
    """
    l = _as_light(l)
    _require_planar_light(l)
    _check_light_for_sigma(l)
    image = np.asarray(image, dtype=float)
    if mask is None:
        mask = np.ones(image.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool) & np.isfinite(image)
    image = np.where(mask, image, 0.0)
    H, W = image.shape
    for s in patch_sizes:
        if s < 3 or s % 2 == 0 or s > min(H, W):
            raise ValueError(f"patch size {s} must be odd, >= 3 and <= {min(H, W)}")
    warmup()
    scales = []
    pool = None
    try:
        if workers > 1:
            pool = ProcessPoolExecutor(max_workers=workers, mp_context=_pool_context())
        for size in patch_sizes:
            rows, cols, pix, pmask = _extract_patches(image, mask, size)
            grid = PatchGrid.square(size)
            centre_idx = grid.center_index()
            n_total = len(rows) * len(cols)
            valid = pmask.sum(1) >= solver.min_valid_fraction * size * size
            valid &= pmask.sum(1) >= 5
            centre = np.where(pmask[:, centre_idx], pix[:, centre_idx], np.nan)
            idx = np.flatnonzero(valid)
            tasks = []
            for start in range(0, len(idx), CHUNK_PATCHES):
                sel = idx[start:start + CHUNK_PATCHES]
                tasks.append((pix[sel], pmask[sel], centre[sel], _grid_arrays(grid),
                              l.array, J, nm, solver))
            results = list(pool.map(_chunk_task, tasks)) if pool else [_chunk_task(t) for t in tasks]
            theta = np.full((n_total, J), np.nan)
            shapes = np.full((n_total, J, 5), np.nan)
            sse = np.full((n_total, J), np.nan)
            cost = np.full((n_total, J), np.nan)
            for start, res in zip(range(0, len(idx), CHUNK_PATCHES), results):
                sel = idx[start:start + CHUNK_PATCHES]
                theta[sel] = res["theta"]
                shapes[sel] = res["shapes"]
                sse[sel] = res["sse"]
                cost[sel] = res["cost"]
            nr, nc = len(rows), len(cols)
            scales.append(ScaleProposals(size, rows, cols, valid.reshape(nr, nc),
                                         theta.reshape(nr, nc, J), shapes.reshape(nr, nc, J, 5),
                                         sse.reshape(nr, nc, J), cost.reshape(nr, nc, J)))
    finally:
        if pool is not None:
            pool.shutdown()
    return ProposalCollection((H, W), l, nm, J, scales, solver)
