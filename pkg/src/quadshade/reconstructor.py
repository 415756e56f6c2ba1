"""Object-scale depth from per-patch proposal distributions.

Alternates between choosing one proposal (or the outlier label) per patch and
fitting a depth map to the chosen local normals.  Depth gradients use central
differences in the interior and one-sided differences on the border
(``numpy.gradient`` semantics) in every term of the cost.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import BoundaryPixel
from .patch_model import QuadShape, _as_shape
from .proposal_engine import ProposalCollection

log = logging.getLogger(__name__)

UNLABELED = -1


@dataclass
class ReconConfig:
    lam: float | None = None          # None = automatic
    D_phi: float | None = None        # None = 10 / lam
    sigma0: float = 8.0
    sigma_factor: float = 0.5
    cg_iters: int = 100
    convergence_tol: float = 1e-6
    max_rounds: int = 100
    refine_rounds: int = 20
    patch_sizes: list | None = None   # None = every scale in the collection
    use_dummy: bool = True
    smoothing_truncate: float = 3.0
    trace_slack: float = 1e-9

    def __post_init__(self):
        if self.lam is not None and not self.lam > 0:
            raise ValueError("lam must be positive")
        if not self.sigma0 > 1:
            raise ValueError("sigma0 must be > 1")
        if not 0 < self.sigma_factor < 1:
            raise ValueError("sigma_factor must be in (0, 1)")
        if self.cg_iters < 1:
            raise ValueError("cg_iters must be >= 1")

    def as_dict(self):
        return asdict(self)

    def schedule(self) -> list:
        """Smoothing widths of the annealing stages, ending with 1 (no smoothing)."""
        out = []
        s = self.sigma0
        while s > 1:
            out.append(s)
            s *= self.sigma_factor
        out.append(1.0)
        return out


@dataclass
class Labeling:
    """Chosen label per patch and scale: proposal index, ``J`` for the dummy, -1 if absent."""

    labels: list
    J: int

    def copy(self):
        return Labeling([a.copy() for a in self.labels], self.J)

    def __eq__(self, other):
        return (isinstance(other, Labeling) and self.J == other.J
                and all(np.array_equal(a, b) for a, b in zip(self.labels, other.labels)))

    def dummy_fraction(self) -> float:
        used = np.concatenate([a[a >= 0] for a in self.labels])
        return float(np.mean(used == self.J)) if used.size else 0.0

    def histograms(self) -> list:
        return [np.bincount(a[a >= 0], minlength=self.J + 1).tolist() for a in self.labels]


@dataclass
class AggregateNormals:
    w: np.ndarray
    nx: np.ndarray
    ny: np.ndarray


# ---------------------------------------------------------------------------
# discrete gradient and its adjoint

def depth_gradient(Z):
    """(dZ/dx, dZ/dy) with x along columns."""
    gy, gx = np.gradient(np.asarray(Z, dtype=float))
    return gx, gy


def _grad_axis_adjoint(v, axis):
    v = np.moveaxis(v, axis, 0)
    out = np.zeros_like(v)
    n = v.shape[0]
    out[0] -= v[0]
    out[1] += v[0]
    out[2:] += 0.5 * v[1:n - 1]
    out[:n - 2] -= 0.5 * v[1:n - 1]
    out[n - 1] += v[n - 1]
    out[n - 2] -= v[n - 1]
    return np.moveaxis(out, 0, axis)


def depth_gradient_adjoint(vx, vy):
    return _grad_axis_adjoint(vx, 1) + _grad_axis_adjoint(vy, 0)


# ---------------------------------------------------------------------------
# agreement term

def delta(Z, a, x: int, y: int, patch_origin) -> float:
    """Squared mismatch between the depth gradient and a proposal's normal at pixel (x, y).

    ``a=None`` is the dummy proposal.  ``patch_origin`` is the (row, col) of
    the patch centre; ``x`` is the column and ``y`` the row of the pixel,
    which must be interior.  The batched cost uses one-sided differences on
    the image border instead.
    """
    if a is None:
        return 0.0
    Z = np.asarray(Z, dtype=float)
    H, W = Z.shape
    if not (0 < x < W - 1 and 0 < y < H - 1):
        raise BoundaryPixel(f"pixel ({x}, {y}) has no central difference in a {H}x{W} depth map")
    a = _as_shape(a)
    gx = 0.5 * (Z[y, x + 1] - Z[y, x - 1])
    gy = 0.5 * (Z[y + 1, x] - Z[y - 1, x])
    px = x - patch_origin[1]
    py = y - patch_origin[0]
    nx = -2 * a.a1 * px - a.a3 * py - a.a4
    ny = -a.a3 * px - 2 * a.a2 * py - a.a5
    return float((-gx - nx) ** 2 + (-gy - ny) ** 2)


def _window_moments(gx, gy, scale):
    """Per-patch sums of g, g*dx, g*dy and g^2 for both target components."""
    h = scale.size // 2
    nr, nc = scale.grid_shape
    r0, c0 = int(scale.rows[0]), int(scale.cols[0])
    m = {k: np.zeros((nr, nc)) for k in ("sx", "sxx", "sxy", "qx", "sy", "syx", "syy", "qy")}
    for dy in range(-h, h + 1):
        for dx in range(-h, h + 1):
            sl = (slice(r0 + dy, r0 + dy + nr), slice(c0 + dx, c0 + dx + nc))
            bx = gx[sl]
            by = gy[sl]
            m["sx"] += bx
            m["sxx"] += bx * dx
            m["sxy"] += bx * dy
            m["qx"] += bx * bx
            m["sy"] += by
            m["syx"] += by * dx
            m["syy"] += by * dy
            m["qy"] += by * by
    return m


def _delta_sums(Z, scale) -> np.ndarray:
    """Sum of the agreement term over each patch for every proposal, shape (nr, nc, J)."""
    gx, gy = depth_gradient(Z)
    gx, gy = -gx, -gy
    m = _window_moments(gx, gy, scale)
    h = scale.size // 2
    n = scale.size * scale.size
    m2 = scale.size * sum(d * d for d in range(-h, h + 1))
    a = np.nan_to_num(scale.shapes)
    a1, a2, a3, a4, a5 = (a[..., k] for k in range(5))
    ex = lambda k: m[k][..., None]  # noqa: E731
    gn_x = -2 * a1 * ex("sxx") - a3 * ex("sxy") - a4 * ex("sx")
    gn_y = -a3 * ex("syx") - 2 * a2 * ex("syy") - a5 * ex("sy")
    nn_x = (4 * a1 * a1 + a3 * a3) * m2 + a4 * a4 * n
    nn_y = (4 * a2 * a2 + a3 * a3) * m2 + a5 * a5 * n
    out = ex("qx") - 2 * gn_x + nn_x + ex("qy") - 2 * gn_y + nn_y
    return np.maximum(out, 0.0)


def _scales(collection, cfg: ReconConfig | None = None):
    if cfg is None or cfg.patch_sizes is None:
        return list(collection.scales)
    return [collection.scale(s) for s in cfg.patch_sizes]


def auto_parameters(scales) -> tuple:
    """lam = 1 / (4 * mean(median - min cost)) at the smallest scale; D_phi = 10 / lam."""
    smallest = min(scales, key=lambda s: s.size)
    c = smallest.cost[smallest.present]
    gap = float(np.mean(np.median(c, axis=1) - np.min(c, axis=1)))
    if not gap > 0:
        raise ValueError("cannot set lambda automatically: all proposal costs are equal")
    lam = 1.0 / (4.0 * gap)
    return lam, 10.0 / lam


def _label_costs(Z, scale, lam, D_phi, allow_dummy):
    cost = lam * np.nan_to_num(scale.cost) + _delta_sums(Z, scale)
    if allow_dummy:
        dummy = np.full(cost.shape[:2] + (1,), lam * D_phi)
        cost = np.concatenate([cost, dummy], axis=-1)
    return cost


def update_labels(Z, scales, lam: float, D_phi: float | None, allow_dummy: bool) -> Labeling:
    """Independent per-patch argmin of ``lam * D + sum(delta)``; ties go to the lowest index."""
    if allow_dummy and D_phi is None:
        raise ValueError("dummy label requested without a dummy cost")
    out = []
    J = scales[0].J
    for scale in scales:
        lab = np.argmin(_label_costs(Z, scale, lam, D_phi, allow_dummy), axis=-1)
        out.append(np.where(scale.present, lab, UNLABELED))
    return Labeling(out, J)


def global_cost(Z, labeling: Labeling, scales, lam: float, D_phi: float | None = None) -> float:
    total = 0.0
    for scale, lab in zip(scales, labeling.labels):
        used = lab >= 0
        prop = used & (lab < labeling.J)
        if np.any(used & ~prop):
            if D_phi is None:
                raise ValueError("labeling uses the dummy but no dummy cost given")
            total += lam * D_phi * float(np.sum(used & ~prop))
        if np.any(prop):
            idx = np.where(prop, lab, 0)[..., None]
            d = np.take_along_axis(_delta_sums(Z, scale), idx, -1)[..., 0]
            c = np.take_along_axis(np.nan_to_num(scale.cost), idx, -1)[..., 0]
            total += float(np.sum(np.where(prop, lam * c + d, 0.0)))
    return total


def aggregate_normals(labeling: Labeling, scales, image_shape) -> AggregateNormals:
    """Count and mean of the normals of covering, non-dummy labelled proposals."""
    H, W = image_shape
    w = np.zeros((H, W), dtype=np.int64)
    sx = np.zeros((H, W))
    sy = np.zeros((H, W))
    for scale, lab in zip(scales, labeling.labels):
        use = (lab >= 0) & (lab < labeling.J)
        if not np.any(use):
            continue
        idx = np.where(use, lab, 0)[..., None, None]
        a = np.take_along_axis(np.nan_to_num(scale.shapes), idx, axis=2)[:, :, 0, :]
        a = np.where(use[..., None], a, 0.0)
        h = scale.size // 2
        nr, nc = scale.grid_shape
        r0, c0 = int(scale.rows[0]), int(scale.cols[0])
        for dy in range(-h, h + 1):
            for dx in range(-h, h + 1):
                sl = (slice(r0 + dy, r0 + dy + nr), slice(c0 + dx, c0 + dx + nc))
                w[sl] += use
                sx[sl] += np.where(use, -2 * a[..., 0] * dx - a[..., 2] * dy - a[..., 3], 0.0)
                sy[sl] += np.where(use, -a[..., 2] * dx - 2 * a[..., 1] * dy - a[..., 4], 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        nx = np.where(w > 0, sx / np.maximum(w, 1), 0.0)
        ny = np.where(w > 0, sy / np.maximum(w, 1), 0.0)
    return AggregateNormals(w, nx, ny)


# ---------------------------------------------------------------------------
# depth updates

def _spectral_frequencies(n: int) -> np.ndarray:
    u = 2 * np.pi * np.fft.fftfreq(n)
    if n % 2 == 0:
        u[n // 2] = 0.0  # the Nyquist derivative of a real signal is taken as zero
    return u


def frankot_chellappa(nx, ny) -> np.ndarray:
    """Periodic least-squares surface whose gradient best matches ``(-nx, -ny)``; zero mean."""
    p = -np.asarray(nx, dtype=float)
    q = -np.asarray(ny, dtype=float)
    if p.shape != q.shape:
        raise ValueError("gradient fields must have the same shape")
    H, W = p.shape
    u = _spectral_frequencies(W)[None, :]
    v = _spectral_frequencies(H)[:, None]
    P = np.fft.fft2(p)
    Q = np.fft.fft2(q)
    den = u * u + v * v
    with np.errstate(invalid="ignore", divide="ignore"):
        Zf = np.where(den > 0, (-1j * u * P - 1j * v * Q) / den, 0.0)
    return np.real(np.fft.ifft2(Zf))


def weighted_energy(Z, agg: AggregateNormals) -> float:
    gx, gy = depth_gradient(Z)
    return float(np.sum(agg.w * ((gx + agg.nx) ** 2 + (gy + agg.ny) ** 2)))


def weighted_integrate_cg(agg: AggregateNormals, Z_init, iters: int, rtol: float = 1e-12):
    """Conjugate gradients on the weighted normal equations, warm-started at ``Z_init``.

    Returns ``(Z, info)``; ``info["converged"]`` is False only when the
    residual neither reached ``rtol`` nor decreased at all.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    w = agg.w.astype(float)

    def apply(z):
        gx, gy = depth_gradient(z)
        return depth_gradient_adjoint(w * gx, w * gy)

    b = -depth_gradient_adjoint(w * agg.nx, w * agg.ny)
    Z = np.array(Z_init, dtype=float, copy=True)
    r = b - apply(Z)
    p = r.copy()
    rr = float(np.sum(r * r))
    r0 = math.sqrt(rr)
    bnorm = math.sqrt(float(np.sum(b * b)))
    energies = [weighted_energy(Z, agg)]
    done = rr == 0.0
    k = 0
    while k < iters and not done:
        Ap = apply(p)
        pAp = float(np.sum(p * Ap))
        if pAp <= 0:
            break
        alpha = rr / pAp
        Z += alpha * p
        r -= alpha * Ap
        rr_new = float(np.sum(r * r))
        energies.append(weighted_energy(Z, agg))
        k += 1
        if math.sqrt(rr_new) <= rtol * max(bnorm, r0, 1e-300):
            done = True
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    rfinal = math.sqrt(float(np.sum(r * r)))
    converged = done or rfinal < r0
    Z -= Z.mean()
    info = {"iterations": k, "residual": rfinal, "initial_residual": r0,
            "converged": bool(converged), "energies": energies}
    if not converged:
        log.warning("conjugate gradients made no progress (residual %.3g)", rfinal)
    return Z, info


def smooth_depth(Z, sigma: float, truncate: float = 3.0) -> np.ndarray:
    return ndimage.gaussian_filter(Z, sigma, mode="nearest", truncate=truncate)


# ---------------------------------------------------------------------------
# alternation

@dataclass
class ReconResult:
    Z: np.ndarray
    labeling: Labeling
    trace: list
    lam: float
    D_phi: float
    converged: bool
    config: dict = field(default_factory=dict)

    def stage_traces(self) -> dict:
        out = {}
        for t in self.trace:
            out.setdefault(t["stage"], []).append(t["cost"])
        return out


def reconstruct(collection: ProposalCollection, image_shape=None,
                cfg: ReconConfig | None = None, workers: int = 1) -> ReconResult:
    """Alternate label and depth updates through the annealing schedule.

    ``workers`` is accepted for interface symmetry; label updates are
    vectorised and results do not depend on it.
    """
    cfg = cfg or ReconConfig()
    image_shape = tuple(image_shape or collection.image_shape)
    scales = _scales(collection, cfg)
    if not any(np.any(s.present) for s in scales):
        raise ValueError("no proposal sets to reconstruct from")
    lam, D_phi = auto_parameters(scales)
    if cfg.lam is not None:
        lam = cfg.lam
        D_phi = 10.0 / lam
    if cfg.D_phi is not None:
        D_phi = cfg.D_phi

    Z = np.zeros(image_shape)
    trace = []
    converged = True
    labeling = None

    def run_stage(name, sigma, allow_dummy, use_cg, max_rounds):
        nonlocal Z, labeling, converged
        lam_eff = lam * sigma * sigma if sigma > 1 else lam
        prev_cost = None
        prev_labels = None
        for rnd in range(max_rounds):
            labeling = update_labels(Z, scales, lam_eff, D_phi, allow_dummy)
            c_lab = global_cost(Z, labeling, scales, lam_eff, D_phi)
            trace.append({"stage": name, "sigma": sigma, "dummy": allow_dummy, "round": rnd,
                          "step": "labels", "cost": c_lab})
            agg = aggregate_normals(labeling, scales, image_shape)
            if use_cg:
                cand, info = weighted_integrate_cg(agg, Z, cfg.cg_iters)
                converged = converged and info["converged"]
            else:
                cand = frankot_chellappa(agg.nx, agg.ny)
            if sigma > 1:
                cand = smooth_depth(cand, sigma, cfg.smoothing_truncate)
            c_new = global_cost(cand, labeling, scales, lam_eff, D_phi)
            accepted = c_new <= c_lab
            if accepted:
                Z = cand
            cost = c_new if accepted else c_lab
            trace.append({"stage": name, "sigma": sigma, "dummy": allow_dummy, "round": rnd,
                          "step": "depth", "cost": cost, "accepted": bool(accepted)})
            stable = prev_labels is not None and labeling == prev_labels
            small = prev_cost is not None and abs(prev_cost - cost) <= cfg.convergence_tol * max(abs(prev_cost), 1e-300)
            if (stable and (small or not accepted)) or (prev_cost is not None and small and not accepted):
                break
            prev_cost = cost
            prev_labels = labeling

    for sigma in cfg.schedule():
        run_stage(f"anneal_sigma={sigma:g}", sigma, False, False, cfg.max_rounds)
    if cfg.use_dummy:
        run_stage("dummy", 1.0, True, False, cfg.max_rounds)
    run_stage("refine", 1.0, cfg.use_dummy, True, cfg.refine_rounds)
    Z = Z - Z.mean()
    return ReconResult(Z, labeling, trace, lam, D_phi, converged, cfg.as_dict())


def trace_is_monotone(trace, slack: float = 1e-9) -> bool:
    """Costs never rise within a stage by more than ``slack`` relative to their size."""
    by_stage = {}
    for t in trace:
        by_stage.setdefault(t["stage"], []).append(t["cost"])
    for costs in by_stage.values():
        for a, b in zip(costs, costs[1:]):
            if b > a + slack * max(1.0, abs(a)):
                return False
    return True
