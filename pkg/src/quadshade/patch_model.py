"""Quadratic surface patches under Lambertian shading.

Depth of a patch is modelled as ``z = a1 x^2 + a2 y^2 + a3 xy + a4 x + a5 y``
(up to a constant) in coordinates centred on the patch.  Normals are kept
un-normalised as ``(n_x, n_y, 1)`` with ``n = -grad z``.  Image coordinates
follow the array convention used everywhere in the package: ``x`` runs along
columns and ``y`` along rows.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateLight,
    DegenerateNormal,
    EqualMagnitudeHessian,
    NotCylinder,
    PlanarShape,
    ShadowedPoint,
    ShadowViolation,
)

DEGENERATE_EPS = 1e-14
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class QuadShape:
    a1: float
    a2: float
    a3: float
    a4: float
    a5: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValueError(f"non-finite shape coefficients: {self.as_tuple()}")

    @classmethod
    def from_array(cls, a) -> "QuadShape":
        a = np.asarray(a, dtype=float).reshape(5)
        return cls(*(float(v) for v in a))

    @classmethod
    def zero(cls) -> "QuadShape":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)

    def as_tuple(self):
        return (self.a1, self.a2, self.a3, self.a4, self.a5)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.as_tuple())

    def hessian(self) -> np.ndarray:
        return np.array([[self.a1, self.a3 / 2], [self.a3 / 2, self.a2]])

    def jacobian(self) -> np.ndarray:
        return np.array([self.a4, self.a5])

    def shape_matrix(self) -> "ShapeMatrix":
        return ShapeMatrix.from_shape(self)

    def depth(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (self.a1 * x * x + self.a2 * y * y + self.a3 * x * y
                + self.a4 * x + self.a5 * y)

    def __neg__(self):
        return QuadShape(*(-v for v in self.as_tuple()))


@dataclass(frozen=True)
class LightVector:
    """Directional light; the magnitude is albedo times light strength."""

    lx: float
    ly: float
    lz: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.lx, self.ly, self.lz)):
            raise ValueError("non-finite light")
        if self.lz <= 0:
            raise ValueError(f"light must be in the visible hemisphere (lz > 0), got lz={self.lz}")

    @classmethod
    def from_array(cls, l) -> "LightVector":
        l = np.asarray(l, dtype=float).reshape(3)
        return cls(float(l[0]), float(l[1]), float(l[2]))

    @classmethod
    def from_elevation(cls, elevation_deg: float, azimuth_deg: float = 0.0,
                       strength: float = 1.0) -> "LightVector":
        el = math.radians(elevation_deg)
        az = math.radians(azimuth_deg)
        return cls(strength * math.cos(el) * math.cos(az),
                   strength * math.cos(el) * math.sin(az),
                   strength * math.sin(el))

    @property
    def array(self) -> np.ndarray:
        return np.array([self.lx, self.ly, self.lz])

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.array))

    @property
    def planar_norm_sq(self) -> float:
        return self.lx * self.lx + self.ly * self.ly


class PatchGrid:
    """Ordered, duplicate-free pixel coordinates relative to the patch centre."""

    def __init__(self, xy):
        xy = np.asarray(xy, dtype=float)
        if xy.ndim != 2 or xy.shape[1] != 2 or len(xy) == 0:
            raise ValueError("grid must be a non-empty (N, 2) array")
        if len({(float(a), float(b)) for a, b in xy}) != len(xy):
            raise ValueError("grid contains duplicate coordinates")
        if not np.any(np.all(xy == 0.0, axis=1)):
            raise ValueError("grid must contain the centre (0, 0)")
        self._xy = xy
        self._xy.setflags(write=False)

    @classmethod
    def square(cls, k: int, spacing: float = 1.0) -> "PatchGrid":
        if k < 1 or k % 2 == 0:
            raise ValueError(f"square patch size must be odd and positive, got {k}")
        h = k // 2
        ys, xs = np.mgrid[-h:h + 1, -h:h + 1]
        # row-major: index = (y + h) * k + (x + h)
        return cls(np.stack([xs.ravel(), ys.ravel()], axis=1) * spacing)

    @property
    def xy(self) -> np.ndarray:
        return self._xy

    @property
    def x(self) -> np.ndarray:
        return self._xy[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self._xy[:, 1]

    def __len__(self):
        return len(self._xy)

    def center_index(self) -> int:
        return int(np.flatnonzero(np.all(self._xy == 0.0, axis=1))[0])

    def with_point(self, x: float, y: float) -> "PatchGrid":
        return PatchGrid(np.vstack([self._xy, [[x, y]]]))


@dataclass
class IntensityPatch:
    grid: PatchGrid
    intensities: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=float).reshape(len(self.grid))
        if self.mask is None:
            self.mask = np.ones(len(self.grid), dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(len(self.grid))
        used = self.intensities[self.mask]
        if not np.all(np.isfinite(used)) or np.any(used < 0):
            raise ValueError("masked-in intensities must be finite and non-negative")

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def center_intensity(self):
        c = self.grid.center_index()
        return float(self.intensities[c]) if self.mask[c] else None


@dataclass(frozen=True)
class ShapeMatrix:
    """The 3x3 affine map taking ``[x, y, 1]`` to the un-normalised normal."""

    A: np.ndarray

    @classmethod
    def from_shape(cls, a: QuadShape) -> "ShapeMatrix":
        return cls(np.array([[-2 * a.a1, -a.a3, -a.a4],
                             [-a.a3, -2 * a.a2, -a.a5],
                             [0.0, 0.0, 1.0]]))

    def to_shape(self, atol: float = 1e-12) -> QuadShape:
        A = self.A
        if abs(A[0, 1] - A[1, 0]) > atol * max(1.0, abs(A[0, 1])):
            raise ValueError("shape matrix is not symmetric in its upper-left block")
        return QuadShape(-A[0, 0] / 2, -A[1, 1] / 2, -(A[0, 1] + A[1, 0]) / 2, -A[0, 2], -A[1, 2])

    def apply(self, x, y) -> np.ndarray:
        xb = np.stack([np.asarray(x, float), np.asarray(y, float), np.ones(np.shape(x))])
        return (self.A @ xb).T


def _as_shape(a) -> QuadShape:
    return a if isinstance(a, QuadShape) else QuadShape.from_array(a)


def _as_light(l) -> LightVector:
    return l if isinstance(l, LightVector) else LightVector.from_array(l)


def _as_grid(grid) -> PatchGrid:
    return grid if isinstance(grid, PatchGrid) else PatchGrid(grid)


def normals(a, grid) -> np.ndarray:
    """Un-normalised normals ``(n_x, n_y, 1)`` at each grid point, shape (N, 3)."""
    a = _as_shape(a)
    grid = _as_grid(grid)
    x, y = grid.x, grid.y
    nx = -2 * a.a1 * x - a.a3 * y - a.a4
    ny = -a.a3 * x - 2 * a.a2 * y - a.a5
    return np.stack([nx, ny, np.ones_like(nx)], axis=1)


class ShadowPolicy(enum.Enum):
    ERROR = "error"
    CLAMP_ZERO = "clamp_zero"


def render(a, l, grid, shadow_policy: ShadowPolicy = ShadowPolicy.ERROR) -> IntensityPatch:
    """Lambertian image ``l.n / |n|`` of a quadratic patch."""
    grid = _as_grid(grid)
    l = _as_light(l)
    n = normals(a, grid)
    dot = n @ l.array
    intensity = dot / np.linalg.norm(n, axis=1)
    shadow = dot <= 0
    if np.any(shadow):
        if shadow_policy is ShadowPolicy.ERROR:
            raise ShadowedPoint(f"{int(shadow.sum())} grid point(s) in shadow")
        intensity = np.where(shadow, 0.0, intensity)
    return IntensityPatch(grid, intensity, ~shadow)


def quad_constraint_residual(a, l, I: float, x: float, y: float) -> float:
    """``n^T (l l^T - I^2 Id) n`` at one point; zero for a consistent intensity."""
    a = _as_shape(a)
    lv = _as_light(l).array
    n = np.array([-2 * a.a1 * x - a.a3 * y - a.a4, -a.a3 * x - 2 * a.a2 * y - a.a5, 1.0])
    M = np.outer(lv, lv) - I * I * np.eye(3)
    return float(n @ M @ n)


def theta_of_normal(n, l) -> float:
    """Azimuth of normal ``(n_x, n_y)`` on its light-centred intensity conic."""
    l = _as_light(l)
    if l.lx == 0.0 and l.ly == 0.0:
        raise DegenerateLight("light planar component is zero; theta undefined")
    nx, ny = float(n[0]), float(n[1])
    num = nx * l.ly - ny * l.lx
    den = l.planar_norm_sq - l.lz * (nx * l.lx + ny * l.ly)
    if abs(num) < DEGENERATE_EPS and abs(den) < DEGENERATE_EPS:
        raise DegenerateNormal("normal is parallel to the light; theta undefined")
    t = math.atan2(num, den)
    return math.pi if t == -math.pi else t


def theta_of_shape(a, l) -> float:
    a = _as_shape(a)
    return theta_of_normal((-a.a4, -a.a5), l)


# ---------------------------------------------------------------------------
# ambiguity families

class FamilyKind(enum.Enum):
    FOUR_WAY = "FourWay"
    CYLINDER_LIGHT_LINE = "CylinderLightLine"
    EQUAL_MAGNITUDE_CONTINUUM = "EqualMagnitudeContinuum"
    PLANAR_CONE = "PlanarCone"


@dataclass
class AmbiguityFamily:
    kind: FamilyKind
    members: list
    params: dict = field(default_factory=dict)

    def render_spread(self, grid) -> float:
        """Largest RMS difference between any member's image and the first one."""
        ref = render(*self.members[0], grid).intensities
        worst = 0.0
        for a, l in self.members[1:]:
            img = render(a, l, grid).intensities
            worst = max(worst, float(np.sqrt(np.mean((img - ref) ** 2))))
        return worst


def _hessian_eigs(a: QuadShape):
    return np.linalg.eigvalsh(a.hessian())


def _affine_b(m2: np.ndarray) -> np.ndarray:
    B = np.eye(3)
    B[:2, :2] = m2
    return B


def four_solutions(a, l, tol: float = 1e-12) -> list:
    """The (shape, light) pairs that render the same image as ``(a, l)``.

    Order is: input, its convex/concave twin, the reflected pair, and that
    pair's twin.  Duplicates are removed.
    """
    a = _as_shape(a)
    l = _as_light(l)
    e = _hessian_eigs(a)
    scale = max(1.0, float(np.max(np.abs(e))))
    if np.all(np.abs(e) <= tol * scale):
        raise PlanarShape("zero Hessian: planar patches have a continuous ambiguity")
    if abs(abs(e[0]) - abs(e[1])) <= tol * scale:
        raise EqualMagnitudeHessian("Hessian eigenvalues have equal magnitude; use equal_magnitude_family")
    phi0 = math.atan2(a.a3, a.a1 - a.a2)
    c, s = math.cos(phi0), math.sin(phi0)
    anti = np.array([[c, s], [s, -c]])
    bs = [np.eye(2), -np.eye(2), anti, -anti]
    A = ShapeMatrix.from_shape(a).A
    out = []
    for b in bs:
        B = _affine_b(b)
        shape = ShapeMatrix(B @ A).to_shape(atol=1e-9)
        light = LightVector.from_array(B @ l.array)
        if any(np.allclose(shape.array, o[0].array, atol=1e-12, rtol=0)
               and np.allclose(light.array, o[1].array, atol=1e-12, rtol=0) for o in out):
            continue
        out.append((shape, light))
    return out


def four_solution_family(a, l) -> AmbiguityFamily:
    return AmbiguityFamily(FamilyKind.FOUR_WAY, four_solutions(a, l))


def _check_shadow_free(a, l, grid):
    if grid is None:
        return
    dot = normals(a, grid) @ _as_light(l).array
    if np.any(dot <= 0):
        raise ShadowViolation(f"{int((dot <= 0).sum())} grid point(s) in shadow")


def cylinder_light_family(a, l, member, c: float, grid=None) -> LightVector:
    """Light paired with ``member`` (one of the four cylinder shapes) for parameter ``c``.

    ``a`` must already be in the Hessian-aligned frame with ``a2 = a3 = 0``.
    """
    a = _as_shape(a)
    l = _as_light(l)
    member = _as_shape(member)
    if abs(a.a2) > 1e-12 or abs(a.a3) > 1e-12 or a.a1 == 0.0:
        raise NotCylinder("expected a2 = a3 = 0 and a1 != 0 in the rotated frame")
    sx = float(np.sign(member.a1 * a.a1))
    sy = float(np.sign(member.a5 * a.a5)) if a.a5 != 0.0 else 1.0
    if sx == 0.0:
        raise NotCylinder("member does not share the cylinder's curved axis")
    base = l.array + c * np.array([0.0, 1.0, a.a5])
    lt = np.array([sx, sy, 1.0]) * base
    if lt[2] <= 0:
        raise ShadowViolation("family light leaves the visible hemisphere")
    lt = LightVector.from_array(lt)
    _check_shadow_free(member, lt, grid)
    return lt


def cylinder_members(a, l) -> list:
    """The four cylinder shapes for ``c = 0`` in the Hessian-aligned frame."""
    a = _as_shape(a)
    out = []
    for sx, sy in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
        out.append(QuadShape(sx * a.a1, sy * a.a2, sx * sy * a.a3, sx * a.a4, sy * a.a5))
    return out


def cylinder_family(a, l, cs: Iterable[float], grid=None) -> AmbiguityFamily:
    members = []
    for m in cylinder_members(a, l):
        for c in cs:
            members.append((m, cylinder_light_family(a, l, m, c, grid)))
    return AmbiguityFamily(FamilyKind.CYLINDER_LIGHT_LINE, members, {"c": list(cs)})


def equal_magnitude_family(r: float, p: float, q: float, base_l, theta: float | None = None,
                           lam: int | None = None):
    """One member of the equal-eigenvalue-magnitude continuum.

    Exactly one of ``theta`` (saddle branch, rotation angle) or ``lam``
    (umbilic branch, +1 or -1) selects the member.
    """
    if r <= 0:
        raise ValueError("r must be positive")
    l = _as_light(base_l)
    if (theta is None) == (lam is None):
        raise ValueError("pass exactly one of theta or lam")
    if theta is not None:
        c, s = math.cos(theta), math.sin(theta)
        a = QuadShape(r * c, -r * c, 2 * r * s, p * c - q * s, p * s + q * c)
        lt = LightVector(l.lx * c - l.ly * s, l.lx * s + l.ly * c, l.lz)
        return a, lt
    if lam not in (-1, 1):
        raise ValueError("lam must be -1 or +1")
    return (QuadShape(lam * r, lam * r, 0.0, lam * p, -lam * q),
            LightVector(lam * l.lx, -lam * l.ly, l.lz))


def equal_magnitude_continuum(r, p, q, base_l, thetas: Sequence[float]) -> AmbiguityFamily:
    members = [equal_magnitude_family(r, p, q, base_l, theta=t) for t in thetas]
    members += [equal_magnitude_family(r, p, q, base_l, lam=s) for s in (1, -1)]
    return AmbiguityFamily(FamilyKind.EQUAL_MAGNITUDE_CONTINUUM, members,
                           {"r": r, "p": p, "q": q, "theta": list(thetas)})


def planar_cone_family(l, intensity: float, thetas: Sequence[float]) -> AmbiguityFamily:
    """Planar patches of constant brightness ``intensity``, one per feasible angle."""
    from .proposal_engine import reparam_a45, solve_center_r

    members = []
    for t in thetas:
        roots = solve_center_r(t, intensity, l)
        if not roots:
            continue
        a4, a5 = reparam_a45(t, roots[0], l)
        members.append((QuadShape(0.0, 0.0, 0.0, a4, a5), _as_light(l)))
    return AmbiguityFamily(FamilyKind.PLANAR_CONE, members,
                           {"intensity": intensity, "theta": list(thetas)})


# ---------------------------------------------------------------------------
# degeneracy

MONOMIAL_POWERS = [(p, d - p) for d in range(4, -1, -1) for p in range(d, -1, -1)]


def vandermonde_matrix(grid) -> np.ndarray:
    """Rows of all monomials ``x^p y^q`` with ``p + q <= 4`` (15 columns)."""
    grid = _as_grid(grid)
    x, y = grid.x, grid.y
    return np.stack([x ** p * y ** q for p, q in MONOMIAL_POWERS], axis=1)


def vandermonde_rank(grid) -> int:
    s = np.linalg.svd(vandermonde_matrix(grid), compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > RANK_RTOL * s[0]))


def is_nondegenerate(grid) -> bool:
    return vandermonde_rank(grid) == 15
