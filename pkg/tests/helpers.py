"""Seeded generators shared by the test modules."""
from fractions import Fraction

import numpy as np

from quadshade.patch_model import LightVector, PatchGrid, QuadShape, normals

GRID5 = PatchGrid.square(5)


def random_light(rng, min_planar=0.2, max_cos=0.95):
    """Random light with lz / |l| <= max_cos and a clear planar component."""
    while True:
        el = rng.uniform(np.radians(20.0), np.arcsin(max_cos))
        az = rng.uniform(-np.pi, np.pi)
        strength = rng.uniform(0.5, 1.5)
        l = strength * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        if np.hypot(l[0], l[1]) >= min_planar * strength and l[2] / np.linalg.norm(l) <= max_cos:
            return LightVector.from_array(l)


def shadow_free(a, l, grid=GRID5, margin=0.05):
    n = normals(a, grid)
    return bool(np.all(n @ l.array / np.linalg.norm(n, axis=1) > margin))


def random_generic_pair(rng, grid=GRID5, curv=0.15, slope=0.6, min_gap=0.02):
    """(a, l) with unequal Hessian magnitudes, shadow-free on ``grid``."""
    while True:
        a = QuadShape(*rng.uniform(-curv, curv, 3), *rng.uniform(-slope, slope, 2))
        e = np.linalg.eigvalsh(a.hessian())
        if abs(abs(e[0]) - abs(e[1])) < min_gap or np.min(np.abs(e)) < min_gap:
            continue
        l = random_light(rng)
        if shadow_free(a, l, grid):
            return a, l


def rms(u, v):
    return float(np.sqrt(np.mean((np.asarray(u) - np.asarray(v)) ** 2)))


def exact_rank(points):
    """Rank of the degree-4 monomial matrix by exact rational elimination."""
    rows = [[Fraction(x) ** p * Fraction(y) ** q for p, q in
             [(p, d - p) for d in range(4, -1, -1) for p in range(d, -1, -1)]] for x, y in points]
    rank, col = 0, 0
    while rank < len(rows) and col < 15:
        piv = next((i for i in range(rank, len(rows)) if rows[i][col] != 0), None)
        if piv is None:
            col += 1
            continue
        rows[rank], rows[piv] = rows[piv], rows[rank]
        for i in range(len(rows)):
            if i != rank and rows[i][col] != 0:
                f = rows[i][col] / rows[rank][col]
                rows[i] = [u - f * v for u, v in zip(rows[i], rows[rank])]
        rank += 1
        col += 1
    return rank
