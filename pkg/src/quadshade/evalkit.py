"""Angular-error metrics and the local / global evaluation protocols."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch, ZeroVector
from .synth import normals_from_depth

QUANTILES = (0.25, 0.5, 0.75)


def angular_error(n_est, n_true) -> float:
    """Angle in degrees between two (not necessarily unit) vectors."""
    a = np.asarray(n_est, dtype=float)
    b = np.asarray(n_true, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("angular error of a zero vector")
    # atan2 form: arccos of the normalised dot product loses precision near 0 and 180
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b)))


def angular_error_field(n_est, n_true) -> np.ndarray:
    """Per-element angular error (degrees) over the last axis."""
    a = np.asarray(n_est, dtype=float)
    b = np.asarray(n_true, dtype=float)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ZeroVector("angular error of a zero vector")
    return np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), np.sum(a * b, axis=-1)))


def quantiles(values) -> dict:
    q = np.quantile(np.asarray(values, dtype=float), QUANTILES, method="linear")
    return {"q25": float(q[0]), "q50": float(q[1]), "q75": float(q[2])}


@dataclass
class ErrorReport:
    errors: np.ndarray
    q25: float
    q50: float
    q75: float
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"q25": self.q25, "q50": self.q50, "q75": self.q75,
                "mean": float(np.mean(self.errors)), "count": int(self.errors.size),
                "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def surface_report(Z_est, Z_true, mask=None, meta=None) -> ErrorReport:
    Z_est = np.asarray(Z_est, dtype=float)
    Z_true = np.asarray(Z_true, dtype=float)
    if Z_est.shape != Z_true.shape:
        raise ShapeMismatch(f"{Z_est.shape} vs {Z_true.shape}")
    err = angular_error_field(normals_from_depth(Z_est), normals_from_depth(Z_true))
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    err = err.ravel()
    return ErrorReport(err, **quantiles(err), meta=dict(meta or {}))


def proposal_patch_errors(scale, truth_normals, image_mask=None) -> np.ndarray:
    """Mean angular error of every proposal over its patch, shape (nr, nc, J).

    Only masked-in pixels count; absent patches are nan.
    """
    size = scale.size
    h = size // 2
    nr, nc = scale.grid_shape
    J = scale.J
    total = np.zeros((nr, nc, J))
    count = np.zeros((nr, nc, 1))
    H, W = truth_normals.shape[:2]
    if image_mask is None:
        image_mask = np.ones((H, W), dtype=bool)
    a = scale.shapes
    r0, c0 = scale.rows[0], scale.cols[0]
    for dy in range(-h, h + 1):
        for dx in range(-h, h + 1):
            sl = (slice(r0 + dy, r0 + dy + nr), slice(c0 + dx, c0 + dx + nc))
            t = truth_normals[sl][:, :, None, :]
            m = image_mask[sl][:, :, None]
            nx = -2 * a[..., 0] * dx - a[..., 2] * dy - a[..., 3]
            ny = -a[..., 2] * dx - 2 * a[..., 1] * dy - a[..., 4]
            est = np.stack([nx, ny, np.ones_like(nx)], axis=-1)
            e = angular_error_field(est, np.broadcast_to(t, est.shape))
            total += np.where(m, e, 0.0)
            count += m
    with np.errstate(invalid="ignore", divide="ignore"):
        out = total / count
    out[~scale.present] = np.nan
    return out


def n_best_series(costs: np.ndarray, errors: np.ndarray) -> np.ndarray:
    """Best-of-N error for N = 1..J after ordering proposals by increasing cost.

    ``costs`` and ``errors`` have shape (P, J); ties in cost keep angle order.
    """
    order = np.argsort(costs, axis=-1, kind="stable")
    sorted_err = np.take_along_axis(errors, order, axis=-1)
    return np.minimum.accumulate(sorted_err, axis=-1)


def n_best_curve(scale, truth_normals, N_max: int | None = None, image_mask=None) -> dict:
    """Quantiles over patches of the best-of-N mean angular error, for N = 1..N_max."""
    err = proposal_patch_errors(scale, truth_normals, image_mask)
    present = scale.present
    costs = scale.cost[present]
    series = n_best_series(costs, err[present])
    N_max = N_max or scale.J
    table = {}
    for n in range(1, N_max + 1):
        table[n] = quantiles(series[:, min(n, scale.J) - 1])
    return {"size": scale.size, "patches": int(present.sum()), "curve": table,
            "series": series}


def curve_table_csv(curves) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["size", "N", "q25", "q50", "q75"])
    for c in curves:
        for n, q in c["curve"].items():
            w.writerow([c["size"], n, repr(q["q25"]), repr(q["q50"]), repr(q["q75"])])
    return buf.getvalue()
