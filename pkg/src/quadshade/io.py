"""PFM / PGM images and the proposal container."""
from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

from .errors import FormatError
from .patch_model import LightVector
from .proposal_engine import NoiseModel, ProposalCollection, ScaleProposals, SolverConfig

SCHEMA_ID = "quadshade/proposals/v1"


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _atomic_write(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        fh.write(data)
    tmp.replace(path)


def _header_tokens(data: bytes, count: int, kind: str):
    """First ``count`` whitespace-separated header fields (``#`` comments skipped)
    and the offset of the byte following the single whitespace after the last one."""
    tokens = []
    i, n = 0, len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            i = data.find(b"\n", i)
            if i < 0:
                break
            continue
        j = i
        while j < n and not data[j:j + 1].isspace():
            j += 1
        if j >= n:
            break
        tokens.append(data[i:j])
        i = j
    if len(tokens) < count:
        raise FormatError(f"truncated or malformed {kind} header")
    return tokens, i + 1


# --------------------------------------------------------------------------- PFM

def write_pfm(path, array):
    """Little-endian PFM (scale -1), rows stored bottom to top."""
    a = np.asarray(array, dtype=np.float32)
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"cannot store array of shape {a.shape} as PFM")
    H, W = a.shape[:2]
    body = np.ascontiguousarray(a[::-1]).astype("<f4").tobytes()
    _atomic_write(path, tag + b"\n%d %d\n-1.0\n" % (W, H) + body)


def parse_pfm(data: bytes) -> np.ndarray:
    (tag, w, h, scale), start = _header_tokens(data, 4, "PFM")
    if tag not in (b"Pf", b"PF"):
        raise FormatError(f"not a PFM file (magic {tag!r})")
    try:
        W, H, scale = int(w), int(h), float(scale)
    except ValueError as exc:
        raise FormatError(f"bad PFM header: {exc}") from None
    if W <= 0 or H <= 0 or scale == 0:
        raise FormatError("bad PFM dimensions or scale")
    channels = 3 if tag == b"PF" else 1
    n = W * H * channels
    body = data[start:]
    if len(body) < 4 * n:
        raise FormatError(f"truncated PFM: expected {4 * n} data bytes, got {len(body)}")
    dtype = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(body[:4 * n], dtype=dtype).astype(np.float32)
    a = a.reshape((H, W, 3) if channels == 3 else (H, W))
    return np.ascontiguousarray(a[::-1])


def read_pfm(path) -> np.ndarray:
    return parse_pfm(_read_bytes(path))


# --------------------------------------------------------------------------- PGM

def write_pgm(path, array, maxval: int = 65535):
    """Binary 16-bit PGM (big-endian samples, as the format requires)."""
    a = np.asarray(array)
    if a.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    if not 255 < maxval <= 65535:
        raise ValueError("16-bit PGM needs 255 < maxval <= 65535")
    if a.min(initial=0) < 0 or a.max(initial=0) > maxval:
        raise ValueError("PGM values out of range")
    H, W = a.shape
    body = a.astype(">u2").tobytes()
    _atomic_write(path, b"P5\n%d %d\n%d\n" % (W, H, maxval) + body)


def parse_pgm(data: bytes) -> np.ndarray:
    (tag, w, h, mv), start = _header_tokens(data, 4, "PGM")
    if tag != b"P5":
        raise FormatError(f"not a binary PGM (magic {tag!r})")
    try:
        W, H, maxval = int(w), int(h), int(mv)
    except ValueError as exc:
        raise FormatError(f"bad PGM header: {exc}") from None
    if W <= 0 or H <= 0 or not 0 < maxval <= 65535:
        raise FormatError("bad PGM dimensions or maxval")
    wide = maxval > 255
    n = W * H * (2 if wide else 1)
    body = data[start:]
    if len(body) < n:
        raise FormatError(f"truncated PGM: expected {n} data bytes, got {len(body)}")
    return np.frombuffer(body[:n], dtype=">u2" if wide else "u1").reshape(H, W).astype(np.uint16)


def read_pgm(path) -> np.ndarray:
    return parse_pgm(_read_bytes(path))


def write_mask(path, mask):
    write_pgm(path, np.where(np.asarray(mask, dtype=bool), 65535, 0))


def read_mask(path) -> np.ndarray:
    return read_pgm(path) > 0


# --------------------------------------------------------------------------- JSON

def dumps_json(obj) -> str:
    """Deterministic JSON; Python float repr round-trips exactly."""
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


def write_json(path, obj):
    _atomic_write(path, dumps_json(obj).encode())


def read_json(path):
    try:
        return json.loads(_read_bytes(path))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


def _versions() -> dict:
    from . import __version__
    return {"quadshade": __version__, "numpy": np.__version__,
            "python": ".".join(map(str, sys.version_info[:3]))}


def container_dict(col: ProposalCollection, config_hash: str = "") -> dict:
    header = {
        "schema": SCHEMA_ID,
        "versions": _versions(),
        "config_hash": config_hash,
        "image_shape": list(col.image_shape),
        "light": col.light.array.tolist(),
        "noise": {"sigma_i": col.noise.sigma_i, "sigma_n0_sq": col.noise.sigma_n0_sq},
        "J": col.J,
        "solver": col.solver.as_dict(),
        "sizes": [s.size for s in col.scales],
        # the hash has its own header field; readers copy it into meta
        "meta": {k: v for k, v in col.meta.items() if k != "config_hash"},
    }
    scales = []
    for s in col.scales:
        recs = []
        nr, nc = s.grid_shape
        for i in range(nr):
            for j in range(nc):
                origin = [int(s.rows[i]), int(s.cols[j])]
                if not s.present[i, j]:
                    recs.append({"origin": origin, "absent": True})
                    continue
                recs.append({"origin": origin,
                             "theta": s.theta[i, j].tolist(),
                             "shapes": s.shapes[i, j].tolist(),
                             "sse": s.sse[i, j].tolist(),
                             "cost": s.cost[i, j].tolist()})
        scales.append({"size": s.size, "grid": [nr, nc], "records": recs})
    return {"header": header, "scales": scales}


def write_container(path, col: ProposalCollection, config_hash: str = ""):
    # one record per line keeps big files diffable and fast to emit
    d = container_dict(col, config_hash)
    parts = ["{\"header\": ", json.dumps(d["header"], sort_keys=True), ", \"scales\": ["]
    for k, sc in enumerate(d["scales"]):
        parts.append(",\n" if k else "\n")
        parts.append("{\"size\": %d, \"grid\": %s, \"records\": [\n" % (sc["size"], json.dumps(sc["grid"])))
        parts.append(",\n".join(json.dumps(r, sort_keys=True) for r in sc["records"]))
        parts.append("\n]}")
    parts.append("\n]}\n")
    _atomic_write(path, "".join(parts).encode())


def collection_from_dict(d: dict) -> ProposalCollection:
    try:
        header = d["header"]
        if header.get("schema") != SCHEMA_ID:
            raise FormatError(f"unsupported container schema {header.get('schema')!r}")
        H, W = header["image_shape"]
        J = int(header["J"])
        scales = []
        for sc in d["scales"]:
            size = int(sc["size"])
            nr, nc = sc["grid"]
            h = size // 2
            rows = np.arange(h, h + nr)
            cols = np.arange(h, h + nc)
            if nr != H - 2 * h or nc != W - 2 * h or len(sc["records"]) != nr * nc:
                raise FormatError(f"scale {size}: record grid does not match image shape")
            present = np.zeros((nr, nc), dtype=bool)
            theta = np.full((nr, nc, J), np.nan)
            shapes = np.full((nr, nc, J, 5), np.nan)
            sse = np.full((nr, nc, J), np.nan)
            cost = np.full((nr, nc, J), np.nan)
            for k, rec in enumerate(sc["records"]):
                i, j = divmod(k, nc)
                if list(rec["origin"]) != [int(rows[i]), int(cols[j])]:
                    raise FormatError(f"scale {size}: record {k} out of order")
                if rec.get("absent"):
                    continue
                present[i, j] = True
                theta[i, j] = rec["theta"]
                shapes[i, j] = rec["shapes"]
                sse[i, j] = rec["sse"]
                cost[i, j] = rec["cost"]
            scales.append(ScaleProposals(size, rows, cols, present, theta, shapes, sse, cost))
        return ProposalCollection((int(H), int(W)), LightVector.from_array(header["light"]),
                                  NoiseModel(**header["noise"]), J, scales,
                                  SolverConfig(**header["solver"]),
                                  {**header.get("meta", {}), "config_hash": header.get("config_hash", "")})
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed proposal container: {exc!r}") from None


def read_container(path) -> ProposalCollection:
    return collection_from_dict(read_json(path))
