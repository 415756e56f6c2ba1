"""Shared pieces of the acceptance suite: the criterion registry, the seeded
desk-scale corpus and the stored reconstruction baseline.

Run as a script to regenerate the baseline::

    python tests/acceptance_support.py --write-baseline
"""
from __future__ import annotations

import argparse
import functools
import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from quadshade.evalkit import surface_report
from quadshade.proposal_engine import infer_image
from quadshade.reconstructor import ReconConfig, reconstruct, trace_is_monotone
from quadshade.synth import RenderSpec, make_scene, strength_for_saturation

DATA = Path(__file__).parent / "data"
BASELINE = DATA / "recon_baseline.json"

CORPUS_SIZE = (64, 64)
CORPUS_SEEDS = (1, 2, 3, 4, 5, 6)
CORPUS_PATCH_SIZES = (5, 9, 17)
J = 21

RECON_SEEDS = (1, 2, 3)
RECON_PATCH_SIZES = (5, 9)
NOISE_SIGMA = 0.01
SPECULAR_ROUGHNESS = 0.3
SATURATED_FRACTION = 0.05

# criterion number -> list of (part, passed, detail)
RESULTS: dict = {}


def record(number: int, part: str, passed: bool, detail: str = ""):
    RESULTS.setdefault(number, []).append((part, passed, detail))


@contextmanager
def criterion(number: int, part: str):
    """Record the outcome of the enclosed block; ``info`` collects detail text."""
    info = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        info.setdefault("error", f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        record(number, part, False, _detail(info, t0))
        raise
    record(number, part, True, _detail(info, t0))


def _detail(info, t0):
    parts = [f"{k}={v}" for k, v in info.items()]
    parts.append(f"time={time.perf_counter() - t0:.1f}s")
    return ", ".join(parts)


def summary_lines() -> list:
    lines = []
    for n in range(1, 10):
        parts = RESULTS.get(n)
        if not parts:
            lines.append(f"criterion {n}: NOT RUN")
            continue
        ok = all(p[1] for p in parts)
        lines.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}")
        for part, passed, detail in parts:
            lines.append(f"    {part}: {'pass' if passed else 'FAIL'} ({detail})")
    return lines


# ---------------------------------------------------------------- corpus

@functools.lru_cache(maxsize=None)
def corpus_scene(seed: int):
    return make_scene(seed, CORPUS_SIZE)


@functools.lru_cache(maxsize=None)
def corpus_proposals(seed: int):
    Z, img, mask, _, rs = corpus_scene(seed)
    return infer_image(img, mask, rs.light, CORPUS_PATCH_SIZES, J=J)


def specular_strength(Z) -> float:
    rs = RenderSpec(beckmann_roughness=SPECULAR_ROUGHNESS)
    return strength_for_saturation(Z, rs, SATURATED_FRACTION)


@functools.lru_cache(maxsize=None)
def robustness_proposals(seed: int, condition: str):
    """Proposals at the reconstruction sizes for ``clean``, ``noise`` or ``specular`` renders."""
    if condition == "clean":
        return corpus_proposals(seed)
    Z = corpus_scene(seed)[0]
    if condition == "noise":
        _, img, mask, _, rs = make_scene(seed, CORPUS_SIZE, noise=NOISE_SIGMA)
    elif condition == "specular":
        k = specular_strength(Z)
        _, img, mask, _, rs = make_scene(seed, CORPUS_SIZE, roughness=SPECULAR_ROUGHNESS,
                                         specular_strength=k)
    else:
        raise ValueError(condition)
    return infer_image(img, mask, rs.light, RECON_PATCH_SIZES, J=J)


def reconstruction_error(seed: int, condition: str):
    """(median angular error, trace monotone, result) for one corpus surface."""
    Z = corpus_scene(seed)[0]
    col = robustness_proposals(seed, condition)
    res = reconstruct(col, cfg=ReconConfig(patch_sizes=list(RECON_PATCH_SIZES)))
    return surface_report(res.Z, Z).q50, trace_is_monotone(res.trace, 1e-9), res


def load_baseline() -> dict:
    return json.loads(BASELINE.read_text())


def write_baseline():
    medians = {}
    for seed in RECON_SEEDS:
        medians[str(seed)] = reconstruction_error(seed, "clean")[0]
        print(f"seed {seed}: median {medians[str(seed)]:.4f} deg")
    DATA.mkdir(exist_ok=True)
    BASELINE.write_text(json.dumps({
        "description": "median normal angular error (degrees) of noiseless reconstructions",
        "size": list(CORPUS_SIZE), "patch_sizes": list(RECON_PATCH_SIZES), "J": J,
        "light_elevation": 60.0, "medians": medians}, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--write-baseline", action="store_true")
    if ap.parse_args().write_baseline:
        write_baseline()
