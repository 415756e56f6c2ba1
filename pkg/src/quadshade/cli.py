"""Command-line entry point: ``quadshade {synth,infer,reconstruct,eval}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import evalkit, io, synth
from .config import config_from_dict
from .errors import ConfigError, FormatError, NonConvergence, QuadShadeError, ShapeMismatch
from .evalkit import config_hash
from .proposal_engine import infer_image
from .reconstructor import reconstruct

log = logging.getLogger("quadshade")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_NONCONVERGENCE = 5


class DataInconsistency(QuadShadeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("arguments", message)


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _size(text):
    vals = [int(v) for v in text.lower().replace("x", ",").split(",")]
    return vals * 2 if len(vals) == 1 else vals


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return io.read_json(path)
    except FormatError as exc:
        raise ConfigError("config", str(exc)) from None


def _merge(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for k, v in overrides.items():
        if v is None:
            continue
        if isinstance(v, dict):
            out[k] = _merge(out.get(k, {}) or {}, v)
        else:
            out[k] = v
    return out


def _hash_view(resolved: dict) -> dict:
    # settings that cannot change numeric results stay out of the hash
    return {k: v for k, v in resolved.items() if k not in ("workers", "paths")}


def _ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# --------------------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    cfg = config_from_dict(_merge(_load_config(args.config), {
        "seed": args.seed,
        "light": {"elevation": args.light_elev, "azimuth": args.light_azim},
        "scene": {"size": args.size, "noise_sigma": args.noise,
                  "beckmann_roughness": args.beckmann, "specular_strength": args.specular,
                  "amplitude": args.amplitude},
        "paths": {"out_dir": args.out_dir},
    }))
    sc = cfg.scene
    sspec = synth.SurfaceSpec(seed=cfg.seed, output_size=tuple(sc.size), amplitude=sc.amplitude)
    rs = synth.RenderSpec(cfg.light.resolve(), sc.noise_sigma, sc.beckmann_roughness,
                          sc.specular_strength if sc.beckmann_roughness is not None else 0.0)
    Z = synth.random_surface(sspec)
    image, mask = synth.render_scene(Z, rs, cfg.seed)
    out = _ensure_dir(args.out_dir)
    io.write_pfm(out / "image.pfm", image)
    io.write_pfm(out / "depth_true.pfm", Z)
    io.write_mask(out / "mask.pgm", mask)
    resolved = cfg.resolved()
    io.write_json(out / "scene.json", {"surface": sspec.describe(), "render": rs.describe(),
                                        "seed": cfg.seed, "light": rs.light.array.tolist(),
                                        "saturated_pixels": int((~mask).sum())})
    io.write_json(out / "config.resolved.json", resolved)
    return EXIT_OK


# --------------------------------------------------------------------------- infer

def _light_override(args):
    if args.light is not None:
        if len(args.light) != 3:
            raise ConfigError("light", "expected three components lx,ly,lz")
        return {"vector": args.light}
    if args.light_elev is not None:
        return {"elevation": args.light_elev}
    return {}


def cmd_infer(args) -> int:
    cfg = config_from_dict(_merge(_load_config(args.config), {
        "light": _light_override(args),
        "patch_sizes": args.sizes,
        "J": args.J,
        "noise": {"sigma_i": args.sigma_i},
        "workers": args.workers,
        "paths": {"image": args.image, "mask": args.mask, "out": args.out},
    }))
    image = io.read_pfm(args.image).astype(float)
    if image.ndim != 2:
        raise DataInconsistency("expected a single-channel intensity image")
    mask = io.read_mask(args.mask) if args.mask else np.ones(image.shape, dtype=bool)
    if mask.shape != image.shape:
        raise DataInconsistency(f"mask shape {mask.shape} differs from image {image.shape}")
    lit = mask & np.isfinite(image) & (image > 0)
    if not np.any(lit):
        raise DataInconsistency("no lit pixels: image and light are inconsistent (all shadow)")
    if any(s > min(image.shape) for s in cfg.patch_sizes):
        raise ConfigError("patch_sizes", "larger than the image")
    resolved = cfg.resolved()
    h = config_hash(_hash_view(resolved))
    col = infer_image(image, mask, cfg.light.resolve(), tuple(cfg.patch_sizes), cfg.noise_model(),
                      cfg.J, cfg.workers, cfg.solver_config())
    if not any(np.any(s.present) for s in col.scales):
        raise DataInconsistency("no patch has enough usable pixels")
    col.meta = {"config": _hash_view(resolved)}
    out = Path(args.out)
    _ensure_dir(out.parent)
    io.write_container(out, col, h)
    io.write_json(out.with_name(out.stem + ".config.json"), resolved)
    return EXIT_OK


# --------------------------------------------------------------------------- reconstruct

def cmd_reconstruct(args) -> int:
    recon = {"sigma0": args.sigma0, "sigma_factor": args.sigma_factor, "lam": args.lam,
             "D_phi": args.d_phi, "cg_iters": args.cg_iters, "patch_sizes": args.sizes}
    if args.no_dummy:
        recon["use_dummy"] = False
    base = _load_config(args.config)
    cfg = config_from_dict(_merge(base, {
        "reconstruction": recon, "workers": args.workers,
        "paths": {"proposals": args.proposals, "out_dir": args.out}}))
    col = io.read_container(args.proposals)
    rc = cfg.recon_config()
    if rc.patch_sizes is not None:
        missing = set(rc.patch_sizes) - {s.size for s in col.scales}
        if missing:
            raise ConfigError("reconstruction.patch_sizes", f"sizes {sorted(missing)} not in container")
    try:
        res = reconstruct(col, col.image_shape, rc, cfg.workers)
    except ValueError as exc:
        raise DataInconsistency(str(exc)) from None
    out = _ensure_dir(args.out)
    io.write_pfm(out / "depth.pfm", res.Z)
    scales = [col.scale(s) for s in rc.patch_sizes] if rc.patch_sizes else col.scales
    labels = {"J": res.labeling.J, "dummy_label": res.labeling.J + 1,
              "encoding": "1-based proposal index, J+1 = dummy, 0 = no patch",
              "scales": [{"size": s.size, "labels": (lab + 1).tolist()}
                         for s, lab in zip(scales, res.labeling.labels)]}
    io.write_json(out / "labels.json", labels)
    report = {"lambda": res.lam, "D_phi": res.D_phi, "schedule": rc.schedule(),
              "config": res.config, "converged": res.converged,
              "trace": res.trace, "dummy_fraction": res.labeling.dummy_fraction(),
              "label_histograms": [{"size": s.size, "counts": c}
                                   for s, c in zip(scales, res.labeling.histograms())],
              "container_config_hash": col.meta.get("config_hash", "")}
    io.write_json(out / "report.json", report)
    io.write_json(out / "config.resolved.json", cfg.resolved())
    if not res.converged:
        raise NonConvergence("depth refinement did not converge; outputs written")
    return EXIT_OK


# --------------------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    est = io.read_pfm(args.est).astype(float)
    truth = io.read_pfm(args.truth).astype(float)
    mask = io.read_mask(args.mask) if args.mask else None
    if est.shape != truth.shape:
        raise ShapeMismatch(f"estimate {est.shape} vs truth {truth.shape}")
    if mask is not None and mask.shape != truth.shape:
        raise ShapeMismatch(f"mask {mask.shape} vs truth {truth.shape}")
    meta = {"est": str(args.est), "truth": str(args.truth), "method": "surface_report"}
    rep = evalkit.surface_report(est, truth, mask, meta)
    out = Path(args.out)
    _ensure_dir(out.parent)
    io.write_json(out, rep.to_dict())
    if args.csv:
        if args.proposals is None:
            raise ConfigError("csv", "--csv needs --proposals for the best-of-N table")
        col = io.read_container(args.proposals)
        normals = synth.normals_from_depth(truth)
        curves = [evalkit.n_best_curve(s, normals, None, mask) for s in col.scales]
        with open(args.csv, "w") as fh:
            fh.write(evalkit.curve_table_csv(curves))
    return EXIT_OK


# --------------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quadshade", description="Shape from shading with local shape proposals.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a random synthetic scene")
    s.add_argument("--seed", type=int)
    s.add_argument("--size", type=_size, help="N or HxW")
    s.add_argument("--light-elev", type=float)
    s.add_argument("--light-azim", type=float)
    s.add_argument("--noise", type=float)
    s.add_argument("--beckmann", type=float, help="Beckmann roughness; enables highlights")
    s.add_argument("--specular", type=float, help="specular strength")
    s.add_argument("--amplitude", type=float)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("infer", help="per-patch shape proposals")
    s.add_argument("--image", required=True)
    s.add_argument("--mask")
    s.add_argument("--light", type=_float_list, help="lx,ly,lz")
    s.add_argument("--light-elev", type=float)
    s.add_argument("--sizes", type=_int_list)
    s.add_argument("--J", type=int)
    s.add_argument("--sigma-i", type=float)
    s.add_argument("--workers", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("reconstruct", help="depth from a proposal container")
    s.add_argument("--proposals", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--sigma0", type=float)
    s.add_argument("--sigma-factor", type=float)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--d-phi", type=float)
    s.add_argument("--cg-iters", type=int)
    s.add_argument("--sizes", type=_int_list)
    s.add_argument("--no-dummy", action="store_true")
    s.add_argument("--workers", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("eval", help="angular error of a depth map")
    s.add_argument("--est", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--mask")
    s.add_argument("--out", required=True)
    s.add_argument("--proposals", help="container for the best-of-N table")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.INFO)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonConvergence as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (DataInconsistency, ShapeMismatch, QuadShadeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
