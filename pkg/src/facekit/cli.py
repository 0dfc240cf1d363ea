"""``facekit`` command-line entry point.

Every subcommand accepts ``--config file.toml``; its tables mirror the
library configuration objects (``[nicp]``, ``[fit]``, ``[cylindrical]``,
``[benchmark]``, ``[bake]``, ``[refine]``, ``[model]``) and unknown keys are
rejected. Flags override config values. Exit status: 0 success, 1 invalid
input or usage, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import FacekitError, NumericalError

log = logging.getLogger("facekit")

_SECTIONS = {
    "nicp": {"stiffness_schedule", "landmark_weight", "max_inner_iterations", "convergence_tol",
             "gamma", "max_distance", "max_normal_angle", "reject_boundary"},
    "fit": {"lambda_pixel", "lambda_id", "lambda_exp", "lambda_alb", "id_mean", "id_inv_cov",
            "exp_mean", "exp_inv_cov", "alb_mean", "alb_inv_cov", "max_iterations",
            "alternations", "landmark_only", "sh_coefficients", "camera_mode", "focal_length",
            "principal_point", "tol", "pixel_rounds", "depth_eps"},
    "cylindrical": {"theta_resolution", "height_resolution", "max_edge_mm", "padding", "up"},
    "benchmark": {"depth_resolution", "halve_chamfer"},
    "bake": {"resolution", "max_offset"},
    "refine": {"smoothness", "fallback_weight"},
    "model": {"exp_rank", "id_rank", "hooi_iterations"},
    "rig": {"subdivision_level"},
}
_TOP = {"threads", "log_level"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def load_config(path):
    """Parse and validate a TOML config; returns a plain dict."""
    if path is None:
        return {}
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    from .errors import ParseError, ValidationError

    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"bad config {path}: {exc}") from None
    for key, value in doc.items():
        if key in _TOP:
            continue
        if key not in _SECTIONS:
            raise ValidationError(f"unknown config section or key {key!r}")
        if not isinstance(value, dict):
            raise ValidationError(f"config entry {key!r} must be a table")
        unknown = set(value) - _SECTIONS[key]
        if unknown:
            raise ValidationError(f"unknown keys in [{key}]: {sorted(unknown)}")
    return doc


def _section(cfg, name, **overrides):
    d = dict(cfg.get(name, {}))
    d.update({k: v for k, v in overrides.items() if v is not None})
    return d


def _jsonable(x):
    if dataclasses.is_dataclass(x):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(x).items()}
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def _log_config(name, resolved):
    """Log the resolved config; returns header comments for mesh artifacts."""
    text = json.dumps(_jsonable(resolved), sort_keys=True)
    log.info("resolved %s config: %s", name, text)
    return [f"facekit {name} config {text}"]


# ---------------------------------------------------------------------------
# subcommands


def cmd_build_model(args, cfg):
    from .io import load_mesh, save_model
    from .morphable import MeshTensor, relative_error, tucker_decompose
    from .errors import ValidationError

    root = Path(args.meshes)
    ids = sorted(p for p in root.iterdir() if p.is_dir())
    if not ids:
        raise ValidationError(f"no identity directories under {root}")
    meshes = []
    for d in ids:
        files = sorted(d.glob("*.ply")) + sorted(d.glob("*.obj"))
        meshes.append([load_mesh(f) for f in sorted(files, key=lambda p: p.stem)])
    tensor = MeshTensor.from_meshes(meshes)
    opts = _section(cfg, "model", exp_rank=args.exp_rank, id_rank=args.id_rank,
                    hooi_iterations=args.hooi)
    re = int(opts.get("exp_rank") or tensor.expression_count)
    ri = int(opts.get("id_rank") or tensor.identity_count)
    hooi = int(opts.get("hooi_iterations", 0))
    _log_config("build-model", {"exp_rank": re, "id_rank": ri, "hooi_iterations": hooi})
    model = tucker_decompose(tensor, re, ri, hooi)
    log.info("relative reconstruction error %.3e", relative_error(tensor, model))
    save_model(model, args.out)


def _read_landmarks(path):
    from .errors import ValidationError

    doc = json.loads(Path(path).read_text())
    try:
        return np.asarray(doc["indices"], dtype=np.int64), np.asarray(doc["points"], float)
    except (KeyError, TypeError):
        raise ValidationError("landmark file needs 'indices' and 'points'") from None


def cmd_fit(args, cfg):
    from .fitting import FitConfig, fit_image
    from .io import load_model, read_albedo, read_ppm

    model = load_model(args.model)
    idx, pts = _read_landmarks(args.landmarks)
    fit_cfg = FitConfig(**_section(cfg, "fit"))
    _log_config("fit", fit_cfg)
    image = read_ppm(Path(args.image).read_bytes()) if args.image else None
    albedo = read_albedo(Path(args.albedo).read_bytes()) if args.albedo else None
    fitted = fit_image(model, pts, fit_cfg, image=image, landmark_indices=idx, albedo=albedo)
    doc = fitted.to_dict()
    doc["config"] = _jsonable(fit_cfg)
    Path(args.out).write_text(json.dumps(doc, indent=2))
    return 0


def cmd_rig(args, cfg):
    from .detail import KeyExpressionDetails, rig_detailed
    from .io import load_float_map, load_mesh, save_mesh
    from .morphable import BlendshapeSet

    shapes = BlendshapeSet([load_mesh(p) for p in sorted(Path(args.blendshapes).glob("*.ply"))])
    maps = [load_float_map(p) for p in sorted(Path(args.details).glob("*.fmap"))]
    kw = None
    key_file = Path(args.key_weights) if args.key_weights else Path(args.details) / "key_weights.json"
    if key_file.exists():
        kw = np.asarray(json.loads(key_file.read_text()), dtype=np.float64)
    details = KeyExpressionDetails(maps, kw)
    alpha = np.asarray(json.loads(Path(args.alpha).read_text()), dtype=np.float64)
    level = int(_section(cfg, "rig", subdivision_level=args.subdiv).get("subdivision_level", 0))
    prov = _log_config("rig", {"subdivision_level": level, "n_blendshapes": len(shapes),
                        "n_details": len(maps)})
    save_mesh(rig_detailed(shapes, details, alpha, level), args.out, comments=prov)


def cmd_bake(args, cfg):
    from .io import load_mesh, save_float_map
    from .registration import bake_displacement

    opts = _section(cfg, "bake", resolution=args.res, max_offset=args.max_offset)
    res = int(opts.get("resolution", 1024))
    off = float(opts.get("max_offset", 10.0))
    _log_config("bake-disp", {"resolution": res, "max_offset": off})
    disp, rep = bake_displacement(load_mesh(args.base), load_mesh(args.scan), res, off,
                                  return_report=True)
    log.info("baked %d of %d chart pixels (%.1f%%)", rep.valid_pixels, rep.chart_pixels,
             100 * rep.coverage)
    save_float_map(disp, args.out)


def cmd_apply(args, cfg):
    from .io import load_float_map, load_mesh, save_mesh
    from .registration import apply_displacement

    prov = _log_config("apply-disp", {"subdivision_level": args.subdiv})
    save_mesh(apply_displacement(load_mesh(args.base), load_float_map(args.disp), args.subdiv),
              args.out, comments=prov)


def cmd_refine(args, cfg):
    from .io import load_float_map, load_mesh, save_mesh
    from .registration import refine_with_flow

    opts = _section(cfg, "refine", smoothness=args.smoothness)
    prov = _log_config("refine", opts)
    out, rep = refine_with_flow(load_mesh(args.mesh_e), load_mesh(args.mesh_n),
                                load_float_map(args.flow), return_report=True, **opts)
    log.info("flow coverage %.1f%%, residual %.2e", 100 * rep.coverage, rep.residual)
    save_mesh(out, args.out, comments=prov)


def cmd_register(args, cfg):
    from .errors import ValidationError
    from .io import load_mesh, save_mesh
    from .registration import NicpConfig, nicp_register

    template, scan = load_mesh(args.template), load_mesh(args.scan)
    if args.landmarks:
        doc = json.loads(Path(args.landmarks).read_text())
        pairs = (doc["template_indices"], doc["scan_points"])
    elif template.landmark_indices is not None and scan.landmark_indices is not None:
        pairs = (template.landmark_indices, scan.vertices[scan.landmark_indices])
    else:
        raise ValidationError("need --landmarks or landmark side-cars on both meshes")
    nicp = NicpConfig(**_section(cfg, "nicp"))
    prov = _log_config("register", nicp)
    save_mesh(nicp_register(template, scan, pairs, nicp), args.out, comments=prov)


def cmd_eval(args, cfg):
    from .benchmark import BenchmarkConfig, run_benchmark
    from .io import load_manifest

    bc = BenchmarkConfig(cylindrical=_section(cfg, "cylindrical"), threads=args.threads,
                         **_section(cfg, "benchmark"))
    _log_config("eval", bc)
    report = run_benchmark(load_manifest(args.manifest), bc)
    Path(args.out).write_text(report.to_json())
    log.info("success rate %.1f%%", report.success_rate)


def cmd_report(args, cfg):
    from .benchmark import BenchmarkReport, report_csv, report_markdown

    report = BenchmarkReport.from_dict(json.loads(Path(args.input).read_text()))
    text = report_csv(report) if args.format == "csv" else report_markdown(report)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_synth(args, cfg):
    from .synth import synth_fixtures

    _log_config("synth-fixtures", {"seed": args.seed, "identities": args.identities})
    synth_fixtures(args.seed, args.out, n_identities=args.identities)


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="facekit", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $FACEKIT_THREADS or 1)")
    p.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("build-model", help="Tucker-decompose <identity>/<expression>.ply meshes")
    s.add_argument("--meshes", required=True)
    s.add_argument("--exp-rank", type=int)
    s.add_argument("--id-rank", type=int)
    s.add_argument("--hooi", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_model)

    s = sub.add_parser("fit", help="fit the model to 2D landmarks (and optionally an image)")
    s.add_argument("--model", required=True)
    s.add_argument("--landmarks", required=True)
    s.add_argument("--image")
    s.add_argument("--albedo")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("rig", help="detailed mesh for blendshape weights")
    s.add_argument("--blendshapes", required=True)
    s.add_argument("--details", required=True)
    s.add_argument("--alpha", required=True)
    s.add_argument("--key-weights")
    s.add_argument("--subdiv", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rig)

    s = sub.add_parser("bake-disp", help="bake a displacement map from a scan onto a base mesh")
    s.add_argument("--base", required=True)
    s.add_argument("--scan", required=True)
    s.add_argument("--res", type=int)
    s.add_argument("--max-offset", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bake)

    s = sub.add_parser("apply-disp", help="subdivide a base mesh and apply a displacement map")
    s.add_argument("--base", required=True)
    s.add_argument("--disp", required=True)
    s.add_argument("--subdiv", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_apply)

    s = sub.add_parser("refine", help="refine an expression mesh with a UV flow field")
    s.add_argument("--mesh-e", required=True)
    s.add_argument("--mesh-n", required=True)
    s.add_argument("--flow", required=True)
    s.add_argument("--smoothness", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("register", help="non-rigid ICP of a template onto a scan")
    s.add_argument("--template", required=True)
    s.add_argument("--scan", required=True)
    s.add_argument("--landmarks")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("eval", help="run the benchmark over a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="format a benchmark report as a table")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("synth-fixtures", help="write deterministic synthetic fixtures")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--identities", type=int, default=3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
    except (FacekitError, OSError) as exc:
        print(f"facekit: {exc}", file=sys.stderr)
        return 1
    level = args.log_level or cfg.get("log_level", "WARNING")
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.WARNING),
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads or cfg.get("threads") or int(os.environ.get("FACEKIT_THREADS", "1"))
    args.threads = max(1, int(threads))
    try:
        args.func(args, cfg)
    except NumericalError as exc:
        print(f"facekit: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (FacekitError, OSError, TypeError, KeyError, json.JSONDecodeError) as exc:
        print(f"facekit: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
