"""Command line: ``artifit {fit|synth|eval|selftest}``.

Options come from a TOML or JSON file (``--config``) with flags layered
on top.  Exit codes: 0 success, 1 invalid input or failed check, 2 I/O
or parse error.  ``ARTIFIT_THREADS`` caps the compiled kernels and BLAS.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import io
from .errors import ArtifitError, ParseError, UnsupportedFormat
from .fitter import FitConfig, fit_chamfer_icp, fit_em
from .metrics import chamfer, mpjpe, pck, v2v
from .model import ModelParams, forward, make_toy_humanoid
from .plot import convergence_svg
from .synth import ScanSpec, generate_scan, perturb_params, sample_params

log = logging.getLogger("artifit")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
METHODS = ("em", "chamfer")
INITS = ("centroid", "truth", "perturbed")
FORMATS = ("json", "csv")
METRIC_CONVENTIONS = {
    "units": "millimeters",
    "v2v_mm": "mean per-vertex distance between the fitted and true meshes",
    "chamfer_mm": "average of the two directed mean nearest-neighbour distances (not "
                  "squared) between fitted vertices and the scan's inlier points",
    "pck_100mm": "percent of joints closer than 100 mm",
}


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs; reports embed it in full."""

    model: str | None = None            # JSON model file; None means the toy humanoid
    scans: tuple = ()
    fit: FitConfig = field(default_factory=FitConfig)
    synth: ScanSpec = field(default_factory=ScanSpec)
    out: str = "artifit-out"
    report_format: str = "json"
    plot: bool = True
    seed: int = 0
    method: str = "em"
    init: str = "centroid"
    toy_seed: int = 0
    toy_vertices: int = 800
    pose_scale: float = 0.3
    shape_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scans", tuple(str(s) for s in self.scans))
        if not self.out:
            raise ValueError("output directory must be nonempty")
        if self.model is not None and not self.model:
            raise ValueError("model path must be nonempty")
        if any(not s for s in self.scans):
            raise ValueError("scan paths must be nonempty")
        for name, allowed in (("report_format", FORMATS), ("method", METHODS), ("init", INITS)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["scans"] = list(self.scans)
        d["fit"] = self.fit.to_dict()
        d["synth"] = self.synth.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        # a run report can be fed back as a config
        if "config" in d and "report" in d:
            d = dict(d["config"])
        fit = FitConfig.from_dict(d.pop("fit", {}))
        synth = ScanSpec(**d.pop("synth", {}))
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(fit=fit, synth=synth, **d)


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_dict(io.read_config(args.config)) if args.config else RunConfig()
    top = {}
    for name in ("model", "out", "method", "init"):
        if getattr(args, name, None) is not None:
            top[name] = getattr(args, name)
    if getattr(args, "scan", None):
        top["scans"] = tuple(args.scan)
    if getattr(args, "format", None):
        top["report_format"] = args.format
    if getattr(args, "no_plot", False):
        top["plot"] = False
    if getattr(args, "vertices", None) is not None:
        top["toy_vertices"] = args.vertices
    fit, synth = cfg.fit, cfg.synth
    if args.seed is not None:
        top["seed"] = args.seed
        fit = replace(fit, seed=args.seed)
        synth = replace(synth, seed=args.seed)
    if args.mu is not None:
        fit = replace(fit, mu=args.mu)
    spec = {k: v for k, v in (("noise_sigma", getattr(args, "noise", None)),
                              ("outlier_frac", getattr(args, "outliers", None)),
                              ("n_points", getattr(args, "points", None)),
                              ("view", getattr(args, "view", None))) if v is not None}
    if spec:
        synth = replace(synth, **spec)
    return replace(cfg, fit=fit, synth=synth, **top)


def apply_thread_cap():
    """Honour ``ARTIFIT_THREADS`` for the compiled kernels and BLAS."""
    raw = os.environ.get("ARTIFIT_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"ARTIFIT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError("ARTIFIT_THREADS must be at least 1")
    import numba
    from threadpoolctl import threadpool_limits

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    threadpool_limits(limits=n)
    return n


def load_model(cfg: RunConfig):
    if cfg.model is None:
        return make_toy_humanoid(cfg.toy_seed, cfg.toy_vertices)
    return io.read_model(cfg.model)


def _initial_params(cfg: RunConfig, scan_path: str, n_shape: int, n_joints: int):
    if cfg.init == "centroid":
        return None
    truth = io.read_scan_truth(scan_path)["truth_params"]
    if truth.beta.shape != (n_shape,) or truth.theta.shape != (n_joints, 3):
        raise ValueError(f"{scan_path}: truth parameters do not match the model")
    return truth if cfg.init == "truth" else perturb_params(truth, 1000 + cfg.seed)


def _fit_one(cfg: RunConfig, model, scan_path: str, out_dir: Path) -> dict:
    cloud = io.read_point_cloud(scan_path)
    init = _initial_params(cfg, scan_path, model.n_shape, model.n_joints)
    fitter = fit_em if cfg.method == "em" else fit_chamfer_icp
    rep = fitter(cloud, model, cfg.fit, init)
    verts = forward(model, rep.params).vertices
    io.ensure_dir(out_dir)
    io.write_ply(out_dir / "fitted.ply", verts, faces=model.faces)
    report = {"config": cfg.to_dict(), "scan": str(scan_path), "seed": cfg.seed,
              "report": rep.to_dict(),
              "sigma2_itr_trace": [r.sigma2_itr for r in rep.trace],
              "wall_clock_s": rep.wall_clock}
    io.write_json(out_dir / "report.json", report)
    if cfg.report_format == "csv":
        io.write_trace_csv(out_dir / "trace.csv", rep.trace)
    if cfg.plot and rep.trace:
        (out_dir / "convergence.svg").write_text(convergence_svg(rep.trace), encoding="utf-8")
    log.info("%s: %d iterations, %s, sigma2 %.3g", scan_path, rep.iterations,
             rep.termination, rep.sigma2)
    return report


def cmd_fit(cfg: RunConfig, args) -> int:
    if not cfg.scans:
        raise ValueError("fit needs at least one --scan")
    for s in cfg.scans:
        if not Path(s).is_file():
            raise FileNotFoundError(f"scan not found: {s}")
    model = load_model(cfg)
    out = io.ensure_dir(cfg.out)
    for s in cfg.scans:
        _fit_one(cfg, model, s, out if len(cfg.scans) == 1 else out / Path(s).stem)
    return EXIT_OK


def cmd_synth(cfg: RunConfig, args) -> int:
    model = load_model(cfg)
    truth = sample_params(model, cfg.seed, cfg.pose_scale, cfg.shape_scale)
    scan = generate_scan(model, truth, cfg.synth)
    out = io.ensure_dir(cfg.out)
    io.write_scan(out / "scan.ply", scan)
    io.write_model(out / "model.json", model)
    io.write_json(out / "synth_config.json", cfg.to_dict())
    log.info("wrote %d points to %s", len(scan.cloud), out / "scan.ply")
    return EXIT_OK


def evaluate_report(report_path, truth_path=None) -> dict:
    """Metrics of a fit report against the truth sidecar of its scan."""
    rep = io.read_json(report_path)
    try:
        cfg = RunConfig.from_dict(rep["config"])
        params = ModelParams.from_dict(rep["report"]["params"])
        scan_path = truth_path or rep["scan"]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"not a fit report, missing {exc}", str(report_path)) from None
    model = load_model(cfg)
    truth = io.read_scan_truth(scan_path)
    pred = forward(model, params)
    true = forward(model, truth["truth_params"])
    points = io.read_point_cloud(scan_path).points
    mask = truth["outlier_mask"]
    if mask.size == points.shape[0]:
        points = points[~mask]
    return {"report": str(report_path), "scan": str(scan_path),
            "v2v_mm": v2v(pred.vertices, true.vertices),
            "mpjpe_mm": mpjpe(pred.joints, true.joints),
            "pck_100mm": pck(pred.joints, true.joints, 100.0),
            "chamfer_mm": chamfer(pred.vertices, points)}


def cmd_eval(cfg: RunConfig, args) -> int:
    reports = args.report or []
    if not reports:
        raise ValueError("eval needs at least one --report")
    for r in reports:
        if not Path(r).is_file():
            raise FileNotFoundError(f"report not found: {r}")
    truths = args.truth or [None] * len(reports)
    if len(truths) != len(reports):
        raise ValueError("give one --truth per --report or none")
    workers = int(os.environ.get("ARTIFIT_THREADS", "0") or 0) or min(4, os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(evaluate_report, reports, truths))
    out = io.ensure_dir(cfg.out)
    io.write_json(out / "metrics.json", {"config": cfg.to_dict(), "metrics": rows,
                                         "conventions": METRIC_CONVENTIONS})
    if cfg.report_format == "csv":
        io.write_rows_csv(out / "metrics.csv", rows)
    for r in rows:
        print(f"{r['report']}: V2V {r['v2v_mm']:.2f} mm  MPJPE {r['mpjpe_mm']:.2f} mm  "
              f"PCK@100 {r['pck_100mm']:.3f}  Chamfer {r['chamfer_mm']:.2f} mm")
    return EXIT_OK


def cmd_selftest(cfg: RunConfig, args) -> int:
    from .selftest import run_selftest

    checks, rows = run_selftest(cfg.seed)
    out = io.ensure_dir(cfg.out)
    io.write_json(out / "selftest.json", {"seed": cfg.seed,
                                          "checks": [c.to_dict() for c in checks],
                                          "sweep": rows})
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  {c.value:.3g} (limit {c.limit:g})")
    print("noise_mm  outliers_%  V2V em (mm)  V2V chamfer (mm)")
    for r in rows:
        print(f"{r['noise_mm']:8.1f}  {r['outlier_pct']:10.0f}  {r['v2v_em_mm']:11.2f}  "
              f"{r['v2v_chamfer_mm']:16.2f}")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_INVALID


COMMANDS = {"fit": cmd_fit, "synth": cmd_synth, "eval": cmd_eval, "selftest": cmd_selftest}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration")
    common.add_argument("--seed", type=int, help="seed for sampling and fitting")
    common.add_argument("--mu", type=float, help="outlier weight in [0, 1)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--format", choices=FORMATS, help="extra report format")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="artifit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    fit = sub.add_parser("fit", parents=[common], help="fit the template to scans")
    fit.add_argument("--scan", action="append", help="point cloud (PLY, OBJ, XYZ); repeatable")
    fit.add_argument("--model", help="JSON model (default: toy humanoid)")
    fit.add_argument("--method", choices=METHODS)
    fit.add_argument("--init", choices=INITS,
                     help="start at the cloud centroid, or at / near the scan's truth sidecar")
    fit.add_argument("--vertices", type=int, help="toy humanoid vertex budget")
    fit.add_argument("--no-plot", action="store_true", help="skip the SVG convergence plot")

    syn = sub.add_parser("synth", parents=[common], help="write a synthetic scan")
    syn.add_argument("--model", help="JSON model (default: toy humanoid)")
    syn.add_argument("--vertices", type=int, help="toy humanoid vertex budget")
    syn.add_argument("--points", type=int, help="number of scan points")
    syn.add_argument("--noise", type=float, help="Gaussian noise sigma in meters")
    syn.add_argument("--outliers", type=float, help="outlier fraction in [0, 1)")
    syn.add_argument("--view", choices=("full", "partial"))

    ev = sub.add_parser("eval", parents=[common], help="score fit reports against truth")
    ev.add_argument("--report", action="append", help="report.json from fit; repeatable")
    ev.add_argument("--truth", action="append", help="scan whose sidecar holds the truth")

    sub.add_parser("selftest", parents=[common], help="run the invariant checks and sweep")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        apply_thread_cap()
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (OSError, ParseError, UnsupportedFormat) as exc:
        print(f"artifit: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArtifitError, ValueError, TypeError) as exc:
        print(f"artifit: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
