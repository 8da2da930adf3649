"""Command-line entry point wiring every pipeline stage to the file formats.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .avs import POLICIES, AvsConfig, run_avs
from .experiments import LAMBDA_SWEEP, Prepared, regularization_sweep, residual_views, write_sweep_csv
from .fitter import FitConfig, fit_base
from .guidance import attenuate, best_threshold, binarize, mask_metrics, write_mask_ppm
from .imageio import FormatError, read_fmap, write_fmap, write_ppm
from .metrics import ViewMetrics, ause, evaluate_views, pearson, summarize, write_metrics_csv, write_metrics_json
from .photometric import DEFAULT_LAMBDA, dssim_map, l1_map
from .raster import RenderOptions, render
from .scene import Camera, load_cameras, load_scene, save_cameras, save_scene
from .sh import sh_basis_size
from .solver import FitDiagnostics, SolverError, UncertFitConfig, fit_uncertainty_direct, fit_uncertainty_sgd
from .synthetic import DEGRADATIONS, SyntheticSpec, degrade_scene, generate_scene, holdout_split, make_sparse_split

log = logging.getLogger("splat_uncert")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def _image_path(images_dir, index: int) -> Path:
    return Path(images_dir) / f"view_{index:03d}.fmap"


def _load_images(images_dir, ids) -> list[np.ndarray]:
    out = []
    for i in ids:
        p = _image_path(images_dir, i)
        if not p.exists():
            raise DataError(f"missing image {p}")
        out.append(np.asarray(read_fmap(p), dtype=np.float64))
    return out


def _split_file(args) -> Path | None:
    if getattr(args, "split", None):
        return Path(args.split)
    if getattr(args, "cameras", None):
        p = Path(args.cameras).parent / "split.json"
        if p.exists():
            return p
    return None


def _select(args, spec: str, n: int) -> list[int]:
    """Resolve ``train``/``test``/``all`` or a comma list of view ids."""
    if spec == "all":
        return list(range(n))
    if spec in ("train", "test"):
        path = _split_file(args)
        if path is None:
            raise DataError(f"--views {spec} needs a split file (--split or split.json next to the cameras)")
        ids = json.loads(path.read_text())[spec]
    else:
        try:
            ids = [int(v) for v in spec.split(",") if v.strip()]
        except ValueError as exc:
            raise UsageError(f"invalid view list {spec!r}") from exc
    bad = [i for i in ids if not 0 <= i < n]
    if bad:
        raise DataError(f"view ids {bad} out of range for {n} cameras")
    return list(ids)


def _views(args, spec: str) -> tuple[list[int], list[tuple[Camera, np.ndarray]]]:
    cams = load_cameras(args.cameras)
    ids = _select(args, spec, len(cams))
    imgs = _load_images(args.images, ids)
    return ids, [(cams[i], img) for i, img in zip(ids, imgs)]


def _background_prior(value: str) -> bool | None:
    return {"auto": None, "on": True, "off": False}[value]


def _uncert_cfg(args) -> UncertFitConfig:
    return UncertFitConfig(
        iterations=args.iterations,
        learning_rate=args.learning_rate,
        lambda_reg=args.lambda_reg,
        prior_level=args.prior_b,
        background_prior=_background_prior(args.background_prior),
        seed=args.seed,
    )


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_datagen(args) -> int:
    spec = SyntheticSpec(
        primitive_count=args.primitives,
        view_count=args.views,
        width=args.width,
        height=args.height,
        degradation=args.degradation,
        subsample_fraction=args.subsample_fraction,
        jitter_sigma=args.jitter_sigma,
        fitted_color_degree=args.fitted_color_degree,
        backdrop_count=args.backdrop,
        holdout_every=args.holdout_every,
        sh_degree_uncert=args.sh_degree_uncert,
        seed=args.seed,
    )
    truth, cams, imgs = generate_scene(spec)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    save_scene(truth, out / "truth.json")
    save_scene(degrade_scene(truth, spec), out / "init.json")
    save_cameras(cams, out / "cameras.json")
    for i, img in enumerate(imgs):
        write_fmap(_image_path(out / "images", i), img)
        write_ppm(out / "images" / f"view_{i:03d}.ppm", img)
    if args.sparse:
        train, test = make_sparse_split(cams, args.sparse, spec.holdout_every)
    else:
        train, test = holdout_split(len(cams), spec.holdout_every)
    _write_json(out / "split.json", {"train": train, "test": test})
    _write_json(out / "spec.json", spec.to_dict())
    print(f"wrote {len(cams)} views, {len(truth)} primitives to {out}")
    return 0


def cmd_fit_base(args) -> int:
    scene = load_scene(args.scene)
    _, views = _views(args, args.views)
    cfg = FitConfig(iterations=args.iterations, seed=args.seed, lam=args.lam)
    fitted = fit_base(scene, views, cfg)
    save_scene(fitted, args.out)
    print(f"fitted {len(fitted)} primitives on {len(views)} views for {cfg.iterations} iterations")
    return 0


def cmd_fit_uncert(args) -> int:
    scene = load_scene(args.scene)
    degree = scene.sh_degree_uncert if args.sh_degree_uncert is None else args.sh_degree_uncert
    scene = scene.with_uncertainty(np.zeros((len(scene), sh_basis_size(degree))), degree)
    _, views = _views(args, args.views)
    residuals = residual_views(scene, views, args.lam)
    cfg = _uncert_cfg(args)
    if args.solver == "direct":
        fitted = fit_uncertainty_direct(scene, residuals, cfg)
    else:
        diag = FitDiagnostics()
        fitted = fit_uncertainty_sgd(scene, residuals, cfg, diag, log_every=args.log_every)
        if args.diagnostics:
            diag.write_csv(args.diagnostics)
    save_scene(fitted, args.out)
    print(f"fitted uncertainty (degree {degree}) on {len(views)} views")
    return 0


def cmd_render(args) -> int:
    scene = load_scene(args.scene)
    cams = load_cameras(args.camera)
    if not 0 <= args.index < len(cams):
        raise DataError(f"camera index {args.index} out of range ({len(cams)} cameras)")
    cam = cams[args.index]
    out = render(scene, cam, RenderOptions(background_uncertainty=args.background_uncert))
    if args.out_color:
        if str(args.out_color).endswith(".fmap"):
            write_fmap(args.out_color, out.color)
        else:
            write_ppm(args.out_color, out.color)
    if args.out_uncert:
        write_fmap(args.out_uncert, out.uncertainty_raw if args.raw else out.uncertainty)
    print(f"rendered {cam.width}x{cam.height}")
    return 0


def cmd_metrics(args) -> int:
    if args.error and args.uncert:
        e, u = read_fmap(args.error), read_fmap(args.uncert)
        if e.shape != u.shape:
            raise DataError(f"map dimensions differ: {e.shape} vs {u.shape}")
        rows = [ViewMetrics(Path(args.error).name, ause(e, u), pearson(e, u).value, pearson(e, u).degenerate)]
    elif args.scene and args.cameras and args.images:
        scene = load_scene(args.scene)
        ids, views = _views(args, args.views)
        opts = RenderOptions(background_uncertainty=args.background_uncert)
        triples = []
        for i, (cam, gt) in zip(ids, views):
            out = render(scene, cam, opts)
            err = dssim_map(out.color, gt) if args.error_kind == "dssim" else l1_map(out.color, gt)
            triples.append((f"view_{i:03d}", err, out.uncertainty))
        rows = evaluate_views(triples)
    else:
        raise UsageError("metrics needs --error and --uncert, or --scene, --cameras and --images")
    summary = summarize(rows)
    print(f"AUSE {summary['ause']:.3f}")
    print(f"Pearson {summary['pearson']:.3f}")
    if args.csv:
        write_metrics_csv(args.csv, rows)
    if args.json:
        write_metrics_json(args.json, rows)
    return 0


def cmd_avs(args) -> int:
    scene = load_scene(args.scene)
    _, pool = _views(args, args.views)
    _, holdout = _views(args, args.holdout_views)
    cfg = AvsConfig(
        initial_views=args.initial_views,
        selections=args.selections,
        base_iter_per_view=args.base_iter_per_view,
        uncert_iter_per_view=args.uncert_iter_per_view,
        seed=args.seed,
        lambda_reg=args.lambda_reg,
        prior_level=args.prior_b,
        background_prior=_background_prior(args.background_prior),
    )
    trace = run_avs(pool, holdout, cfg, args.policy, scene)
    trace.write_csv(args.out)
    print(f"selected {trace.selected}; final holdout PSNR {trace.final_psnr:.3f}")
    return 0


def cmd_guide(args) -> int:
    raw, u = read_fmap(args.raw), read_fmap(args.uncert)
    if raw.shape != u.shape:
        raise DataError(f"map dimensions differ: {raw.shape} vs {u.shape}")
    att = attenuate(raw, u)
    if args.out:
        write_fmap(args.out, att)
    if args.gt_mask:
        gt = read_fmap(args.gt_mask) > 0.5
        if args.threshold is None:
            r, a = best_threshold(raw, gt), best_threshold(att, gt)
            print(f"raw best F1 {r.f1:.3f} at {r.threshold:.2f}")
            print(f"attenuated best F1 {a.f1:.3f} at {a.threshold:.2f}")
            threshold = a.threshold
        else:
            threshold = args.threshold
            s = mask_metrics(binarize(att, threshold), gt)
            print(f"attenuated IoU {s.iou:.3f} F1 {s.f1:.3f} at {threshold:.2f}")
    else:
        threshold = 0.5 if args.threshold is None else args.threshold
    if args.out_mask:
        write_mask_ppm(args.out_mask, binarize(att, threshold))
    return 0


def cmd_sweep_reg(args) -> int:
    scene = load_scene(args.scene)
    cams = load_cameras(args.cameras)
    train = _select(args, args.views, len(cams))
    test = _select(args, args.test_views, len(cams))
    imgs = _load_images(args.images, range(len(cams))) if cams else []
    prep = Prepared(SyntheticSpec(), scene, cams, imgs, train, test, scene)
    rows = regularization_sweep(
        prep,
        LAMBDA_SWEEP,
        prior_level=args.prior_b,
        solver=args.solver,
        iterations=args.iterations,
        background_prior=_background_prior(args.background_prior),
    )
    write_sweep_csv(args.out, rows)
    for r in rows:
        print(f"lambda_reg {r.lambda_reg:g}: AUSE(DSSIM) {r.ause_dssim:.4f}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _add_scene_views(p, views_default="train"):
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--images", required=True, help="directory of view_NNN.fmap images")
    p.add_argument("--split", help="JSON with train/test ids (default: split.json next to the cameras)")
    p.add_argument("--views", default=views_default, help="train, test, all or a comma list of ids")


def _add_uncert_flags(p, iterations=400):
    p.add_argument("--iterations", type=int, default=iterations)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--lambda-reg", type=float, default=0.0)
    p.add_argument("--prior-b", type=float, default=1.0)
    p.add_argument("--background-prior", choices=("auto", "on", "off"), default="auto")


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="splat-uncert", description=__doc__.splitlines()[0])
    root.add_argument("--version", action="version", version=__version__)
    root.add_argument("--config", help="JSON file with flag defaults (flags override it)")
    root.add_argument("--seed", type=int, default=0)
    root.add_argument("--verbose", action="store_true")
    # The shared flags are also accepted after the subcommand name.
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = root.add_subparsers(dest="command", parser_class=_Parser)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    p = sub.add_parser("datagen", help="generate a synthetic scene, cameras and images")
    p.add_argument("--out", required=True)
    p.add_argument("--primitives", type=int, default=200)
    p.add_argument("--backdrop", type=int, default=200)
    p.add_argument("--views", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--degradation", choices=DEGRADATIONS, default="subsample")
    p.add_argument("--subsample-fraction", type=float, default=0.5)
    p.add_argument("--jitter-sigma", type=float, default=0.05)
    p.add_argument("--fitted-color-degree", type=int)
    p.add_argument("--holdout-every", type=int, default=8)
    p.add_argument("--sparse", type=int, default=0, help="farthest-point training split of this size")
    p.add_argument("--sh-degree-uncert", type=int, default=3)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("fit-base", help="fit geometry and color to training images")
    _add_scene_views(p)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_base)

    p = sub.add_parser("fit-uncert", help="fit the SH uncertainty channel to training residuals")
    _add_scene_views(p)
    _add_uncert_flags(p)
    p.add_argument("--sh-degree-uncert", type=int)
    p.add_argument("--lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--solver", choices=("sgd", "direct"), default="sgd")
    p.add_argument("--diagnostics", help="CSV of objective per logged iteration")
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_uncert)

    p = sub.add_parser("render", help="render color and uncertainty for one camera")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", "--cameras", dest="camera", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out-color")
    p.add_argument("--out-uncert")
    p.add_argument("--background-uncert", type=float, default=0.0)
    p.add_argument("--raw", action="store_true", help="write the unclamped uncertainty")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("metrics", help="AUSE and Pearson of uncertainty against error")
    p.add_argument("--error")
    p.add_argument("--uncert")
    p.add_argument("--scene")
    p.add_argument("--cameras")
    p.add_argument("--images")
    p.add_argument("--split")
    p.add_argument("--views", default="test")
    p.add_argument("--error-kind", choices=("dssim", "l1"), default="dssim")
    p.add_argument("--background-uncert", type=float, default=0.0)
    p.add_argument("--csv")
    p.add_argument("--json")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("avs", help="active view selection over a discrete pool")
    _add_scene_views(p)
    p.add_argument("--holdout-views", default="test")
    p.add_argument("--policy", choices=POLICIES, default="uncertainty")
    p.add_argument("--initial-views", type=int, default=4)
    p.add_argument("--selections", type=int, default=16)
    p.add_argument("--base-iter-per-view", type=int, default=100)
    p.add_argument("--uncert-iter-per-view", type=int, default=50)
    p.add_argument("--lambda-reg", type=float, default=0.32)
    p.add_argument("--prior-b", type=float, default=1.0)
    p.add_argument("--background-prior", choices=("auto", "on", "off"), default="auto")
    p.add_argument("--out", required=True, help="trace CSV")
    p.set_defaults(func=cmd_avs)

    p = sub.add_parser("guide", help="attenuate a change map by uncertainty")
    p.add_argument("--raw", required=True)
    p.add_argument("--uncert", required=True)
    p.add_argument("--out")
    p.add_argument("--gt-mask")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out-mask")
    p.set_defaults(func=cmd_guide)

    p = sub.add_parser("sweep-reg", help="AUSE across the lambda_reg doubling sweep")
    _add_scene_views(p)
    p.add_argument("--test-views", default="test")
    p.add_argument("--iterations", type=int, default=400)
    p.add_argument("--prior-b", type=float, default=1.0)
    p.add_argument("--background-prior", choices=("auto", "on", "off"), default="auto")
    p.add_argument("--solver", choices=("sgd", "direct"), default="direct")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_reg)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return root


def _parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(overrides, dict):
            raise DataError("config file must hold a JSON object")
        # Config values become defaults; explicit flags parsed again on top win.
        defaults = {k.replace("-", "_"): v for k, v in overrides.items()}
        parser.set_defaults(**defaults)
        for action in parser._subparsers._group_actions:
            for sp in action.choices.values():
                sp.set_defaults(**{k: v for k, v in defaults.items() if k in {a.dest for a in sp._actions}})
        args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage() + "splat-uncert: error: a subcommand is required")
    return args


def cli_main(argv=None) -> int:
    try:
        args = _parse(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return int(args.func(args) or 0)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (DataError, FormatError, SolverError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
