"""Command-line entry point: ``scarforge <command> ...``.

Exit codes: 0 success, 1 configuration/validation error, 2 partial data error.
Options may also come from a JSON file given with ``--config``; explicit flags
take precedence over the file.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import atlas as aha
from . import diffusion, maskgen, metrics, nrrd, register
from .phantom import lv_phantom
from .volume import GeometryError, Mask3, Volume3, crop_to_bbox, reorient, resample, rescale_intensity, zscore_normalize

log = logging.getLogger("scarforge")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


class ConfigError(Exception):
    pass


def _threads(value) -> int:
    if value is None:
        value = os.environ.get("SCARFORGE_THREADS", 1)
    try:
        n = int(value)
    except ValueError as e:
        raise ConfigError(f"invalid thread count {value!r}") from e
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def _merge(args, defaults: dict) -> dict:
    """Flags beat the JSON config, which beats built-in defaults."""
    cfg = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
    unknown = set(cfg) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update(cfg)
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _load(path, kind=None):
    try:
        v = nrrd.load_nrrd(path)
    except nrrd.NrrdError as e:
        raise ConfigError(str(e)) from e
    if kind is Mask3 and not isinstance(v, Mask3):
        v = Mask3(v.data != 0, v.spacing, v.origin, v.orientation)
    if kind is Volume3 and not isinstance(v, Volume3):
        v = Volume3(v.data.astype(np.float64), v.spacing, v.origin, v.orientation)
    return v


# --------------------------------------------------------------------------- phantom

def cmd_phantom(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = int(args.size)
    ph = lv_phantom((size, size, size), (args.spacing,) * 3, seed=args.seed)
    nrrd.save_nrrd(ph.myocardium, out / "myocardium.nrrd")
    nrrd.save_nrrd(ph.labels, out / "atlas.nrrd")
    nrrd.save_nrrd(ph.image, out / "image.nrrd")
    print(f"wrote phantom ({size}^3, {ph.myocardium.count} myocardium voxels) to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- convert

def cmd_convert(args) -> int:
    v = _load(args.input)
    if args.orientation:
        v = reorient(v, args.orientation)
    if args.spacing:
        interp = args.interp or ("trilinear" if isinstance(v, Volume3) else "nearest")
        v = resample(v, args.spacing, interp)
    if args.crop_mask:
        m = _load(args.crop_mask, Mask3)
        v, offset = crop_to_bbox(v, m, args.margin)
        print(f"cropped at offset {offset} to dims {v.dims}")
    if args.rescale:
        v = rescale_intensity(v, *args.rescale)
    if args.zscore:
        v = zscore_normalize(v)
    nrrd.save_nrrd(v, args.output)
    return EXIT_OK


# --------------------------------------------------------------------------- register

REGISTER_DEFAULTS = {"mode": "both", "order": "demons-first", "bins": 32, "resample": False,
                     "iterations": [40, 30, 20], "update_sigma": 1.0, "field_sigma": 1.5,
                     "max_step": 1.25}


def cmd_register(args) -> int:
    cfg = _merge(args, REGISTER_DEFAULTS)
    fixed, moving = _load(args.fixed, Volume3), _load(args.moving, Volume3)
    if cfg["mode"] not in ("rigid", "demons", "both"):
        raise ConfigError(f"unknown mode {cfg['mode']!r}")
    if fixed.dims != moving.dims and cfg["mode"] != "rigid":
        if not cfg["resample"]:
            raise ConfigError(f"demons needs equal dims ({fixed.dims} vs {moving.dims}); "
                              "pass --resample")
        moving = register.warp(moving, register.RigidTransform.identity(), reference=fixed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = register.DemonsParams(tuple(cfg["iterations"]), None, cfg["update_sigma"],
                                   cfg["field_sigma"], cfg["max_step"])
    rcfg = register.RigidConfig(bins=cfg["bins"])

    def report(label, img):
        same = img.dims == fixed.dims
        mi = register.mutual_information(fixed, img, cfg["bins"]) if same else float("nan")
        msd = register.mean_squared_difference(fixed, img) if same else float("nan")
        print(f"{label}: MI={mi:.6f} nats  MSD={msd:.6g}")

    if fixed.dims == moving.dims:
        report("before", moving)
    current = moving
    stages = ["demons", "rigid"] if cfg["order"] == "demons-first" else ["rigid", "demons"]
    for stage in stages:
        if stage == "rigid" and cfg["mode"] in ("rigid", "both"):
            res = register.rigid_register_report(fixed, current, rcfg)
            (out / "transform.json").write_text(res.transform.to_json() + "\n")
            current = register.warp(current, res.transform, reference=fixed)
            t = res.transform
            print(f"rigid: angles={tuple(round(a, 5) for a in t.angles)} rad "
                  f"translation={tuple(round(x, 4) for x in t.translation)} mm "
                  f"MI {res.initial_mi:.6f} -> {res.final_mi:.6f}")
        elif stage == "demons" and cfg["mode"] in ("demons", "both"):
            field = register.demons_register(fixed, current, params)
            field.save(out / "field.nrrd")
            current = register.warp(current, field)
            mag = field.magnitude_voxels()
            print(f"demons: mean |u|={mag.mean():.4f} voxels, max {mag.max():.4f}")
    nrrd.save_nrrd(current, out / "warped.nrrd")
    report("after", current)
    return EXIT_OK


# --------------------------------------------------------------------------- genmask

GENMASK_DEFAULTS = {"n": 1, "seed": None, "threads": None, "exclude_apex": False,
                    "spec": None}


def _spec_from(cfg, args) -> maskgen.ScarSpec:
    spec_d = {}
    if cfg["spec"]:
        src = cfg["spec"]
        try:
            spec_d = json.loads(Path(src).read_text()) if isinstance(src, str) else dict(src)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read scar spec {src}: {e}") from e
    names = {f.name for f in fields(maskgen.ScarSpec)}
    for name in names:
        v = getattr(args, f"spec_{name}", None)
        if v is not None:
            spec_d[name] = v
    if cfg["seed"] is None:
        raise ConfigError("--seed is required for mask generation")
    spec_d["seed"] = cfg["seed"]
    if cfg["exclude_apex"]:
        spec_d["rings"] = [r for r in spec_d.get("rings", aha.RINGS) if r != "apex"]
    unknown = set(spec_d) - names
    if unknown:
        raise ConfigError(f"unknown scar spec fields: {sorted(unknown)}")
    try:
        return maskgen.ScarSpec(**spec_d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid scar spec: {e}") from e


def cmd_genmask(args) -> int:
    cfg = _merge(args, GENMASK_DEFAULTS)
    spec = _spec_from(cfg, args)
    threads = _threads(cfg["threads"])
    n = int(cfg["n"])
    if n < 1:
        raise ConfigError("--n must be >= 1")
    labels = _load(args.atlas)
    try:
        atlas = aha.load_atlas(labels)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    myo = _load(args.myocardium, Mask3) if args.myocardium else labels.mask(*aha.SEGMENTS)
    if not myo.same_geometry(labels):
        raise ConfigError("myocardium and atlas geometries differ")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(i):
        name = f"scar_{i:04d}"
        try:
            g = maskgen.generate_scar_mask(atlas, myo, spec, instance=i)
        except maskgen.ScarGenerationError as e:
            return name, i, None, str(e)
        nrrd.atomic_save_nrrd(g.mask, out / f"{name}.nrrd")
        side = g.sidecar()
        side["instance"] = i
        side["spec"] = asdict(spec)
        (out / f"{name}.json").write_text(json.dumps(side, indent=2) + "\n")
        return name, i, g, None

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(one, range(n)))

    failed = [(name, err) for name, _, g, err in results if g is None]
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "seed", "instance", "segment", "requested_ml", "achieved_ml",
                    "placed_ml", "porosity", "kernel", "capped", "total_ml"])
        for name, i, g, _ in results:
            if g is None:
                continue
            total = metrics.volume_ml(g.mask)
            for r in g.regions:
                w.writerow([name, spec.seed, i, r.segment, repr(r.requested_ml),
                            repr(r.achieved_ml), repr(r.placed_ml), repr(r.porosity), r.kernel,
                            int(r.capped), repr(total)])
    for name, err in failed:
        print(f"{name}: {err}", file=sys.stderr)
    print(f"generated {n - len(failed)}/{n} masks in {out}")
    return EXIT_PARTIAL if failed else EXIT_OK


# --------------------------------------------------------------------------- synth

SYNTH_DEFAULTS = {"predictor": "stub", "steps": 50, "beta_start": 1e-4, "beta_end": 0.02,
                  "seed": None, "deterministic": False, "bins": 16, "command": None,
                  "target": None}


def cmd_synth(args) -> int:
    cfg = _merge(args, SYNTH_DEFAULTS)
    if cfg["seed"] is None:
        raise ConfigError("--seed is required for synthesis")
    image = _load(args.image, Volume3)
    mask = _load(args.mask, Mask3)
    if image.dims != mask.dims:
        raise ConfigError(f"image {image.dims} and mask {mask.dims} differ in shape")
    try:
        sched = diffusion.make_schedule(int(cfg["steps"]), cfg["beta_start"], cfg["beta_end"])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    hist = diffusion.lesion_histogram(image, mask, cfg["bins"]) if mask.count else None

    kind = cfg["predictor"]
    target = None
    deterministic = bool(cfg["deterministic"])
    if kind == "stub":
        predictor = diffusion.RandomPredictor(int(cfg["seed"]) + 1)
    elif kind == "zero":
        predictor = diffusion.zero_predictor
    elif kind == "oracle":
        if not cfg["target"]:
            raise ConfigError("the oracle predictor needs --target")
        target = _load(cfg["target"], Volume3)
        predictor = diffusion.OraclePredictor(target, sched)
        deterministic = True
    elif kind == "external":
        if not cfg["command"]:
            raise ConfigError("the external predictor needs --command")
        predictor = diffusion.FileExchangePredictor(cfg["command"], Path(args.out).parent /
                                                    "predictor_io", image.spacing)
    else:
        raise ConfigError(f"unknown predictor {kind!r}")

    rng = np.random.default_rng(int(cfg["seed"]))
    out = diffusion.synthesize(image, mask, predictor, sched, hist, rng, deterministic)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    nrrd.save_nrrd(out, args.out)

    audit = diffusion.background_preserved(out, image, mask)
    rep = {"background_bit_equal": audit, "mask_voxels": mask.count, "steps": sched.T}
    if target is not None and mask.count:
        rep["scar_mae_vs_target"] = float(np.abs(out.data - target.data)[mask.data].mean())
    print(json.dumps(rep, sort_keys=True))
    if not audit:
        print("background audit FAILED: voxels outside the mask changed", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


# --------------------------------------------------------------------------- eval

def _cases(d: Path) -> dict:
    return {p.name[:-5]: p for p in sorted(d.glob("*.nrrd"))}


def cmd_eval(args) -> int:
    threads = _threads(args.threads)
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise ConfigError(f"not a directory: {d}")
    atlas = aha.load_atlas(_load(args.atlas)) if args.atlas else None
    pred, gt = _cases(pred_dir), _cases(gt_dir)
    common = sorted(set(pred) & set(gt))
    unmatched = sorted(set(pred) ^ set(gt))
    if not common:
        raise ConfigError("no matching case ids between prediction and ground-truth dirs")

    def one(cid):
        p, g = _load(pred[cid], Mask3), _load(gt[cid], Mask3)
        row = metrics.evaluate_case(cid, p, g)
        tabs = None
        if atlas is not None:
            tabs = (aha.segment_volumes(p, atlas), aha.segment_volumes(g, atlas))
        return row, tabs

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(one, common))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r for r, _ in results]
    metrics.write_case_csv(rows, out / "cases.csv")
    summary = metrics.cohort_summary(rows)
    summary["unmatched"] = unmatched
    if atlas is not None:
        pt = metrics.bullseye_mean(t[0] for _, t in results)
        gtt = metrics.bullseye_mean(t[1] for _, t in results)
        diff = metrics.bullseye_diff(pt, gtt)
        for name, tab in (("pred", pt), ("gt", gtt), ("diff", diff)):
            tab.to_csv(out / f"bullseye_{name}.csv")
            aha.bullseye_svg(tab, out / f"bullseye_{name}.svg", title=f"{name} scar volume (mL)")
    metrics.write_cohort_json(summary, out / "cohort.json")
    print(f"evaluated {len(rows)} cases: mean dice {summary['dice']['mean']:.4f}")
    for cid in unmatched:
        print(f"unmatched case: {cid}", file=sys.stderr)
    return EXIT_PARTIAL if unmatched else EXIT_OK


# --------------------------------------------------------------------------- parser

def _triple(s: str):
    vals = [float(x) for x in s.split(",")]
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected one or three comma-separated numbers")
    return tuple(vals)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scarforge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="write a synthetic LV phantom (myocardium, atlas, image)")
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--spacing", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("convert", help="reorient / resample / crop / normalise a NRRD volume")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--orientation")
    s.add_argument("--spacing", type=_triple)
    s.add_argument("--interp", choices=("nearest", "trilinear"))
    s.add_argument("--crop-mask")
    s.add_argument("--margin", type=int, default=0)
    s.add_argument("--rescale", type=float, nargs=2, metavar=("LO", "HI"))
    s.add_argument("--zscore", action="store_true")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("register", help="rigid MI and/or demons registration")
    s.add_argument("fixed")
    s.add_argument("moving")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--mode", choices=("rigid", "demons", "both"))
    s.add_argument("--order", choices=("demons-first", "rigid-first"))
    s.add_argument("--bins", type=int)
    s.add_argument("--resample", action="store_true", default=None)
    s.add_argument("--iterations", type=int, nargs="+")
    s.add_argument("--max-step", dest="max_step", type=float)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("genmask", help="generate AHA-guided scar masks on a template")
    s.add_argument("--atlas", required=True)
    s.add_argument("--myocardium")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--spec", help="ScarSpec JSON file")
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--exclude-apex", dest="exclude_apex", action="store_true", default=None)
    s.add_argument("--n-regions", dest="spec_n_regions", type=int)
    s.add_argument("--volume-range", dest="spec_volume_range", type=float, nargs=2)
    s.add_argument("--porosity-range", dest="spec_porosity_range", type=float, nargs=2)
    s.add_argument("--anisotropy", dest="spec_anisotropy", type=_triple)
    s.set_defaults(func=cmd_genmask)

    s = sub.add_parser("synth", help="masked diffusion synthesis with a stub/oracle/external predictor")
    s.add_argument("--image", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--predictor", choices=("stub", "zero", "oracle", "external"))
    s.add_argument("--target")
    s.add_argument("--command", help="external predictor command with {x}, {t}, {out}")
    s.add_argument("--steps", type=int)
    s.add_argument("--beta-start", dest="beta_start", type=float)
    s.add_argument("--beta-end", dest="beta_end", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--deterministic", action="store_true", default=None)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval", help="per-case metrics, cohort summary and bull's-eye reports")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--atlas")
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (register.RegistrationError, diffusion.SynthesisError, GeometryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
