"""Command-line entry point: ``canehsi <command> ...`` (or ``python -m canehsi``).

Commands: gen, calibrate, segment {train,apply}, analyze {mean-curve,sam-map},
patch {extract,augment,split}, svm {train,predict,eval},
resnet {train,eval,gradcheck}, pipeline.
"""
from __future__ import annotations

import os

# Multithreaded BLAS may split reductions differently per thread count; pinning
# one thread keeps outputs byte-identical whatever parallelism the caller asks for.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ[_var] = "1"

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import resnet as rn  # noqa: E402
from .calibration import CalibrationParams, calibrate  # noqa: E402
from .hypercube import load_cube, load_mask_pgm, save_cube, save_curve_csv, save_mask_pgm  # noqa: E402
from .patches import (  # noqa: E402
    PatchSet,
    augment_set,
    extract_patches,
    load_patchset,
    save_patchset,
    split,
    split_by_scene,
)
from .pipeline import RunConfig, StageError, apply_override, emit_curves, run_pipeline  # noqa: E402
from .segmentation import PixelSvmModel, mask_clean, sample_pixels, segment, train_pixel_svm  # noqa: E402
from .spectral import laplacian_map, mean_spectral_curve  # noqa: E402
from .svm import evaluate_model, load_model, save_model, train_svc, train_svr  # noqa: E402
from .synthgen import SceneSpec, dataset_specs, environment_preset, generate_scene, write_scene  # noqa: E402


class CliError(Exception):
    pass


def _write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


# --- handlers ------------------------------------------------------------------


def cmd_gen(args) -> None:
    spec_d = _read_json(args.spec) if args.spec else {}
    base = SceneSpec(**environment_preset(args.environment))
    spec = SceneSpec.from_json({**base.to_json(), **spec_d})
    if args.rating is not None:
        spec.rating_class = args.rating
    if args.seed is not None:
        spec.seed = args.seed
    if args.per_class:
        specs = dataset_specs(spec, args.per_class, spec.seed)
    else:
        specs = [spec]
    for i, s in enumerate(specs):
        stem = args.stem if len(specs) == 1 else f"{args.stem}{i:03d}_c{s.rating_class}"
        write_scene(args.out, stem, *generate_scene(s))
    print(f"wrote {len(specs)} scene(s) to {args.out}")


def cmd_calibrate(args) -> None:
    params = CalibrationParams(kmeans_k=args.k, seed=args.seed)
    cube, report = calibrate(load_cube(args.raw), load_cube(args.dark), params)
    save_cube(cube, args.out)
    _write_json(report.to_json(), args.report)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)


def cmd_segment_train(args) -> None:
    cube = load_cube(args.cube)
    samples = sample_pixels(cube, load_mask_pgm(args.mask), args.per_class, args.seed)
    model = train_pixel_svm(samples, args.lam, args.epochs, args.seed)
    model.save(args.out)


def cmd_segment_apply(args) -> None:
    mask = segment(load_cube(args.cube), PixelSvmModel.load(args.model))
    if args.min_component > 1:
        mask = mask_clean(mask, args.min_component)
    save_mask_pgm(mask, args.out)
    print(f"foreground pixels: {mask.count}")


def cmd_analyze_mean_curve(args) -> None:
    save_curve_csv(mean_spectral_curve(load_cube(args.cube), load_mask_pgm(args.mask)), args.out)


def cmd_analyze_sam_map(args) -> None:
    smap = laplacian_map(load_cube(args.cube), load_mask_pgm(args.mask), args.statistic)
    sidecar = Path(args.out).with_suffix(".json")
    smap.save_pgm(args.out, sidecar)
    if args.csv:
        smap.save_csv(args.csv)


def cmd_patch_extract(args) -> None:
    ps = extract_patches(load_cube(args.cube), load_mask_pgm(args.mask), args.label, args.n, args.stride, args.scene_id)
    save_patchset(ps, args.out)
    print(f"{len(ps)} patches")


def cmd_patch_augment(args) -> None:
    ps = load_patchset(args.patches)
    scenes = {int(sid): (load_cube(cube), load_mask_pgm(mask)) for sid, cube, mask in args.scene}
    missing = {p.origin[0] for p in ps} - set(scenes)
    if missing:
        raise CliError(f"no --scene given for scene ids {sorted(missing)}")
    aug = augment_set(ps, scenes, args.multiplicity, args.seed)
    save_patchset(ps.extend(aug) if args.include_original else aug, args.out)
    print(f"{len(aug)} augmented patches")


def cmd_patch_split(args) -> None:
    ps = PatchSet([], 0, 0)
    for path in args.patches:
        part = load_patchset(path)
        ps = part if len(ps) == 0 and ps.n == 0 else ps.extend(part)
    if args.split_by_scene:
        sr = split_by_scene(ps, seed=args.seed)
    else:
        sr = split(ps, seed=args.seed, stratified=not args.unstratified)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "validation", "test"):
        save_patchset(getattr(sr, name), out / f"{name}.hps")
    print(f"train {len(sr.train)}  validation {len(sr.validation)}  test {len(sr.test)}")


def cmd_svm_train(args) -> None:
    train = load_patchset(args.train)
    if args.kind == "svc":
        model = train_svc(train, args.lam, args.epochs, args.seed)
    else:
        model = train_svr(train, args.lam, args.epsilon, args.epochs, args.seed)
    save_model(model, args.out)


def cmd_svm_predict(args) -> None:
    model = load_model(args.model)
    ps = load_patchset(args.patches)
    preds = model.predict(ps.features())
    with open(args.out, "w") as fh:
        fh.write("scene_id,row,col,true,predicted\n")
        for p, y in zip(ps, preds):
            fh.write(f"{p.origin[0]},{p.origin[1]},{p.origin[2]},{p.label},{int(y)}\n")


def cmd_svm_eval(args) -> None:
    report = evaluate_model(load_model(args.model), load_patchset(args.patches))
    _write_json(report.to_json(), args.out)
    if args.confusion:
        report.save_confusion_csv(args.confusion)
    print(f"accuracy {report.accuracy:.4f} (n={report.n})")


def cmd_resnet_train(args) -> None:
    from .patches import SplitResult

    train = load_patchset(args.train)
    val = load_patchset(args.val) if args.val else PatchSet([], train.n, train.bands)
    test = load_patchset(args.test) if args.test else PatchSet([], train.n, train.bands)
    cfg = rn.NetConfig(
        input_n=train.n,
        input_bands=train.bands,
        stem_channels=args.channels,
        num_blocks=args.blocks,
        seed=args.seed,
    )
    net, report = rn.train(
        rn.init_net(cfg),
        SplitResult(train, val, test),
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        batch_size=args.batch_size,
        log=lambda r: print(r, file=sys.stderr),
    )
    rn.save_net(net, args.out)
    if args.curves:
        emit_curves(report, args.curves)
    if report.final_test_accuracy is not None:
        print(f"test accuracy {report.final_test_accuracy:.4f}")


def cmd_resnet_eval(args) -> None:
    report = rn.evaluate_net(rn.load_net(args.net), load_patchset(args.patches))
    _write_json(report.to_json(), args.out)
    print(f"accuracy {report.accuracy:.4f} (n={report.n})")


def cmd_resnet_gradcheck(args) -> None:
    cfg = rn.NetConfig(input_n=args.n, stem_channels=args.channels, num_blocks=args.blocks, rectifier=not args.linear, seed=args.seed)
    net = rn.init_net(cfg)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(args.seed)))
    batch = rng.random((args.batch, args.n, args.n, cfg.input_bands))
    labels = rng.choice(rn.CLASSES, args.batch)
    err = rn.gradient_check(net, batch, labels, step=args.step)
    print(f"params {net.params.size}  max relative error {err:.3e}  tolerance {args.tol:.1e}")
    if not err < args.tol:
        raise CliError("gradient check failed")


def cmd_pipeline(args) -> None:
    d = _read_json(args.config) if args.config else {}
    for assignment in args.set or []:
        apply_override(d, assignment)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out"] = args.out
    try:
        config = RunConfig.from_json(d)
    except (TypeError, ValueError) as exc:
        raise StageError("config", exc) from exc
    summary = run_pipeline(config)
    for r in summary.rows:
        print(
            f"n={r.patch_size} stride={r.stride} train={r.n_train} val={r.n_val} test={r.n_test} "
            f"train_error={r.train_error:.4f} val_acc={r.val_accuracy:.4f} test_acc={r.test_accuracy:.4f}"
        )
    for r in summary.svm_rows:
        print(f"n={r['patch_size']} stride={r['stride']} {r['model']} test_acc={r['test_accuracy']:.4f}")


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="canehsi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="render synthetic scene(s)")
    g.add_argument("--spec", help="SceneSpec JSON (fields as in SceneSpec)")
    g.add_argument("--environment", choices=("indoor", "outdoor"), default="indoor")
    g.add_argument("--rating", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--per-class", type=int, default=0, help="render a dataset of 7 x N scenes instead of one")
    g.add_argument("--stem", default="scene")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("calibrate", help="dark + white calibration of a raw cube")
    c.add_argument("--raw", required=True)
    c.add_argument("--dark", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--report", required=True)
    c.add_argument("--k", type=int, default=4)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("segment", help="pixel SVM foreground segmentation").add_subparsers(dest="action", required=True)
    st = s.add_parser("train")
    st.add_argument("--cube", required=True)
    st.add_argument("--mask", required=True, help="annotation mask (PGM)")
    st.add_argument("--out", required=True)
    st.add_argument("--per-class", type=int, default=2500)
    st.add_argument("--lam", type=float, default=1e-3)
    st.add_argument("--epochs", type=int, default=5)
    st.add_argument("--seed", type=int, default=0)
    st.set_defaults(func=cmd_segment_train)
    sa = s.add_parser("apply")
    sa.add_argument("--cube", required=True)
    sa.add_argument("--model", required=True)
    sa.add_argument("--out", required=True)
    sa.add_argument("--min-component", type=int, default=1)
    sa.set_defaults(func=cmd_segment_apply)

    a = sub.add_parser("analyze", help="spectral analysis").add_subparsers(dest="action", required=True)
    am = a.add_parser("mean-curve")
    am.add_argument("--cube", required=True)
    am.add_argument("--mask", required=True)
    am.add_argument("--out", required=True)
    am.set_defaults(func=cmd_analyze_mean_curve)
    asm = a.add_parser("sam-map")
    asm.add_argument("--cube", required=True)
    asm.add_argument("--mask", required=True)
    asm.add_argument("--out", required=True, help="16-bit PGM; a JSON sidecar with the scale is written next to it")
    asm.add_argument("--csv")
    asm.add_argument("--statistic", choices=("mean_angle", "degree"), default="mean_angle")
    asm.set_defaults(func=cmd_analyze_sam_map)

    pa = sub.add_parser("patch", help="patch extraction, augmentation and splits").add_subparsers(dest="action", required=True)
    pe = pa.add_parser("extract")
    pe.add_argument("--cube", required=True)
    pe.add_argument("--mask", required=True)
    pe.add_argument("--label", type=int, required=True)
    pe.add_argument("--n", type=int, default=19)
    pe.add_argument("--stride", type=int, default=9)
    pe.add_argument("--scene-id", type=int, default=0)
    pe.add_argument("--out", required=True)
    pe.set_defaults(func=cmd_patch_extract)
    pg = pa.add_parser("augment")
    pg.add_argument("--patches", required=True)
    pg.add_argument("--scene", nargs=3, action="append", required=True, metavar=("ID", "CUBE", "MASK"))
    pg.add_argument("--multiplicity", type=int, default=3)
    pg.add_argument("--seed", type=int, default=0)
    pg.add_argument("--include-original", action="store_true")
    pg.add_argument("--out", required=True)
    pg.set_defaults(func=cmd_patch_augment)
    ps = pa.add_parser("split")
    ps.add_argument("--patches", nargs="+", required=True)
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--split-by-scene", action="store_true")
    ps.add_argument("--unstratified", action="store_true")
    ps.add_argument("--out-dir", required=True)
    ps.set_defaults(func=cmd_patch_split)

    sv = sub.add_parser("svm", help="flat-feature SVC / SVR").add_subparsers(dest="action", required=True)
    svt = sv.add_parser("train")
    svt.add_argument("--train", required=True)
    svt.add_argument("--out", required=True)
    svt.add_argument("--kind", choices=("svc", "svr"), default="svc")
    svt.add_argument("--lam", type=float, default=0.1)
    svt.add_argument("--epochs", type=int, default=300)
    svt.add_argument("--epsilon", type=float, default=0.5)
    svt.add_argument("--seed", type=int, default=0)
    svt.set_defaults(func=cmd_svm_train)
    svp = sv.add_parser("predict")
    svp.add_argument("--model", required=True)
    svp.add_argument("--patches", required=True)
    svp.add_argument("--out", required=True)
    svp.set_defaults(func=cmd_svm_predict)
    sve = sv.add_parser("eval")
    sve.add_argument("--model", required=True)
    sve.add_argument("--patches", required=True)
    sve.add_argument("--out", required=True)
    sve.add_argument("--confusion")
    sve.set_defaults(func=cmd_svm_eval)

    r = sub.add_parser("resnet", help="residual CNN").add_subparsers(dest="action", required=True)
    rt = r.add_parser("train")
    rt.add_argument("--train", required=True)
    rt.add_argument("--val")
    rt.add_argument("--test")
    rt.add_argument("--out", required=True)
    rt.add_argument("--curves", help="directory for curves.csv / curves.svg")
    rt.add_argument("--epochs", type=int, default=20)
    rt.add_argument("--lr", type=float, default=0.01)
    rt.add_argument("--batch-size", type=int, default=32)
    rt.add_argument("--channels", type=int, default=16)
    rt.add_argument("--blocks", type=int, default=3)
    rt.add_argument("--seed", type=int, default=0)
    rt.set_defaults(func=cmd_resnet_train)
    re_ = r.add_parser("eval")
    re_.add_argument("--net", required=True)
    re_.add_argument("--patches", required=True)
    re_.add_argument("--out", required=True)
    re_.set_defaults(func=cmd_resnet_eval)
    rg = r.add_parser("gradcheck")
    rg.add_argument("--n", type=int, default=9)
    rg.add_argument("--channels", type=int, default=4)
    rg.add_argument("--blocks", type=int, default=1)
    rg.add_argument("--batch", type=int, default=4)
    rg.add_argument("--step", type=float, default=1e-3)
    rg.add_argument("--tol", type=float, default=1e-3)
    rg.add_argument("--linear", action="store_true", help="remove the rectifiers")
    rg.add_argument("--seed", type=int, default=0)
    rg.set_defaults(func=cmd_resnet_gradcheck)

    pl = sub.add_parser("pipeline", help="full run from a JSON RunConfig")
    pl.add_argument("--config", help="RunConfig JSON; omitted fields take their defaults")
    pl.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. resnet.epochs=5 (repeatable)")
    pl.add_argument("--seed", type=int)
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except StageError as exc:
        print(f"canehsi: {exc}", file=sys.stderr)
        return 2
    except (CliError, OSError, ValueError, KeyError) as exc:
        name = args.command + (f" {args.action}" if getattr(args, "action", None) else "")
        print(f"canehsi {name}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
