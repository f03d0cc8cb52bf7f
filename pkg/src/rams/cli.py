"""``rams`` command line: validate, preprocess, train, evaluate, infer, report."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import scene_io
from .config import RunConfig, load_config

log = logging.getLogger("rams")

EXIT_OK, EXIT_MALFORMED, EXIT_NO_MANIFEST = 0, 2, 3


def _root(args, cfg: RunConfig | None = None) -> Path:
    root = getattr(args, "root", None) or (cfg.dataset_root if cfg else "") or RunConfig().dataset_root
    if not root:
        raise SystemExit("no dataset root given (argument or RAMS_DATA_ROOT)")
    return Path(root)


def cmd_validate(args) -> int:
    root = _root(args)
    bands = [scene_io.Band(args.band)] if args.band else list(scene_io.Band)
    found_any, malformed, missing_manifest = False, [], []
    for band in bands:
        for split in scene_io.Split:
            split_dir = root / band.value / split.value
            has_dirs = split_dir.is_dir() and any(p.is_dir() for p in split_dir.iterdir())
            if not has_dirs:
                continue
            found_any = True
            try:
                refs = scene_io.scan_dataset(root, band, split)
            except scene_io.ManifestError as exc:
                print(f"{band.value}/{split.value}: {exc}")
                missing_manifest.append(f"{band.value}/{split.value}")
                continue
            ok = no_hr = 0
            for ref in refs:
                try:
                    scene = ref.load()
                except scene_io.DatasetError as exc:
                    malformed.append(ref.scene_id)
                    print(f"  MALFORMED {band.value}/{split.value}/{ref.scene_id}: {exc}")
                    continue
                ok += 1
                no_hr += not scene.has_hr
            extra = f" ({no_hr} without HR)" if no_hr else ""
            bad = len(refs) - ok
            status = f"{ok} scenes OK" + (f", {bad} malformed" if bad else "")
            print(f"{band.value}/{split.value}: {status}{extra}")
    if not found_any or missing_manifest:
        if not found_any:
            print(f"no scenes found under {root}")
        return EXIT_NO_MANIFEST
    return EXIT_MALFORMED if malformed else EXIT_OK


def _overrides(args, keys):
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


PRE_KEYS = ("band", "seed", "T", "c_min", "n_p", "max_radius", "patches_per_image", "lr_patch_size", "workers")


def cmd_preprocess(args) -> int:
    from .preprocess import compute_band_stats, preprocess_split, write_stats

    cfg = load_config(args.config, **_overrides(args, PRE_KEYS), out=args.out)
    root = _root(args, cfg)
    cfg = cfg.update(root=str(root), cache=args.out)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    band = scene_io.Band(cfg.band)
    train_refs = scene_io.scan_dataset(root, band, "train")
    val_refs = scene_io.scan_dataset(root, band, "val")
    if not train_refs:
        log.error("no training scenes for %s under %s", band.value, root)
        return EXIT_NO_MANIFEST
    stats = compute_band_stats((r.load() for r in train_refs), band)
    write_stats(out / "stats.txt", stats)
    pcfg = cfg.preprocess()
    for name, refs, training in (("train", train_refs, True), ("val", val_refs, False)):
        summary = preprocess_split(refs, out / name, stats, pcfg, training, cfg.workers)
        log.info("%s: %d scenes kept, %d dropped, %d datapoints, %d patches",
                 name, summary.scenes, len(summary.dropped), summary.datapoints, summary.patches)
        if refs and summary.scenes == 0:
            log.warning("%s: zero scenes accepted with c_min=%.3f", name, cfg.c_min)
    cfg.write(out)
    return EXIT_OK


TRAIN_KEYS = ("band", "seed", "epochs", "batch_size", "lr_initial", "lr_final", "F", "N", "lr_patch_size")


def cmd_train(args) -> int:
    from .preprocess import load_cache, read_stats
    from .train import fit

    cfg = load_config(args.config, **_overrides(args, TRAIN_KEYS), cache=args.cache, out=args.out)
    if args.ablate_rta:
        cfg = cfg.update(ablate_rta=True)
    if not cfg.cache or not cfg.out:
        raise SystemExit("train needs a cache and an output directory (config or --cache/--out)")
    cache = Path(cfg.cache)
    stats = read_stats(cache / "stats.txt")
    train = load_cache(cache / "train")
    val = load_cache(cache / "val") if (cache / "val").is_dir() else []
    cfg.write(cfg.out)
    result = fit(train, val, stats, cfg.out, cfg.train(), cfg.model(), cfg.loss(),
                 ablate_rta=cfg.ablate_rta, resume=args.resume, max_steps=args.max_steps)
    log.info("best checkpoint: %s%s", result.best, " (training diverged)" if result.diverged else "")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .checkpoint import load_checkpoint
    from .inference import ensemble_curve, evaluate, win_rate
    from .report import report

    ck = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config, band=ck.band.value, **_overrides(args, ("seed",)))
    root = _root(args, cfg)
    model = ck.build_model()
    refs = scene_io.scan_dataset(root, ck.band, args.split)
    if args.limit:
        refs = refs[:args.limit]
    scenes = [r.load() for r in refs]
    methods = args.methods.split(",")
    records = evaluate(scenes, methods, model, ck.stats, cfg.preprocess(), P=args.ensemble or cfg.ensemble, d=cfg.d)
    curve = None
    if args.curve:
        sizes = [int(p) for p in args.curve.split(",")]
        curve = ensemble_curve(scenes, model, ck.stats, sizes, cfg.preprocess(), cfg.d)
    files = report(records, args.out, curve=curve)
    cfg.update(root=str(root), out=args.out).write(args.out)
    if "bicubic" in methods:
        for m in methods:
            if m != "bicubic":
                log.info("%s beats bicubic on %.1f%% of scenes", m, 100 * win_rate(records, m, "bicubic"))
    print(Path(files["summary"]).read_text(), end="")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .checkpoint import load_checkpoint
    from .inference import infer_ensemble, infer_scene

    ck = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config, band=ck.band.value, **_overrides(args, ("seed",)))
    scene = scene_io.load_scene(args.scene, ck.band)
    model = ck.build_model()
    if args.ensemble:
        sr = infer_ensemble(scene, model, ck.stats, args.ensemble, cfg.seed, cfg.preprocess())
    else:
        sr = infer_scene(scene, model, ck.stats, cfg.preprocess())
    scene_io.save_image_16bit(sr, args.out)
    log.info("wrote %s", args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    from .metrics import read_records
    from .report import report

    records = read_records(args.records)
    report(records, args.out)
    return EXIT_OK


def cmd_describe(args) -> int:
    from .model import RAMS, count_parameters, describe

    if args.checkpoint:
        from .checkpoint import load_checkpoint

        ck = load_checkpoint(args.checkpoint)
        model, mcfg = ck.build_model(), ck.model_config
    else:
        cfg = load_config(args.config)
        mcfg = cfg.model()
        model = RAMS(mcfg, use_rta=not cfg.ablate_rta)
    rows = describe(model)
    width = max(len(k) for k, _, _ in rows)
    for key, shape, n in rows:
        print(f"{key:<{width}}  {str(shape):<22} {n:>9}")
    print(f"{'total':<{width}}  {'':<22} {count_parameters(mcfg, model.use_rta):>9}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import write_dataset

    write_dataset(args.root, args.band, args.n_train, args.n_val, args.seed)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rams", description="Multi-image super-resolution toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check dataset integrity")
    v.add_argument("root", nargs="?")
    v.add_argument("--band", choices=[b.value for b in scene_io.Band])
    v.set_defaults(func=cmd_validate)

    pp = sub.add_parser("preprocess", help="register, select, permute and cache a band")
    pp.add_argument("root", nargs="?")
    pp.add_argument("--band", choices=[b.value for b in scene_io.Band])
    pp.add_argument("--out", required=True)
    pp.add_argument("--config")
    pp.add_argument("--seed", type=int)
    pp.add_argument("--T", type=int)
    pp.add_argument("--c-min", dest="c_min", type=float)
    pp.add_argument("--n-p", dest="n_p", type=int)
    pp.add_argument("--max-radius", dest="max_radius", type=int)
    pp.add_argument("--patches", dest="patches_per_image", type=int)
    pp.add_argument("--patch-size", dest="lr_patch_size", type=int)
    pp.add_argument("--workers", type=int)
    pp.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", help="fit a model on a preprocessed cache")
    t.add_argument("--config")
    t.add_argument("--cache")
    t.add_argument("--out")
    t.add_argument("--band", choices=[b.value for b in scene_io.Band])
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr-initial", dest="lr_initial", type=float)
    t.add_argument("--lr-final", dest="lr_final", type=float)
    t.add_argument("--F", type=int)
    t.add_argument("--N", type=int)
    t.add_argument("--patch-size", dest="lr_patch_size", type=int)
    t.add_argument("--ablate-rta", action="store_true", help="drop the temporal-attention branch")
    t.add_argument("--resume")
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score methods on a split and write tables/plots")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="val", choices=[s.value for s in scene_io.Split])
    e.add_argument("--root")
    e.add_argument("--config")
    e.add_argument("--methods", default="bicubic,rams,rams+")
    e.add_argument("--ensemble", type=int)
    e.add_argument("--curve", help="comma-separated ensemble sizes for the cPSNR-vs-P curve")
    e.add_argument("--limit", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("infer", help="super-resolve one scene to a 16-bit PNG")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scene", required=True)
    i.add_argument("--ensemble", type=int)
    i.add_argument("--config")
    i.add_argument("--seed", type=int)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("report", help="re-render tables and plots from per_scene.tsv")
    r.add_argument("--records", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    d = sub.add_parser("describe", help="print the layer table")
    d.add_argument("--checkpoint")
    d.add_argument("--config")
    d.set_defaults(func=cmd_describe)

    s = sub.add_parser("synth", help="write a synthetic Proba-V-style dataset")
    s.add_argument("root")
    s.add_argument("--band", default="RED", choices=[b.value for b in scene_io.Band])
    s.add_argument("--n-train", dest="n_train", type=int, default=4)
    s.add_argument("--n-val", dest="n_val", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
