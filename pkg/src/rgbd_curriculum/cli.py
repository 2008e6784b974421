"""Command-line entry point: ``rgbd-curriculum <command> [flags]``.

Exit codes: 0 success, 1 verification failure or numeric/training error,
2 usage/config/contract error, 3 I/O or format error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import CurriculumConfig, apply_overrides, dumps, flatten, load_config
from .curriculum.checkpoint import load_checkpoint, save_checkpoint
from .curriculum.training import (
    init_stage2_from_stage1,
    read_trace,
    train_stage1,
    train_stage2,
    write_trace,
)
from .data.dataset import RgbdDataset, load_dataset, synthetic_dataset, write_dataset
from .data.scenes import SceneConfig
from .errors import (
    CompatibilityError,
    ConfigError,
    ContractError,
    FormatError,
    NumericError,
    TrainingError,
)
from .eval import ablations as A
from .eval.metrics import delta1, miou
from .eval.probe import DEFAULT_FRACTIONS, ProbeConfig, finetune_probe
from .svg import line_plot
from .verify import run_gradcheck, tiny_curriculum_config, worst

log = logging.getLogger("rgbd_curriculum.cli")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
SEED_ENV = "RGBD_CURRICULUM_SEED"


class UsageError(Exception):
    """Bad flag combination detected after argparse."""


# -- shared helpers ---------------------------------------------------------------------

def _kv_list(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _default_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from exc


def resolve_config(args) -> CurriculumConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else CurriculumConfig()
    cfg = apply_overrides(cfg, _kv_list(getattr(args, "set", None)))
    seed = args.seed if getattr(args, "seed", None) is not None else _default_seed()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if getattr(args, "data", None):
        cfg = replace(cfg, manifest=str(args.data))
    cfg.validate()
    return cfg


def _seeds(text: str | None, fallback: int) -> list[int]:
    if text is None:
        return [fallback]
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds expects a comma-separated integer list, got {text!r}") from exc
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


def load_data(cfg: CurriculumConfig, synthetic: int = 625) -> RgbdDataset:
    scene = SceneConfig(height=cfg.vit.img_height, width=cfg.vit.img_width, patch=cfg.vit.patch)
    if cfg.manifest:
        ds = load_dataset(cfg.manifest)
    else:
        log.info("no manifest given; generating %d synthetic scenes in memory (seed 0)", synthetic)
        ds = synthetic_dataset(synthetic, 0, scene)
    sc = ds.scene
    if (sc.height, sc.width, sc.patch) != (cfg.vit.img_height, cfg.vit.img_width, cfg.vit.patch):
        raise ConfigError(
            f"dataset is {sc.height}x{sc.width}/p{sc.patch} but the model expects "
            f"{cfg.vit.img_height}x{cfg.vit.img_width}/p{cfg.vit.patch}"
        )
    return ds


def sidecar(path: Path) -> Path:
    return path.with_name(path.stem + ".config.txt")


def write_resolved(path: Path, cfg, probe: ProbeConfig | None = None, extra: dict | None = None) -> None:
    # non-model settings are comments, so the file loads back with --config
    text = dumps(cfg)
    if probe is not None:
        flat = flatten(probe)
        text += "".join(f"# probe.{k} = {flat[k]}\n" for k in sorted(flat))
    for k in sorted(extra or {}):
        text += f"# {k} = {extra[k]}\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("resolved config -> %s", path)


def _prepare_dir(out: Path, force: bool) -> None:
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def probe_from_args(args) -> ProbeConfig:
    probe = ProbeConfig(task=args.task, fraction=args.fraction)
    changes = {}
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if getattr(args, "finetune_epochs", None) is not None:
        changes["finetune_epochs"] = args.finetune_epochs
    if args.lr is not None:
        changes["base_lr"] = args.lr
    probe = apply_overrides(replace(probe, **changes), _kv_list(getattr(args, "probe_set", None)))
    probe.validate()
    return probe


# -- commands ----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        h, w = (int(v) for v in args.size.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"--size expects HxW, got {args.size!r}") from exc
    scene = SceneConfig(height=h, width=w, patch=args.patch, num_classes=args.classes, palette=args.palette)
    scene.validate()
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    out = Path(args.out)
    _prepare_dir(out, args.force)
    for stale in list(out.glob("sample_*.rgbd")):
        stale.unlink()
    manifest = write_dataset(out, args.count, args.seed if args.seed is not None else (_default_seed() or 0), scene)
    flat = flatten(scene)
    (out / "config.txt").write_text(
        "".join(f"scene.{k} = {flat[k]}\n" for k in sorted(flat)) + f"count = {args.count}\nseed = {manifest.seed}\n"
    )
    counts = {s: len(manifest.split_indices(s)) for s in ("train", "val", "test")}
    print(f"wrote {manifest.count} samples to {out} (train={counts['train']} val={counts['val']} test={counts['test']})")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    ds = load_data(cfg, args.synthetic)
    out = Path(args.out)
    if args.stage == 1:
        if args.init:
            raise UsageError("--init only applies to --stage 2")
        result = train_stage1(cfg, ds)
    else:
        params = None
        if args.init:
            params = init_stage2_from_stage1(load_checkpoint(args.init, stage="stage1"), cfg)
        else:
            log.info("stage 2 without --init: training from random initialization")
        result = train_stage2(cfg, ds, params)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, out)
    trace = Path(args.trace) if args.trace else out.with_suffix(".trace.csv")
    write_trace(result.trace, trace)
    write_resolved(sidecar(out), cfg, extra={"init": args.init or "", "stage": args.stage})
    last = result.trace[-1] if result.trace else {}
    print(f"stage {args.stage}: {len(result.trace)} steps, checkpoint {out}, trace {trace}, final {last}")
    return EXIT_OK


def _probe_rows(args, run_finetune: bool) -> int:
    cfg = resolve_config(args)
    probe = probe_from_args(args)
    if not run_finetune:
        probe = replace(probe, finetune_epochs=0)
    ds = load_data(cfg, args.synthetic)
    ckpt = load_checkpoint(args.ckpt)
    seeds = _seeds(args.seeds, cfg.seed)
    lines = ["fingerprint,seed,task,fraction,labeled_count,metric,value"]
    count = None
    for seed in seeds:
        res = finetune_probe(ckpt, probe, ds, cfg, seed)
        count = res.labeled_count
        lines.append(
            f"{res.report.fingerprint},{seed},{probe.task},{probe.fraction!r},{res.labeled_count},"
            f"{res.report.name},{res.report.value:.9g}"
        )
        print(f"seed {seed}: {res.report.name} = {res.report.value:.4f} ({res.labeled_count} labeled samples)")
        if args.save_ckpt and seed == seeds[0]:
            save_checkpoint(res.checkpoint, args.save_ckpt)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    write_resolved(sidecar(out), cfg, probe, {"ckpt": args.ckpt, "seeds": ",".join(map(str, seeds)), "probe.labeled_count": count})
    return EXIT_OK


def cmd_finetune(args) -> int:
    return _probe_rows(args, run_finetune=True)


def cmd_eval(args) -> int:
    if args.pred:
        return _score_predictions(args)
    if not args.ckpt:
        raise UsageError("eval needs --ckpt (probe a checkpoint) or --pred (score stored predictions)")
    return _probe_rows(args, run_finetune=False)


def _score_predictions(args) -> int:
    """Score a dataset of predicted samples against ground truth, matched by position."""
    if not args.data:
        raise UsageError("--pred needs --data with the ground-truth manifest")
    pred = load_dataset(args.pred)
    gt = load_dataset(args.data)
    if len(pred) != len(gt):
        raise ContractError(f"{len(pred)} predictions for {len(gt)} ground-truth samples")
    idx = gt.indices(args.split) if args.split != "all" else np.arange(len(gt))
    if args.task == "seg":
        if pred.labels is None or gt.labels is None:
            raise ContractError("segmentation scoring needs labels in both datasets")
        report = miou(pred.labels[idx], gt.labels[idx], gt.scene.num_classes)
    else:
        report = delta1(pred.depth[idx], gt.depth[idx])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(f"split,task,count,metric,value\n{args.split},{args.task},{len(idx)},{report.name},{report.value:.9g}\n")
    print(f"{report.name} = {report.value:.4f} over {len(idx)} samples")
    return EXIT_OK


def _ablation_svg(which: str, report: A.AblationReport) -> str:
    series: dict[str, list[tuple[float, float]]] = {}
    if which == "lowdata":
        for cell in report.cells():
            pts: dict[float, list[float]] = {}
            for r in report.rows:
                if r.cell == cell:
                    pts.setdefault(float(r.ids["fraction"]), []).append(r.value)
            series[cell] = [(f, float(np.mean(v))) for f, v in sorted(pts.items())]
        return line_plot(series, "labeled fraction vs probe metric", "labeled fraction", report.rows[0].metric)
    if which == "masking":
        for r in report.rows:
            series.setdefault(f"rgb {r.ids['rgb_ratio']:.2f}", []).append((float(r.ids["depth_ratio"]), r.value))
        for name in series:
            series[name] = _mean_by_x(series[name])
        return line_plot(series, "masking ratio sweep", "depth masking ratio", report.rows[0].metric)
    for cell in report.cells():
        series[cell] = [(float(r.seed), r.value) for r in report.rows if r.cell == cell]
    return line_plot(series, f"{which} ablation", "seed", report.rows[0].metric)


def _mean_by_x(points):
    acc: dict[float, list[float]] = {}
    for x, y in points:
        acc.setdefault(x, []).append(y)
    return [(x, float(np.mean(v))) for x, v in sorted(acc.items())]


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    probe = probe_from_args(args)
    seeds = _seeds(args.seeds, cfg.seed)
    out = Path(args.out)
    grid = A.REFERENCE_MASK_GRID
    if args.which == "masking":
        if args.grid:
            grid = tuple(tuple(float(v) for v in cell.split("/")) for cell in args.grid.split(","))
        A.check_mask_grid(grid, cfg.vit.num_patches)
    _prepare_dir(out, args.force)
    ds = load_data(cfg, args.synthetic)
    cache = A.PipelineCache()
    kwargs = dict(seeds=seeds, probe=probe, cache=cache)
    if args.which == "ordering":
        report = A.run_ordering_ablation(cfg, ds, **kwargs)
    elif args.which == "denoise":
        report = A.run_denoising_ablation(cfg, ds, **kwargs)
    elif args.which == "loss":
        report = A.run_loss_ablation(cfg, ds, **kwargs)
    elif args.which == "masking":
        report = A.run_masking_sweep(cfg, ds, grid=grid, **kwargs)
    else:
        fractions = tuple(float(f) for f in args.fractions.split(",")) if args.fractions else DEFAULT_FRACTIONS
        report = A.run_low_data(cfg, ds, fractions=fractions, **kwargs)
    (out / f"{args.which}.csv").write_text(report.to_csv())
    (out / f"{args.which}.svg").write_text(_ablation_svg(args.which, report))
    write_resolved(out / "config.txt", cfg, probe, {"which": args.which, "seeds": ",".join(map(str, seeds))})
    for cell, mean in report.means().items():
        print(f"{cell}: mean {mean:.4f} over {len(report.values(cell))} seeds")
    best, mean, spread = report.best()
    print(f"best: {best} ({mean:.4f} +/- {spread:.4f})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = tiny_curriculum_config()
    if args.config:
        cfg = load_config(args.config, cfg)
    cfg = apply_overrides(cfg, _kv_list(args.set))
    cfg.validate()
    rows = run_gradcheck(cfg, eps=args.eps, seed=args.seed or 0, corrupt=args.corrupt)
    for r in rows:
        print(f"{r.group} {r.max_rel_error:.3e} {'ok' if r.ok else 'FAIL'}")
    bad = worst(rows)
    if not all(r.ok for r in rows):
        print(f"gradcheck FAILED: worst parameter {bad.group} (max relative error {bad.max_rel_error:.3e})")
        return EXIT_FAIL
    print(f"gradcheck passed: {len(rows)} parameter groups, worst {bad.group} at {bad.max_rel_error:.3e}")
    return EXIT_OK


def cmd_plot(args) -> int:
    traces = [read_trace(p) for p in args.traces]
    labels = args.labels.split(",") if args.labels else [Path(p).stem for p in args.traces]
    if len(labels) != len(traces):
        raise UsageError("--labels needs one name per trace")
    series, markers = {}, []
    for name, trace in zip(labels, traces):
        y = A.loss_curve(trace, args.column)
        if args.normalize:
            x, y = A.normalized_curve(y)
        else:
            x = np.linspace(0.0, 1.0, y.size) if y.size > 1 else np.zeros(1)
        series[name] = list(zip(x.tolist(), y.tolist()))
        try:
            frac = A.fraction_to_threshold(A.loss_curve(trace, args.column))
            markers.append((frac, f"{name} {frac:.2f}"))
        except ContractError as exc:
            log.warning("%s: no convergence marker (%s)", name, exc)
    title = "normalized loss vs epoch fraction" if args.normalize else "loss vs epoch fraction"
    if len(traces) == 2 and len(markers) == 2:
        rep = A.convergence_report(traces[0], traces[1])
        title += f" (gap {rep.difference:.2f})"
    svg = line_plot(series, title, "epoch fraction", "normalized loss" if args.normalize else "loss", markers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    print(f"wrote {out} with {len(series)} series")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------------

def _common(p, data=True):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help=f"run seed (default: ${SEED_ENV} or the config)")
    if data:
        p.add_argument("--data", help="dataset manifest or directory (default: config manifest)")
        p.add_argument("--synthetic", type=int, default=625, help="in-memory synthetic scenes when no manifest")


def _probe_flags(p, task_default="seg"):
    p.add_argument("--task", choices=("seg", "depth"), default=task_default)
    p.add_argument("--fraction", type=float, default=1.0, help="labeled fraction of the train split")
    p.add_argument("--epochs", type=int, help="probe head epochs")
    p.add_argument("--lr", type=float, help="probe head base learning rate")
    p.add_argument("--probe-set", action="append", metavar="KEY=VALUE", help="override a probe setting")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rgbd-curriculum", description="Two-stage RGB-D curriculum pre-training, probes and ablations.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--quiet", action="store_true", help="only warnings and results")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic RGB-D dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=625)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", default="32x32")
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--palette", choices=("hue", "geometry"), default="hue")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="run stage 1 (contrastive) or stage 2 (masked depth + denoising)")
    _common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--init", help="stage-1 checkpoint to transfer into the stage-2 encoders")
    p.add_argument("--out", required=True, help="checkpoint path (.ckpt)")
    p.add_argument("--trace", help="loss trace CSV (default: <out>.trace.csv)")
    p.set_defaults(func=cmd_pretrain)

    for name, func, helptext in (
        ("finetune", cmd_finetune, "fit a probe (optionally fine-tuning the encoder) and report the metric"),
        ("eval", cmd_eval, "frozen-encoder probe of a checkpoint, or score stored predictions"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--ckpt", required=(name == "finetune"))
        _probe_flags(p)
        p.add_argument("--seeds", help="comma-separated probe seeds")
        p.add_argument("--out", required=True, help="report CSV")
        p.add_argument("--save-ckpt", help="write the fine-tuned checkpoint of the first seed")
        if name == "finetune":
            p.add_argument("--finetune-epochs", type=int, default=None, help="epochs that also update the encoder")
        else:
            p.add_argument("--pred", help="dataset of predicted samples to score against --data")
            p.add_argument("--split", default="val", help="split to score with --pred (or 'all')")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="run one ablation table")
    _common(p)
    p.add_argument("--which", required=True, choices=("ordering", "denoise", "masking", "loss", "lowdata"))
    p.add_argument("--seeds", help="comma-separated run seeds (default: 0,1,2)", default="0,1,2")
    p.add_argument("--grid", help="masking grid as rgb/depth pairs, e.g. 0.2/0.2,0.8/0.8")
    p.add_argument("--fractions", help="low-data fractions, ascending")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true")
    _probe_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of both stage losses on a tiny model")
    p.add_argument("--config", help="overrides on top of the tiny gradcheck config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int)
    p.add_argument("--corrupt", metavar="PARAM", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="render loss traces as an SVG convergence plot")
    p.add_argument("--traces", nargs="+", required=True)
    p.add_argument("--labels", help="comma-separated series names")
    p.add_argument("--column", help="loss column (default: loss_total, else loss_pnce)")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help/--version, 2 for usage
        return int(exc.code or 0)
    logging.basicConfig(
        stream=sys.stdout,
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError, ContractError, CompatibilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
