"""Command-line entry point for batch experiments.

Subcommands map onto the training recipe: gen-data, split, train-teacher,
pseudo-label, train-student, eval, ablate, ssl-demo. Each run writes its
artifacts plus a manifest into an output directory and exits 0 on success;
errors print one machine-parsable line and exit 2 (config), 3 (data), or
4 (numeric failure).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import data as data_mod
from . import pipeline, sslzoo
from .detector import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericError, SemidetError
from .pseudolabel import generate_pseudo_labels, load_pseudo_labels, save_pseudo_labels
from .pipeline import TrainConfig

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def parse_config_file(path: str | Path) -> dict[str, object]:
    """Flat key=value config; '#' starts a comment; unknown keys are rejected."""
    out: dict[str, object] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = coerce_config_value(key, value, where=f"{path}:{lineno}")
    return out


def coerce_config_value(key: str, value: str, where: str = "config") -> object:
    if key not in _CONFIG_FIELDS:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    typ = _CONFIG_FIELDS[key].type
    try:
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        if typ == "str":
            return value
        # tuple fields: comma-separated ints
        return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {value!r}") from exc


def build_train_config(args: argparse.Namespace) -> TrainConfig:
    values: dict[str, object] = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for key in _CONFIG_FIELDS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(f"bad training config: {exc}") from exc


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--lambda-u", dest="lambda_u", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--nms-threshold", dest="nms_threshold", type=float)
    p.add_argument("--aug-mode", dest="aug_mode", choices=pipeline.AUG_MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument(
        "--anchor-sizes",
        dest="anchor_sizes",
        type=lambda s: tuple(int(v) for v in s.split(",")),
    )
    p.add_argument("--sample-cap", dest="sample_cap", type=int)


def prepare_out_dir(out: str | Path, overwrite: bool) -> Path:
    out = Path(out)
    if (out / "manifest.json").exists() and not overwrite:
        raise ConfigError(f"output directory {out} already holds a run; pass --overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


class Manifest:
    def __init__(self, command: str, args: argparse.Namespace, out_dir: Path) -> None:
        self.doc = {
            "command": command,
            "config_path": getattr(args, "config", None),
            "seed": getattr(args, "seed", None),
            "out_dir": str(out_dir),
            "argv": sys.argv[1:],
            "started_at": _now(),
        }
        self.out_dir = out_dir

    def finish(self) -> None:
        self.doc["finished_at"] = _now()
        with open(self.out_dir / "manifest.json", "w") as fh:
            json.dump(self.doc, fh, indent=2)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_config(cfg: TrainConfig, out_dir: Path) -> None:
    with open(out_dir / "config.json", "w") as fh:
        json.dump(dataclasses.asdict(cfg), fh, indent=2, sort_keys=True)


def _load_items(path: str, what: str) -> list[data_mod.AnnotatedImage]:
    loaded = data_mod.load_annotations(path)
    if not loaded.items:
        raise DataError(f"{what} dataset {path} is empty")
    return loaded.items


def cmd_gen_data(args: argparse.Namespace) -> int:
    out = prepare_out_dir(args.out, args.overwrite)
    manifest = Manifest("gen-data", args, out)
    cfg = data_mod.SyntheticConfig(width=args.width, height=args.height)
    items = data_mod.gen_synthetic(args.seed, args.n, cfg)
    data_mod.save_annotations(items, out / "annotations.json")
    manifest.finish()
    print(f"wrote {len(items)} images to {out}")
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    out = prepare_out_dir(args.out, args.overwrite)
    manifest = Manifest("split", args, out)
    items = _load_items(args.data, "input")
    split = data_mod.split_protocol(items, args.fraction, args.fold)
    data_mod.save_annotations(split.labeled, out / "labeled.json", image_dir=out / "images")
    data_mod.save_annotations(
        split.unlabeled, out / "unlabeled.json", image_dir=out / "images"
    )
    manifest.finish()
    print(f"labeled={len(split.labeled)} unlabeled={len(split.unlabeled)} -> {out}")
    return 0


def cmd_train_teacher(args: argparse.Namespace) -> int:
    out = prepare_out_dir(args.out, args.overwrite)
    manifest = Manifest("train-teacher", args, out)
    cfg = build_train_config(args)
    labeled = _load_items(args.labeled, "labeled")
    result = pipeline.train_teacher(labeled, cfg)
    save_checkpoint(result.model, out / "teacher.ckpt")
    (out / "loss_log.csv").write_text(pipeline.loss_log_csv(result.loss_log))
    _write_config(cfg, out)
    manifest.finish()
    print(f"teacher trained for {cfg.steps} steps -> {out / 'teacher.ckpt'}")
    return 0


def cmd_pseudo_label(args: argparse.Namespace) -> int:
    teacher = load_checkpoint(args.teacher)
    unlabeled = _load_items(args.unlabeled, "unlabeled")
    pseudo = _pseudo_labels_parallel(
        teacher, unlabeled, args.tau, args.nms_threshold, args.jobs
    )
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_pseudo_labels(pseudo, out_path)
    n_boxes = sum(len(p.boxes) for p in pseudo.values())
    print(f"pseudo-labeled {len(pseudo)} images ({n_boxes} boxes at tau={args.tau}) -> {out_path}")
    return 0


def _pseudo_labels_parallel(teacher, unlabeled, tau, nms_threshold, jobs):
    if jobs <= 1:
        return generate_pseudo_labels(teacher, unlabeled, tau, nms_threshold)
    from concurrent.futures import ProcessPoolExecutor

    chunks = [unlabeled[i::jobs] for i in range(jobs)]
    out = {}
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [
            pool.submit(generate_pseudo_labels, teacher, chunk, tau, nms_threshold)
            for chunk in chunks
            if chunk
        ]
        for fut in futures:
            out.update(fut.result())
    return out


def cmd_train_student(args: argparse.Namespace) -> int:
    out = prepare_out_dir(args.out, args.overwrite)
    manifest = Manifest("train-student", args, out)
    cfg = build_train_config(args)
    labeled = _load_items(args.labeled, "labeled")
    unlabeled = _load_items(args.unlabeled, "unlabeled")
    teacher = load_checkpoint(args.teacher)
    pseudo = load_pseudo_labels(args.pseudo) if args.pseudo else None
    result = pipeline.run_stac(labeled, unlabeled, teacher, cfg, pseudo=pseudo)
    save_checkpoint(result.model, out / "student.ckpt")
    (out / "loss_log.csv").write_text(pipeline.loss_log_csv(result.loss_log))
    if result.pseudo is not None and not args.pseudo:
        save_pseudo_labels(result.pseudo, out / "pseudo_labels.json")
    _write_config(cfg, out)
    manifest.finish()
    print(f"student trained for {cfg.steps} steps -> {out / 'student.ckpt'}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    out = prepare_out_dir(args.out, args.overwrite)
    manifest = Manifest("eval", args, out)
    model = load_checkpoint(args.model)
    items = _load_items(args.data, "eval")
    result = _evaluate_parallel(model, items, args.nms_threshold, args.jobs)
    (out / "eval.json").write_text(result.to_json())
    class_names = dict(enumerate(data_mod.CLASS_NAMES))
    print(result.format_table(class_names))
    manifest.finish()
    return 0


def _evaluate_parallel(model, items, nms_threshold, jobs):
    from . import metrics

    if jobs <= 1:
        return pipeline.evaluate_model(model, items, nms_threshold)
    from concurrent.futures import ProcessPoolExecutor

    chunks = [items[i::jobs] for i in range(jobs)]
    dets_by_image = {}
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [
            pool.submit(_infer_chunk, model, chunk, nms_threshold)
            for chunk in chunks
            if chunk
        ]
        for fut in futures:
            dets_by_image.update(fut.result())
    gts = {it.id: it.gt for it in items}
    return metrics.evaluate(dets_by_image, gts)


def _infer_chunk(model, items, nms_threshold):
    from .pseudolabel import infer

    return {it.id: infer(model, it.image, nms_threshold) for it in items}


def cmd_ablate(args: argparse.Namespace) -> int:
    out = prepare_out_dir(args.out, args.overwrite)
    manifest = Manifest("ablate", args, out)
    cfg = build_train_config(args)
    labeled = _load_items(args.labeled, "labeled")
    unlabeled = _load_items(args.unlabeled, "unlabeled")
    eval_items = _load_items(args.eval_data, "eval")
    teacher = load_checkpoint(args.teacher)
    if args.kind == "grid":
        taus = [float(v) for v in args.tau_grid.split(",")]
        lams = [float(v) for v in args.lambda_u_grid.split(",")]
        cells = pipeline.ablate_grid(labeled, unlabeled, teacher, lams, taus, cfg, eval_items)
        lines = ["lambda_u,tau,map,ap50"]
        lines += [f"{c.lambda_u},{c.tau},{c.map!r},{c.ap50!r}" for c in cells]
    else:
        mults = [m if m == "full" else int(m) for m in args.multipliers.split(",")]
        cells = pipeline.ablate_unlabeled_size(
            labeled, unlabeled, teacher, mults, cfg, eval_items
        )
        lines = ["multiplier,n_unlabeled,map,ap50,clamped"]
        lines += [
            f"{c.multiplier},{c.n_unlabeled},{c.map!r},{c.ap50!r},{int(c.clamped)}"
            for c in cells
        ]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    manifest.finish()
    return 0


def cmd_ssl_demo(args: argparse.Namespace) -> int:
    out = prepare_out_dir(args.out, args.overwrite)
    manifest = Manifest("ssl-demo", args, out)
    if args.method not in sslzoo.METHODS:
        raise ConfigError(f"unknown method {args.method!r}; choose from {sslzoo.METHODS}")
    result = sslzoo.demo_run(args.method, seed=args.seed, steps=args.steps)
    (out / "demo.json").write_text(json.dumps(result, indent=2))
    print(
        f"{args.method}: test accuracy {result['test_accuracy']:.3f} "
        f"(supervised-only baseline {result['supervised_only_accuracy']:.3f})"
    )
    manifest.finish()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semidet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shapes benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="labeled-fraction protocol split")
    p.add_argument("--data", required=True, help="annotations.json of the full set")
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--fold", type=int, default=0, help="fold seed")
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-teacher", help="supervised training on labeled data")
    p.add_argument("--labeled", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    add_config_flags(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("pseudo-label", help="offline pseudo-label generation")
    p.add_argument("--teacher", required=True)
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=0.9)
    p.add_argument("--nms-threshold", dest="nms_threshold", type=float, default=0.5)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("train-student", help="joint supervised + unsupervised training")
    p.add_argument("--labeled", required=True)
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--pseudo", help="pre-generated pseudo-label JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    add_config_flags(p)
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("eval", help="COCO-style evaluation of a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--nms-threshold", dest="nms_threshold", type=float, default=0.5)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="hyperparameter / unlabeled-size ablations")
    p.add_argument("--kind", choices=("grid", "unlabeled-size"), default="grid")
    p.add_argument("--labeled", required=True)
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--eval-data", dest="eval_data", required=True)
    p.add_argument("--tau-grid", dest="tau_grid", default="0,0.3,0.5,0.7,0.9")
    p.add_argument("--lambda-u-grid", dest="lambda_u_grid", default="0.1,0.5,1,2,4")
    p.add_argument("--multipliers", default="1,2,4,8,full")
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("ssl-demo", help="consistency-regularization zoo on a toy classifier")
    p.add_argument("--method", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_ssl_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SemidetError as exc:
        print(f"error: internal: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
