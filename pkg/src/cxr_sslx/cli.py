"""Command-line entry point.

One command per stage plus evaluation, explanation, and cross-run
reporting. Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure. Setting CXR_SSLX_DETERMINISTIC=1 forces
deterministic kernels and requires an explicit seed.

Run directory layout:
    config.snapshot   effective config, reproduces the run with the seed
    checkpoints/      stage outputs
    logs/             epochs.txt, ssl_loss.txt, manifest.tsv
    reports/          aggregate tables, evaluation reports
    heatmaps/         attention overlays
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from cxr_sslx import data as data_mod
from cxr_sslx import explain as explain_mod
from cxr_sslx import pipeline, seeding
from cxr_sslx.checkpoint import (STAGE_FINETUNED, STAGE_SSL, load_checkpoint)
from cxr_sslx.config import TrainConfig, format_config, load_config
from cxr_sslx.errors import (CheckpointError, ConfigError, CxrError, DataError,
                             NumericalError)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="cxr-sslx", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ssl-pretrain",
                       help="self-supervised pre-training on unlabeled images")
    p.add_argument("--config", required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--backbone-weights",
                   help="external backbone checkpoint (init_mode transfer_ssl)")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true",
                   help="overwrite an existing run directory")

    p = sub.add_parser("finetune", help="supervised fine-tuning")
    p.add_argument("--config", required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--out-dir", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--init", help="checkpoint to initialize the backbone from")
    group.add_argument("--scratch", action="store_true",
                       help="random initialization (no pre-training)")
    p.add_argument("--label-fraction", type=float,
                   help="stratified fraction of train labels to use")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("evaluate", help="evaluate a fine-tuned checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--out-dir", default=".")

    p = sub.add_parser("explain", help="attention overlays for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class", dest="class_name",
                   help="explain this class instead of the prediction")
    p.add_argument("--out-dir", default="heatmaps")
    p.add_argument("--colormap", default=explain_mod.DEFAULT_COLORMAP)
    p.add_argument("images", nargs="+")

    p = sub.add_parser("report", help="combined table and curves across runs")
    p.add_argument("--last-k", type=int, default=10)
    p.add_argument("--out-dir", default="report")
    p.add_argument("run_dirs", nargs="+")
    return parser


def _load_run_config(args) -> TrainConfig:
    config, provided = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = config.replace(seed=args.seed)
    elif seeding.deterministic_mode() and "seed" not in provided:
        raise ConfigError("deterministic mode needs an explicit seed: pass "
                          "--seed or set it in the config file")
    if getattr(args, "label_fraction", None) is not None:
        config = config.replace(label_fraction=args.label_fraction)
    return config


def _prepare_run_dir(out_dir: str, config: TrainConfig, force: bool) -> Path:
    run = Path(out_dir)
    snapshot = run / "config.snapshot"
    if snapshot.exists() and not force:
        raise ConfigError(f"{run} already contains a run; pass --force to "
                          "overwrite")
    for sub in ("checkpoints", "logs", "reports", "heatmaps"):
        (run / sub).mkdir(parents=True, exist_ok=True)
    snapshot.write_text(format_config(config))
    return run


def _scan_and_split(data_root: str, config: TrainConfig) -> data_mod.DatasetManifest:
    manifest = data_mod.scan_dataset(data_root)
    if not manifest.records:
        raise DataError(f"no images found under {data_root}")
    return data_mod.split(manifest, config.train_ratio, config.seed)


def cmd_ssl_pretrain(args) -> int:
    config = _load_run_config(args)
    weights = None
    if args.backbone_weights:
        weights = load_checkpoint(args.backbone_weights)
    if config.init_mode == "transfer_ssl" and weights is None:
        raise ConfigError("init_mode transfer_ssl needs --backbone-weights")
    manifest = _scan_and_split(args.data_root, config)
    run = _prepare_run_dir(args.out_dir, config, args.force)
    data_mod.save_manifest(manifest, run / "logs" / "manifest.tsv")
    envelope, losses = pipeline.run_ssl_pretraining(config, manifest,
                                                    backbone_weights=weights)
    path = envelope.save(run / "checkpoints" / "ssl_pretrained.ckpt")
    loss_lines = [f"epoch={i + 1}\tloss={value:.6f}"
                  for i, value in enumerate(losses)]
    (run / "logs" / "ssl_loss.txt").write_text("\n".join(loss_lines) + "\n")
    if losses:
        print(f"pre-training done: {len(losses)} epochs, final loss "
              f"{losses[-1]:.4f}")
    else:
        print("pre-training done: 0 epochs")
    print(f"checkpoint: {path}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    config = _load_run_config(args)
    init = None
    if args.init:
        init = load_checkpoint(args.init)
        if init.stage == STAGE_SSL:
            config = config.replace(init_mode=init.config.init_mode)
        else:
            config = config.replace(init_mode="transfer")
    else:
        config = config.replace(init_mode="scratch")
    manifest = _scan_and_split(args.data_root, config)
    run = _prepare_run_dir(args.out_dir, config, args.force)
    data_mod.save_manifest(manifest, run / "logs" / "manifest.tsv")
    n_train = len(data_mod.stratified_subsample(
        manifest, config.label_fraction, config.seed).by_split(data_mod.TRAIN))
    print(f"fine-tuning on {n_train} training images "
          f"(label fraction {config.label_fraction:g})")
    logs, envelope = pipeline.run_finetune(config, manifest, init=init)
    path = envelope.save(run / "checkpoints" / "finetuned.ckpt")
    lines = [pipeline.format_epoch_log(log) for log in logs]
    (run / "logs" / "epochs.txt").write_text("\n".join(lines) + "\n")
    k = min(10, len(logs))
    if k:
        aggregate = pipeline.aggregate_last_k(logs, k)
        report_lines = [f"last_{k}_epochs"]
        report_lines += [f"{key} = {mean:.6f} (variance {var:.6f})"
                         for key, (mean, var) in aggregate.items()]
        (run / "reports" / f"last{k}.txt").write_text("\n".join(report_lines) + "\n")
        summary = "  ".join(f"{key}={mean:.4f}" for key, (mean, _) in
                            aggregate.items() if key != "loss")
        print(f"last {k} epochs: {summary}")
    print(f"checkpoint: {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    envelope = load_checkpoint(args.checkpoint)
    if envelope.stage != STAGE_FINETUNED:
        raise CheckpointError(
            f"evaluate needs a finetuned checkpoint, got stage {envelope.stage!r}")
    config = envelope.config
    manifest = _scan_and_split(args.data_root, config)
    classes = manifest.classes
    if classes != tuple(config.class_names):
        raise DataError(
            f"dataset classes {classes} do not match the checkpoint's "
            f"classes {tuple(config.class_names)}")
    model = pipeline.classifier_from_envelope(envelope)
    test_records = manifest.by_split(data_mod.TEST)
    if not test_records:
        raise DataError("test split is empty")
    images, labels = pipeline.preload_images(test_records, config.finetune_image_size,
                                       classes)
    report = pipeline.evaluate_model(model, images, labels, config, classes)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.txt").write_text(report.to_text())
    (out / "confusion.csv").write_text(report.confusion.to_csv())
    sys.stdout.write(report.to_text())
    print(f"wrote {out / 'eval_report.txt'} and {out / 'confusion.csv'}")
    return EXIT_OK


def cmd_explain(args) -> int:
    envelope = load_checkpoint(args.checkpoint)
    if envelope.stage != STAGE_FINETUNED:
        raise CheckpointError(
            f"explain needs a finetuned checkpoint, got stage {envelope.stage!r}")
    config = envelope.config
    classes = tuple(config.class_names)
    model = pipeline.classifier_from_envelope(envelope)
    target_class = None
    if args.class_name is not None:
        if args.class_name not in classes:
            raise ConfigError(f"--class must be one of {classes}, got "
                              f"{args.class_name!r}")
        target_class = classes.index(args.class_name)
    out = Path(args.out_dir)
    for image_path in args.images:
        display = pipeline.load_resized_gray(image_path,
                                              config.finetune_image_size)
        model_input = pipeline.to_model_input(display[None], config)[0]
        heatmap = explain_mod.gradcampp(model, model_input,
                                        target_class=target_class,
                                        class_names=classes)
        name = Path(image_path).stem
        out_path = out / f"{name}_cam_{heatmap.class_name}.png"
        explain_mod.overlay(display, heatmap, colormap_name=args.colormap,
                            out_path=out_path)
        note = " (degenerate: zero gradient field)" if heatmap.degenerate else ""
        print(f"{image_path} -> {out_path}{note}")
    return EXIT_OK


def _read_run(run_dir: Path, k: int) -> dict:
    snapshot = run_dir / "config.snapshot"
    epochs = run_dir / "logs" / "epochs.txt"
    if not snapshot.is_file():
        raise DataError(f"{run_dir} has no config.snapshot")
    if not epochs.is_file():
        raise DataError(f"{run_dir} has no logs/epochs.txt")
    config, _ = load_config(snapshot)
    rows = pipeline.parse_epoch_logs(epochs.read_text())
    if not rows:
        raise DataError(f"{epochs} is empty")
    aggregate = pipeline.aggregate_last_k(rows, min(k, len(rows)))
    return {"name": run_dir.name, "init_mode": config.init_mode,
            "label_fraction": config.label_fraction, "aggregate": aggregate}


def cmd_report(args) -> int:
    runs = [_read_run(Path(d), args.last_k) for d in args.run_dirs]
    metric_keys = ("sen", "spe", "hm", "auc", "acc")
    header = f"{'run':24s} {'variant':14s} {'frac':>6s}" + "".join(
        f" {key:>16s}" for key in metric_keys)
    print(header)
    for run in runs:
        cells = "".join(
            f" {run['aggregate'][key][0]:8.4f}±{np.sqrt(run['aggregate'][key][1]):7.4f}"
            for key in metric_keys)
        print(f"{run['name']:24s} {run['init_mode']:14s} "
              f"{run['label_fraction']:6.2f}{cells}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "init_mode", "label_fraction"]
                        + [f"{key}_{stat}" for key in metric_keys
                           for stat in ("mean", "var")])
        for run in runs:
            row = [run["name"], run["init_mode"], run["label_fraction"]]
            for key in metric_keys:
                row.extend(run["aggregate"][key])
            writer.writerow(row)
    with open(out / "fraction_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label_fraction", "init_mode", "run"]
                        + [f"{key}_mean" for key in metric_keys])
        for run in sorted(runs, key=lambda r: r["label_fraction"]):
            writer.writerow([run["label_fraction"], run["init_mode"], run["name"]]
                            + [run["aggregate"][key][0] for key in metric_keys])
    print(f"wrote {out / 'comparison.csv'} and {out / 'fraction_curve.csv'}")
    return EXIT_OK


_COMMANDS = {
    "ssl-pretrain": cmd_ssl_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        seeding.apply_determinism()
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CxrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
