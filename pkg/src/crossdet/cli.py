"""Command-line entry point orchestrating the three-phase pipeline
(source training, target-style generation, fine-tuning) plus data tooling,
evaluation and the ablation matrix.

Every command resolves its configuration up front, writes it (with the seed)
into the run directory, and exits 0 on success or a documented nonzero code
with a one-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import copy
import sys
from dataclasses import replace
from pathlib import Path

from . import augment as augment_mod
from . import datakit, detector, detmetrics, translator
from .config import ConfigError, RunConfig, load_run_config, save_run_config

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INPUT = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4

_EPILOG = """exit codes:
  0  success
  1  unexpected error
  2  missing or invalid input (files, manifests, checkpoints)
  3  configuration error or conflict
  4  numerical abort (non-finite loss)

configuration precedence: defaults < --config file < CROSSDET_* environment
variables (CROSSDET_<SECTION>_<KEY>, e.g. CROSSDET_DETECTOR_EPOCHS) < flags.
"""

ABLATION_DETECTORS = [
    ("faster-rcnn", dict(cbam_head=False, cbam_tail=False, use_giou=False)),
    ("+giou", dict(cbam_head=False, cbam_tail=False, use_giou=True)),
    ("+giou+head-attn", dict(cbam_head=True, cbam_tail=False, use_giou=True)),
    ("+giou+tail-attn", dict(cbam_head=False, cbam_tail=True, use_giou=True)),
    ("attention-rcnn", dict(cbam_head=True, cbam_tail=True, use_giou=True)),
]
STRATEGY_STAGES = ("source-only", "+translation", "+augmentation", "+cam-translation")


def _prepare_run_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_run_config(cfg, out / "resolved.cfg")
    return out


def _load_manifest(path: str) -> datakit.DatasetManifest:
    return datakit.load_manifest(path)


def _manifest_images(manifest: datakit.DatasetManifest):
    return [datakit.load_image(manifest.image_path(e)) for e in manifest.entries]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_synth(args, cfg: RunConfig) -> int:
    out = _prepare_run_dir(cfg)
    day, night = datakit.generate_synthetic(
        cfg.n_train_day, cfg.n_test_night, cfg.synthetic, cfg.seed, out
    )
    print(f"wrote {len(day.entries)} day / {len(night.entries)} night images under {out}")
    return EXIT_OK


def cmd_augment(args, cfg: RunConfig) -> int:
    manifest = _load_manifest(args.manifest)
    out = _prepare_run_dir(cfg)
    expanded = augment_mod.expand_dataset(manifest, cfg.augment, out)
    print(f"expanded {len(manifest.entries)} -> {len(expanded.entries)} images under {out}")
    return EXIT_OK


def cmd_train_detector(args, cfg: RunConfig) -> int:
    manifest = _load_manifest(args.manifest)
    out = _prepare_run_dir(cfg)
    _, history = detector.train_detector(manifest, cfg.detector, cfg.seed, out)
    print(
        f"trained detector for {len(history)} epochs; final loss "
        f"{history[-1]['total']:.4f}; checkpoint at {out / 'checkpoint.pt'}"
    )
    return EXIT_OK


def cmd_train_translator(args, cfg: RunConfig) -> int:
    source = _load_manifest(args.source_manifest)
    target = _load_manifest(args.target_manifest)
    out = _prepare_run_dir(cfg)
    bundle, history = translator.train_translator(
        _manifest_images(source), _manifest_images(target), cfg.translator, cfg.seed, out
    )
    print(
        f"trained translator for {len(history)} iterations; final g loss "
        f"{history[-1]['g_total']:.3f}; checkpoint at {out / 'translator.pt'}"
    )
    return EXIT_OK


def cmd_translate(args, cfg: RunConfig) -> int:
    manifest = _load_manifest(args.manifest)
    bundle = translator.load_bundle(args.translator)
    gen = bundle.g_s2t if args.direction == "s2t" else bundle.g_t2s
    out = _prepare_run_dir(cfg)
    generated = translator.translate_dataset(manifest, gen, out, workers=cfg.workers)
    print(f"translated {len(generated.entries)} images; manifest at {out / 'generated.manifest'}")
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    model, _ = detector.load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    out = _prepare_run_dir(cfg)
    epochs = cfg.finetune_epochs if args.epochs is None else args.epochs
    _, history = detector.finetune(
        model, manifest, cfg.detector, cfg.seed, epochs=epochs, out_dir=out
    )
    print(f"fine-tuned for {len(history)} epochs; checkpoint at {out / 'checkpoint.pt'}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    manifest = _load_manifest(args.manifest)
    out = _prepare_run_dir(cfg)
    if (args.checkpoint is None) == (args.detections is None):
        print("evaluate needs exactly one of --checkpoint or --detections", file=sys.stderr)
        return EXIT_CONFIG
    if args.checkpoint is not None:
        model, _ = detector.load_checkpoint(args.checkpoint)
        results = []
        dump: list[tuple[str, detector.Detection]] = []
        for entry in manifest.entries:
            img = datakit.load_image(manifest.image_path(entry))
            import torch

            dets = detector.detect(torch.from_numpy(img), model, score_threshold=0.05)
            results.append((dets, entry.boxes))
            dump.extend((entry.image_path, d) for d in dets)
        detector.save_detections(dump, out / "detections.txt")
    else:
        by_image = detector.load_detections(args.detections)
        results = [
            (by_image.get(entry.image_path, []), entry.boxes) for entry in manifest.entries
        ]
    report = detmetrics.evaluate_detections(
        results, cfg.eval_iou_threshold, cfg.eval_score_threshold
    )
    detmetrics.save_report(report, out / "metrics.txt")
    curves = [
        (manifest.class_names[c], detmetrics.pr_curve(results, c, cfg.eval_iou_threshold))
        for c in sorted(report.per_class_ap)
    ]
    datakit.emit_report([("evaluation", report)], curves, [], out)
    print(
        f"f1 {report.f1:.4f} recall {report.recall:.4f} precision {report.precision:.4f} "
        f"map {report.map_score:.4f}; report at {out / 'metrics.txt'}"
    )
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = _prepare_run_dir(cfg)
    rows = run_ablation(cfg, out)
    datakit.emit_report(rows, [], [], out)
    print(f"ablation table ({len(rows)} rows) at {out / 'metrics_table.txt'}")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    out = _prepare_run_dir(cfg)
    rows = []
    for path in args.metrics:
        rows.append((Path(path).parent.name or Path(path).stem, detmetrics.load_report(path)))
    datakit.emit_report(rows, [], [], out)
    print(f"re-rendered {len(rows)} reports into {out / 'metrics_table.txt'}")
    return EXIT_OK


def run_ablation(cfg: RunConfig, out: Path) -> list[tuple[str, detmetrics.MetricsReport]]:
    """Five detector configurations x four training-strategy stages at micro
    scale; translator trainings are shared across detector rows."""
    ab = cfg.ablate
    synth = replace(cfg.synthetic, image_size=cfg.detector.image_size)
    day, night = datakit.generate_synthetic(
        ab.n_train, ab.n_test, synth, cfg.seed, out / "data"
    )
    augmented = augment_mod.expand_dataset(day, cfg.augment, out / "augmented")

    tr_base = replace(
        cfg.translator,
        image_size=cfg.detector.image_size,
        iterations=ab.translator_iterations,
        sample_interval=0,
        checkpoint_interval=0,
    )
    day_images = _manifest_images(day)
    night_images = _manifest_images(night)
    plain, _ = translator.train_translator(
        day_images, night_images, replace(tr_base, use_cam=False), cfg.seed
    )
    cam, _ = translator.train_translator(
        day_images, night_images, replace(tr_base, use_cam=True), cfg.seed
    )
    gen_plain = translator.translate_dataset(day, plain.g_s2t, out / "gen_plain")
    gen_aug_plain = translator.translate_dataset(augmented, plain.g_s2t, out / "gen_aug_plain")
    gen_aug_cam = translator.translate_dataset(augmented, cam.g_s2t, out / "gen_aug_cam")

    def night_eval(model):
        return detector.evaluate_model(
            model, night, cfg.eval_iou_threshold, cfg.eval_score_threshold
        )

    rows: list[tuple[str, detmetrics.MetricsReport]] = []
    for name, flags in ABLATION_DETECTORS:
        det_cfg = replace(cfg.detector, epochs=ab.detector_epochs, **flags)
        source_model, _ = detector.train_detector(day, det_cfg, cfg.seed)
        rows.append((f"{name} | {STRATEGY_STAGES[0]}", night_eval(source_model)))

        m, _ = detector.finetune(
            copy.deepcopy(source_model), gen_plain, det_cfg, cfg.seed, epochs=ab.finetune_epochs
        )
        rows.append((f"{name} | {STRATEGY_STAGES[1]}", night_eval(m)))

        aug_model, _ = detector.train_detector(augmented, det_cfg, cfg.seed)
        m, _ = detector.finetune(
            copy.deepcopy(aug_model), gen_aug_plain, det_cfg, cfg.seed, epochs=ab.finetune_epochs
        )
        rows.append((f"{name} | {STRATEGY_STAGES[2]}", night_eval(m)))

        m, _ = detector.finetune(
            copy.deepcopy(aug_model), gen_aug_cam, det_cfg, cfg.seed, epochs=ab.finetune_epochs
        )
        rows.append((f"{name} | {STRATEGY_STAGES[3]}", night_eval(m)))
    return rows


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossdet",
        description="cross-domain (day-to-night) car detection pipeline",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, epilog=_EPILOG,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--out", help="run directory (overrides config)")
        p.add_argument("--workers", type=int, help="parallel workers for per-image stages")
        p.set_defaults(func=func)
        return p

    add("gen-synth", cmd_gen_synth, "generate the synthetic day/night benchmark")

    p = add("augment", cmd_augment, "expand a labeled dataset 4x (noise/mask/jitter)")
    p.add_argument("--manifest", required=True)

    p = add("train-detector", cmd_train_detector, "train the detector on a labeled manifest")
    p.add_argument("--manifest", required=True)

    p = add("train-translator", cmd_train_translator, "train the day/night translator")
    p.add_argument("--source-manifest", required=True)
    p.add_argument("--target-manifest", required=True)

    p = add("translate", cmd_translate, "translate a manifest with a trained generator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--translator", required=True, help="translator checkpoint")
    p.add_argument("--direction", choices=("s2t", "t2s"), default="s2t")

    p = add("finetune", cmd_finetune, "fine-tune a detector checkpoint on generated images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, help="fine-tune epochs (default from config)")

    p = add("evaluate", cmd_evaluate, "evaluate a checkpoint or detection dump on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--detections", help="detection dump file instead of a checkpoint")

    add("ablate", cmd_ablate, "run the 5-configuration x 4-strategy ablation matrix")

    p = add("report", cmd_report, "re-render saved metrics reports as a table")
    p.add_argument("--metrics", nargs="+", required=True)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.out is not None:
        overrides["run.out"] = args.out
    if args.workers is not None:
        overrides["run.workers"] = str(args.workers)
    try:
        cfg = load_run_config(args.config, overrides=overrides)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args, cfg)
    except (FileNotFoundError, datakit.ManifestError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as exc:
        if "non-finite" in str(exc):
            print(f"numerical abort: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except ValueError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
