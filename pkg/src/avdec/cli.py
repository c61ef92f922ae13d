"""Command line entrypoint orchestrating the pipeline end to end.

Every subcommand reads an optional flat config file, merges command-line
flags over it (flags win), logs the fully resolved configuration, and
writes its artifacts under --out-dir. Verbosity comes from the DCAV_LOG
environment variable (info by default, debug echoes per-step training
losses).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from avdec import checkpoint, dataio, gradcheck, inference, metrics, training
from avdec.config import RunConfig, load_config, resolve
from avdec.model import ModelCore

log = logging.getLogger("avdec")

# defaults for keys shared by several subcommands; per-subcommand extras below
COMMON_DEFAULTS = {
    "out-dir": ".",
    "seed": 0,
    "fusion": "mutan",
    "modality": "both",
    "audio-feature": "mfcc",
    "mask-scale": 50.0,
    "iou-threshold": 0.7,
    "epochs": None,
    "batch-size": 8,
}

SYNTH_DEFAULTS = {
    "videos": 20,
    "val-videos": 0,
    "frames": 64,
    "feature-dim": 500,
    "duration": 3.2,
    "templates": 10,
    "min-events": 1,
    "max-events": 3,
    "min-length": 0.15,
    "max-length": 0.35,
    "tone-amp": 0.3,
    "chirp-amp": 0.05,
    "noise-sigma": 0.1,
    "video-cues": True,
}

TRAIN_DEFAULTS = {
    "data": None,
    "hidden": 64,
    "target-accuracy": None,
}

INFER_DEFAULTS = {
    "data": None,
    "checkpoint": None,
    "meta": None,
    "split": None,
}

EVAL_DEFAULTS = {
    "pred": None,
    "gt": None,
    "out": None,
}

ALL_KEYS = (set(COMMON_DEFAULTS) | set(SYNTH_DEFAULTS) | set(TRAIN_DEFAULTS)
            | set(INFER_DEFAULTS) | set(EVAL_DEFAULTS) | {"config"})


def _setup_logging():
    level = logging.DEBUG if os.environ.get("DCAV_LOG", "info").lower() == "debug" else logging.INFO
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr, force=True)


def _add_common(parser):
    parser.add_argument("--config", default=None, help="flat key = value file")
    parser.add_argument("--out-dir", dest="out-dir", default=None)
    parser.add_argument("--seed", dest="seed", type=int, default=None)
    parser.add_argument("--fusion", dest="fusion", default=None,
                        choices=("mixture", "context", "mutan"))
    parser.add_argument("--modality", dest="modality", default=None,
                        choices=("audio", "video", "both"))
    parser.add_argument("--audio-feature", dest="audio-feature", default=None,
                        choices=("mfcc", "cqt"))
    parser.add_argument("--mask-scale", dest="mask-scale", type=float, default=None)
    parser.add_argument("--iou-threshold", dest="iou-threshold", type=float, default=None)
    parser.add_argument("--epochs", dest="epochs", type=int, default=None)
    parser.add_argument("--batch-size", dest="batch-size", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="avdec")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--videos", dest="videos", type=int, default=None)
    p.add_argument("--val-videos", dest="val-videos", type=int, default=None)
    p.add_argument("--frames", dest="frames", type=int, default=None)
    p.add_argument("--feature-dim", dest="feature-dim", type=int, default=None)
    p.add_argument("--duration", dest="duration", type=float, default=None)
    p.add_argument("--templates", dest="templates", type=int, default=None)
    p.add_argument("--min-events", dest="min-events", type=int, default=None)
    p.add_argument("--max-events", dest="max-events", type=int, default=None)
    p.add_argument("--min-length", dest="min-length", type=float, default=None)
    p.add_argument("--max-length", dest="max-length", type=float, default=None)
    p.add_argument("--tone-amp", dest="tone-amp", type=float, default=None)
    p.add_argument("--chirp-amp", dest="chirp-amp", type=float, default=None)
    p.add_argument("--noise-sigma", dest="noise-sigma", type=float, default=None)
    p.add_argument("--video-cues", dest="video-cues", default=None,
                   choices=("on", "off"))

    p = sub.add_parser("extract-audio", help="write audio feature records for a dataset")
    _add_common(p)

    p = sub.add_parser("build-vocab", help="write the train-split vocabulary")
    _add_common(p)

    for name, blurb in (("pretrain", "pretrain the caption generator at the full-clip proposal"),
                        ("train", "joint cycle training from a pretrained checkpoint")):
        p = sub.add_parser(name, help=blurb)
        _add_common(p)
        p.add_argument("--data", dest="data", default=None,
                       help="dataset directory (defaults to --out-dir)")
        p.add_argument("--hidden", dest="hidden", type=int, default=None)
        p.add_argument("--target-accuracy", dest="target-accuracy", type=float, default=None)

    p = sub.add_parser("infer", help="dense-caption a dataset split")
    _add_common(p)
    p.add_argument("--data", dest="data", default=None)
    p.add_argument("--checkpoint", dest="checkpoint", default=None)
    p.add_argument("--meta", dest="meta", default=None)
    p.add_argument("--split", dest="split", default=None, choices=("train", "val"))

    p = sub.add_parser("evaluate", help="score predictions against references")
    _add_common(p)
    p.add_argument("--pred", dest="pred", default=None)
    p.add_argument("--gt", dest="gt", default=None)
    p.add_argument("--out", dest="out", default=None)

    p = sub.add_parser("gradcheck", help="finite-difference check all gradients")
    _add_common(p)

    p = sub.add_parser("compare-fusions", help="train every fusion strategy plus a "
                       "video-only baseline and tabulate their scores")
    _add_common(p)
    p.add_argument("--data", dest="data", default=None)
    p.add_argument("--hidden", dest="hidden", type=int, default=None)
    p.add_argument("--target-accuracy", dest="target-accuracy", type=float, default=None)
    p.add_argument("--pretrain-epochs", dest="pretrain-epochs", type=int, default=None)

    return parser


def _resolve(args, extra_defaults):
    flags = {k: v for k, v in vars(args).items()
             if k not in ("subcommand", "config")}
    defaults = dict(COMMON_DEFAULTS)
    defaults.update(extra_defaults)
    file_values = load_config(args.config) if args.config else {}
    values = resolve(defaults, file_values, flags, known_keys=ALL_KEYS)
    run = RunConfig(vars(args)["subcommand"], values)
    log.info("resolved config | %s", run.describe())
    return run


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def _out_dir(run):
    out = Path(run["out-dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _spec_from(run):
    if run["video-cues"] in (True, "on"):
        cues = True
    elif run["video-cues"] in (False, "off"):
        cues = False
    else:
        raise ValueError(f"video-cues must be on or off, got {run['video-cues']!r}")
    return dataio.SyntheticSpec(
        seed=run["seed"], n_videos=run["videos"], n_val_videos=run["val-videos"],
        frames_per_video=run["frames"], feature_dim=run["feature-dim"],
        duration=run["duration"], n_templates=run["templates"],
        min_events=run["min-events"], max_events=run["max-events"],
        min_length=run["min-length"], max_length=run["max-length"],
        tone_amp=run["tone-amp"], chirp_amp=run["chirp-amp"],
        noise_sigma=run["noise-sigma"], video_cues=cues,
    )


def cmd_synth_data(run):
    out = _out_dir(run)
    dataio.generate_synthetic(_spec_from(run), out)
    log.info("wrote synthetic dataset to %s", out)
    return 0


def cmd_extract_audio(run):
    out = _out_dir(run)
    ann = _require(out / "train.json", "annotation file")
    wav_dir = _require(out / "wav", "wav directory")
    ids = list(dataio.load_annotations(ann, "train").videos)
    if (out / "val.json").exists():
        ids += list(dataio.load_annotations(out / "val.json", "val").videos)
    kind = run["audio-feature"]
    feats = dataio.extract_audio_features(wav_dir, ids, kind)
    path = out / f"features_audio_{kind}.dcav"
    checkpoint.save_tensors(path, feats)
    log.info("wrote %d %s feature records to %s", len(feats), kind, path)
    return 0


def cmd_build_vocab(run):
    out = _out_dir(run)
    ann = _require(out / "train.json", "annotation file")
    vocab = dataio.build_vocab(dataio.load_annotations(ann, "train"))
    vocab.save(out / "vocab.json")
    log.info("wrote %d-word vocabulary to %s", len(vocab), out / "vocab.json")
    return 0


def _load_data(run, out):
    data_dir = Path(run["data"]) if run.get("data") else out
    _require(data_dir / "train.json", "annotation file")
    return data_dir, training.load_dataset(data_dir, run["audio-feature"])


def _training_config(run, pretrain_epochs=None, joint_epochs=None):
    return training.TrainingConfig(
        pretrain_epochs=pretrain_epochs if pretrain_epochs is not None else 80,
        joint_epochs=joint_epochs if joint_epochs is not None else 40,
        batch_size=run["batch-size"], seed=run["seed"],
        target_accuracy=run.get("target-accuracy"),
    )


def _new_model(run, data, video_dim):
    return ModelCore(
        vocab_size=len(data.vocab), audio_dim=data.audio_dim, video_dim=video_dim,
        hidden=run["hidden"], fusion_strategy=run["fusion"], modality=run["modality"],
        audio_feature=run["audio-feature"], mask_scale=run["mask-scale"],
        seed=run["seed"],
    )


def _video_dim(data):
    for feats in data.video_features.values():
        return int(feats.shape[1])
    return 500


def _step_logger(path):
    f = open(path, "w")

    def log_step(record):
        f.write(json.dumps(record, sort_keys=True) + "\n")
        log.debug("step %s", record)

    return f, log_step


def cmd_pretrain(run):
    out = _out_dir(run)
    _, data = _load_data(run, out)
    config = _training_config(run, pretrain_epochs=run.get("epochs"))
    model = _new_model(run, data, _video_dim(data))
    f, log_step = _step_logger(out / "pretrain_log.jsonl")
    try:
        training.pretrain(model, data, config, log_fn=log_step)
    finally:
        f.close()
    acc = training.teacher_forced_accuracy(model, data)
    model.save(out / "pretrain.dcav", out / "pretrain_meta.json")
    log.info("pretrained %d epochs max; teacher-forced accuracy %.3f; saved %s",
             config.pretrain_epochs, acc, out / "pretrain.dcav")
    return 0


def cmd_train(run):
    out = _out_dir(run)
    ckpt = _require(out / "pretrain.dcav", "pretrained checkpoint")
    meta = _require(out / "pretrain_meta.json", "pretrained checkpoint meta")
    _, data = _load_data(run, out)
    model = ModelCore.load(ckpt, meta)
    pretrain_state = {name: p.data.copy() for name, p in model.store.items()
                      if not name.startswith(training.PRETRAIN_SKIP)}
    config = _training_config(run, joint_epochs=run.get("epochs"))
    f, log_step = _step_logger(out / "train_log.jsonl")
    try:
        training.joint_train(model, data, config, pretrain_state, log_fn=log_step)
    finally:
        f.close()
    model.save(out / "model.dcav", out / "model_meta.json")
    log.info("joint-trained %d epochs; saved %s", config.joint_epochs, out / "model.dcav")
    return 0


def cmd_infer(run):
    out = _out_dir(run)
    ckpt = _require(run.get("checkpoint") or out / "model.dcav", "checkpoint file")
    meta = _require(run.get("meta") or out / "model_meta.json", "checkpoint meta file")
    data_dir = Path(run["data"]) if run.get("data") else out
    _require(data_dir / "train.json", "annotation file")
    model = ModelCore.load(ckpt, meta)
    data = training.load_dataset(data_dir, model.audio_feature, split=run.get("split"))
    predictions = {}
    for vid in data.index.ids():
        predictions[vid] = inference.generate_dense_captions(
            model, data.vocab, data.audio_features.get(vid),
            data.video_features.get(vid), data.index.videos[vid].duration,
            seed=run["seed"], iou_threshold=run["iou-threshold"],
        )
    inference.save_predictions(predictions, out / "predictions.json")
    n = sum(len(v) for v in predictions.values())
    log.info("wrote %d captions for %d videos to %s", n, len(predictions),
             out / "predictions.json")
    return 0


def cmd_evaluate(run):
    out = _out_dir(run)
    pred_path = _require(run.get("pred") or out / "predictions.json", "prediction file")
    gt_path = run.get("gt")
    if gt_path is None:
        gt_path = out / "val.json" if (out / "val.json").exists() else out / "train.json"
    gt_path = _require(gt_path, "reference annotation file")
    report = metrics.evaluate_dense(
        metrics.load_prediction_json(pred_path),
        metrics.load_reference_json(gt_path),
    )
    report_path = Path(run.get("out") or out / "report.json")
    metrics.save_report(report, report_path)
    log.info("mIoU %.2f | CIDEr %.2f | wrote %s",
             report["miou"], report["cider"], report_path)
    return 0


def cmd_gradcheck(run):
    results = gradcheck.run_suite(seed=run["seed"], log_fn=log.info)
    worst = max(err for _, err in results)
    log.info("%d checks passed; worst rel err %.3e", len(results), worst)
    return 0


def cmd_compare_fusions(run):
    """Train each fusion strategy plus a video-only baseline on one dataset,
    run the full inference + evaluation pipeline for each, and tabulate."""
    out = _out_dir(run)
    data_dir = Path(run["data"]) if run.get("data") else out
    _require(data_dir / "train.json", "annotation file")

    variants = [("mutan", "both"), ("mixture", "both"), ("context", "both"),
                ("video-only", "video")]
    table = {}
    for label, modality in variants:
        sub = dict(run.values)
        sub["modality"] = modality
        sub["fusion"] = run["fusion"] if modality == "video" else label
        sub_run = RunConfig(run.subcommand, sub)
        data = training.load_dataset(data_dir, sub_run["audio-feature"])
        config = training.TrainingConfig(
            pretrain_epochs=run.get("pretrain-epochs") or 80,
            joint_epochs=run.get("epochs") if run.get("epochs") is not None else 40,
            batch_size=run["batch-size"], seed=run["seed"],
            target_accuracy=run.get("target-accuracy"),
        )
        model = _new_model(sub_run, data, _video_dim(data))
        log.info("compare-fusions: training %s", label)
        pretrain_state = training.pretrain(model, data, config)
        training.joint_train(model, data, config, pretrain_state)
        predictions = {}
        for vid in data.index.ids():
            predictions[vid] = inference.generate_dense_captions(
                model, data.vocab, data.audio_features.get(vid),
                data.video_features.get(vid), data.index.videos[vid].duration,
                seed=run["seed"], iou_threshold=run["iou-threshold"],
            )
        preds = {vid: [(tuple(c["timestamp"]), c["sentence"]) for c in caps]
                 for vid, caps in predictions.items()}
        refs = {vid: [(tuple(ts), s) for ts, s in zip(e.timestamps, e.sentences)]
                for vid, e in data.index.videos.items()}
        report = metrics.evaluate_dense(preds, refs)
        table[label] = {k: report[k] for k in
                        ("bleu@1", "bleu@2", "bleu@3", "bleu@4", "rouge_l",
                         "cider", "miou")}

    with open(out / "fusion_report.json", "w") as f:
        json.dump(table, f, indent=1, sort_keys=True)
    header = ["model"] + ["bleu@1", "bleu@2", "bleu@3", "bleu@4", "rouge_l",
                          "cider", "miou"]
    log.info(" | ".join(f"{h:>10s}" for h in header))
    for label in table:
        cells = [f"{label:>10s}"] + [f"{table[label][k]:10.2f}" for k in header[1:]]
        log.info(" | ".join(cells))
    log.info("wrote %s", out / "fusion_report.json")
    return 0


HANDLERS = {
    "synth-data": (cmd_synth_data, SYNTH_DEFAULTS),
    "extract-audio": (cmd_extract_audio, {}),
    "build-vocab": (cmd_build_vocab, {}),
    "pretrain": (cmd_pretrain, TRAIN_DEFAULTS),
    "train": (cmd_train, TRAIN_DEFAULTS),
    "infer": (cmd_infer, INFER_DEFAULTS),
    "evaluate": (cmd_evaluate, EVAL_DEFAULTS),
    "gradcheck": (cmd_gradcheck, {}),
    "compare-fusions": (cmd_compare_fusions, {**TRAIN_DEFAULTS, "pretrain-epochs": None}),
}


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    handler, extra = HANDLERS[args.subcommand]
    try:
        run = _resolve(args, extra)
        return handler(run)
    except (OSError, ValueError, AssertionError) as exc:
        log.error("error: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
