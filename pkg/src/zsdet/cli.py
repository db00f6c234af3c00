"""Batch command-line surface for the zero-shot detection pipeline.

Subcommands: ``synth`` (generate a synthetic benchmark), ``split`` (propose
a seen/unseen split), ``train``, ``predict`` (dump detections), ``eval``
(four-task report), ``gradcheck`` (finite-difference audit), and
``export-embeddings`` (modified class vectors for external plotting).

Every run writes a manifest beside its outputs.  Exit codes: 0 success,
1 verification failure, 2 usage or config error.  ``ZSD_THREADS`` caps the
per-image inference worker count during prediction and evaluation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .audit import gradient_audit
from .data import (
    Dataset,
    SynthConfig,
    generate_synthetic,
    ground_truth_records,
    load_dataset,
    load_split,
    propose_split,
    save_dataset,
    save_meta_map,
    save_split,
)
from .errors import ZsdetError
from .evaluation import (
    TASKS,
    evaluate,
    render_report,
    report_to_dict,
)
from .infer import conse_detect, detect, dump_detections, tag_image
from .model import Model, load_checkpoint, modified_embeddings, save_checkpoint
from .semantics import (
    LabelSpace,
    build_label_space,
    finalize_embeddings,
    load_meta_map,
    load_word_vectors,
    save_word_vectors,
)
from .train import TrainConfig, train, write_loss_history


def _threads() -> int:
    raw = os.environ.get("ZSD_THREADS", "")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ZsdetError(f"ZSD_THREADS must be an integer, got {raw!r}")


def _map_images(fn, items):
    workers = _threads()
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _write_manifest(primary_out: Path, subcommand: str, args: argparse.Namespace,
                    outputs: list[str]) -> None:
    if primary_out.is_dir():
        path = primary_out / "manifest.json"
    else:
        path = primary_out.with_name(primary_out.stem + ".manifest.json")
    config = {
        k: v for k, v in vars(args).items() if k != "func" and not k.startswith("_")
    }
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "outputs": outputs,
        "seed": config.get("seed"),
        "version": __version__,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, default=str)
        f.write("\n")


def _space_from_checkpoint(ckpt_path: str, meta_map_path: str) -> LabelSpace:
    with open(ckpt_path, encoding="utf-8") as f:
        payload = json.load(f)
    labels, n_seen = payload["labels"], payload["S"]
    return build_label_space(
        labels[:n_seen], labels[n_seen:], load_meta_map(meta_map_path)
    )


def _model_and_space(args) -> tuple[Model, LabelSpace]:
    space = _space_from_checkpoint(args.checkpoint, args.meta_map)
    table = finalize_embeddings(load_word_vectors(args.embeddings))
    table = table.reorder(space.labels)
    return load_checkpoint(args.checkpoint, table), space


def _detections_for(model, space, dataset: Dataset, args):
    if args.inference == "san" and model.config.mode == "seen_only":
        print(
            "warning: direct unseen scoring on a seen-only checkpoint; "
            "its unseen embedding columns were never trained (use --inference conse)",
            file=sys.stderr,
        )

    def run(img):
        if args.inference == "conse":
            return conse_detect(
                model, space, img.proposals, img.image_id,
                k=args.k, alpha=args.alpha, nms_iou=args.nms_iou,
            )
        return detect(
            model, space, img.proposals, img.image_id,
            alpha=args.alpha, nms_iou=args.nms_iou,
        )

    per_image = _map_images(run, dataset.images)
    return [d for dets in per_image for d in dets]


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        s=args.s, u=args.u, m=args.m, d=args.d, d_f=args.d_f,
        images=args.images, test_images=args.test_images,
        proposals_per_image=args.proposals_per_image,
        noise_sigma=args.noise_sigma, meta_spread=args.meta_spread,
        seed=args.seed,
    )
    bundle = generate_synthetic(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_word_vectors(out / "embeddings.txt", bundle.table.labels, bundle.table.vectors)
    save_meta_map(bundle.meta_map, out / "meta_map.csv")
    save_dataset(bundle.train, out / "train.jsonl")
    save_dataset(bundle.test, out / "test.jsonl")
    with open(out / "oracle.json", "w", encoding="utf-8") as f:
        json.dump(bundle.oracle, f)
        f.write("\n")
    outputs = ["embeddings.txt", "meta_map.csv", "train.jsonl", "test.jsonl", "oracle.json"]
    _write_manifest(out, "synth", args, outputs)
    print(f"wrote {', '.join(outputs)} to {out}")
    return 0


def cmd_split(args) -> int:
    dataset = load_dataset(args.data)
    meta_map = load_meta_map(args.meta_map)
    per_meta = args.per_meta if args.per_meta == "auto" else int(args.per_meta)
    exclude = [t for t in args.exclude.split(",") if t] if args.exclude else []
    seen, unseen = propose_split(
        dataset.class_stats(), meta_map, per_meta=per_meta,
        rng=np.random.default_rng(args.seed), exclude=exclude,
    )
    out = Path(args.out)
    save_split(seen, unseen, out)
    _write_manifest(out, "split", args, [out.name])
    print(f"{len(seen)} seen / {len(unseen)} unseen -> {out}")
    return 0


def cmd_train(args) -> int:
    table = finalize_embeddings(load_word_vectors(args.embeddings))
    seen, unseen = load_split(args.split)
    space = build_label_space(seen, unseen, load_meta_map(args.meta_map))
    table = table.reorder(space.labels)
    dataset = load_dataset(args.data)
    config = TrainConfig(
        lam=args.lam, mode=args.mode, lr=args.lr, beta1=args.beta1,
        beta2=args.beta2, eps=args.eps, n_pos=args.n_pos, n_neg=args.n_neg,
        epochs=args.epochs, seed=args.seed, min_similar=args.min_similar,
        fg_iou=args.fg_iou,
    )
    model, history = train(dataset, table, space, config)
    out = Path(args.out)
    save_checkpoint(model, out)
    loss_csv = out.with_name(out.stem + ".loss.csv")
    write_loss_history(history, loss_csv)
    _write_manifest(out, "train", args, [out.name, loss_csv.name])
    if history:
        print(f"trained {len(history)} steps (final total loss {history[-1].total:.6f}) -> {out}")
    else:
        print(f"wrote untrained checkpoint (0 epochs) -> {out}")
    return 0


def cmd_predict(args) -> int:
    model, space = _model_and_space(args)
    dataset = load_dataset(args.data)
    detections = _detections_for(model, space, dataset, args)
    out = Path(args.out)
    dump_detections(detections, out, space)
    _write_manifest(out, "predict", args, [out.name])
    print(f"{len(detections)} detections -> {out}")
    return 0


def cmd_eval(args) -> int:
    model, space = _model_and_space(args)
    dataset = load_dataset(args.data)
    gts = ground_truth_records(dataset, space)
    tasks = list(TASKS) if args.task == "all" else [args.task]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    detections = None
    tags = None
    text_blocks = []
    for task in tasks:
        if task in ("T1", "T2"):
            if detections is None:
                detections = _detections_for(model, space, dataset, args)
            report = evaluate(detections, gts, space, task, iou_thresh=args.iou_eval)
        else:
            if tags is None:
                tags = dict(
                    zip(
                        [img.image_id for img in dataset.images],
                        _map_images(
                            lambda img: tag_image(model, space, img.proposals), dataset.images
                        ),
                    )
                )
            report = evaluate(tags, gts, space, task, iou_thresh=args.iou_eval)
        report.meta.update(
            {"inference": args.inference, "alpha": args.alpha, "k": args.k,
             "nms_iou": args.nms_iou, "checkpoint": str(args.checkpoint)}
        )
        report_path = out / f"report_{task}.json"
        with open(report_path, "w", encoding="utf-8") as f:
            json.dump(report_to_dict(report), f, indent=2)
            f.write("\n")
        outputs.append(report_path.name)
        text_blocks.append(render_report(report))
    text = "\n\n".join(text_blocks) + "\n"
    with open(out / "report.txt", "w", encoding="utf-8") as f:
        f.write(text)
    outputs.append("report.txt")
    _write_manifest(out, "eval", args, outputs)
    print(text, end="")
    return 0


def cmd_gradcheck(args) -> int:
    result = gradient_audit(
        trials=args.trials, seed=args.seed, h=args.h, inject_fault=args.inject_fault
    )
    status = "PASS" if result.passed else "FAIL"
    print(
        f"{status}: max relative error {result.max_rel_err:.3e} "
        f"over {result.trials} trials (tolerance 1e-4)"
    )
    if args.out:
        out = Path(args.out)
        with open(out, "w", encoding="utf-8") as f:
            json.dump(
                {"passed": result.passed, "max_rel_err": result.max_rel_err,
                 "trials": result.trials},
                f,
            )
            f.write("\n")
        _write_manifest(out, "gradcheck", args, [out.name])
    return 0 if result.passed else 1


def cmd_export_embeddings(args) -> int:
    table = finalize_embeddings(load_word_vectors(args.embeddings))
    with open(args.checkpoint, encoding="utf-8") as f:
        labels = tuple(json.load(f)["labels"])
    model = load_checkpoint(args.checkpoint, table.reorder(labels))
    out = Path(args.out)
    save_word_vectors(out, model.labels, modified_embeddings(model))
    _write_manifest(out, "export-embeddings", args, [out.name])
    print(f"{len(model.labels)} modified embeddings -> {out}")
    return 0


def _add_common_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True, help="trained checkpoint JSON")
    p.add_argument("--embeddings", required=True, help="word-vector text file")
    p.add_argument("--meta-map", required=True, help="class,meta CSV")
    p.add_argument("--data", required=True, help="dataset JSON-lines file")
    p.add_argument("--inference", choices=("san", "conse"), default="san",
                   help="direct unseen scoring (san) or ConSE projection")
    p.add_argument("--alpha", type=float, default=0.2,
                   help="minimum normalized score for emitting a detection")
    p.add_argument("--k", type=int, default=10, help="ConSE top-K")
    p.add_argument("--nms-iou", type=float, default=0.5,
                   help="per-class NMS threshold before evaluation (0 disables)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zsdet",
        description="zero-shot detection head: synthesize, train, predict, evaluate",
    )
    parser.add_argument("--version", action="version", version=f"zsdet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--s", type=int, default=20, help="seen class count")
    p.add_argument("--u", type=int, default=5, help="unseen class count")
    p.add_argument("--m", type=int, default=5, help="meta-class count")
    p.add_argument("--d", type=int, default=16, help="embedding dimensionality")
    p.add_argument("--d-f", type=int, default=16, help="feature dimensionality")
    p.add_argument("--images", type=int, default=200, help="train image count")
    p.add_argument("--test-images", type=int, default=50)
    p.add_argument("--proposals-per-image", type=int, default=16)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--meta-spread", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="propose a seen/unseen split")
    p.add_argument("--data", required=True)
    p.add_argument("--meta-map", required=True)
    p.add_argument("--per-meta", default="auto", choices=("auto", "1", "2"),
                   help="unseen picks per meta-class (auto: 2 when >=9 members)")
    p.add_argument("--exclude", default="", help="comma-separated metas to skip")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a checkpoint")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--meta-map", required=True)
    p.add_argument("--split", required=True,
                   help="split file (or synth oracle.json) naming seen/unseen")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--lambda", dest="lam", type=float, default=0.8,
                   help="margin/clustering mixing weight")
    p.add_argument("--mode", choices=("full", "seen_only"), default="full")
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--n-pos", type=int, default=16)
    p.add_argument("--n-neg", type=int, default=16)
    p.add_argument("--min-similar", type=int, default=200,
                   help="per-meta rebalance target (0 disables)")
    p.add_argument("--fg-iou", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="dump detections as JSON-lines")
    _add_common_model_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="run the four-task evaluation")
    _add_common_model_args(p)
    p.add_argument("--task", choices=TASKS + ("all",), default="all")
    p.add_argument("--iou-eval", type=float, default=0.5,
                   help="IoU threshold for AP matching")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--out", default=None, help="optional JSON report path")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-embeddings", help="dump modified class vectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ZsdetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
