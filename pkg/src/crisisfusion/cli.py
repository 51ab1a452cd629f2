"""Command-line entry point: enrich, train, evaluate, explain, report.

Every command prints a single JSON summary line on success and writes its
artifacts under --out. Numeric artifacts never embed timestamps, so identical
invocations produce identical bytes; module errors exit 1 with the message on
stderr, usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import knowledge as kn
from .data import read_manifest, write_manifest
from .exceptions import CrisisFusionError
from .explain import grad_cam, render_overlay
from .metrics import MetricsReport, TaskResult, compute_mtms, format_table
from .training import (
    TrainingError,
    evaluate,
    load_checkpoint,
    parse_config_file,
    prepare_dataset,
    train,
)


@dataclass
class CommandResult:
    command: str
    artifacts: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"command": self.command, "artifacts": self.artifacts, "summary": self.summary}


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_enrich(args) -> CommandResult:
    records = read_manifest(args.manifest)
    if args.live:
        cache = kn.KnowledgeCache.load(args.cache) if Path(args.cache).is_file() else kn.KnowledgeCache()
        scorer = kn.TagmeScorer(cache, rate_limit=args.rate_limit)
        client = kn.LiveWikiClient(cache, rate_limit=args.rate_limit)
    else:
        cache = kn.KnowledgeCache.load(args.cache)
        scorer, client = kn.CachedScorer(cache), kn.CachedWikiClient(cache)
    max_span = 1 if args.single_word else kn.DEFAULT_MAX_SPAN_WORDS
    enriched, counters = kn.enrich_records(
        records, scorer, client, args.threshold, args.max_chars, max_span
    )
    out = _out_dir(args)
    path = out / "enriched_manifest.jsonl"
    with path.open("w", encoding="utf-8") as handle:
        for rec in enriched:
            handle.write(json.dumps(rec, sort_keys=True) + "\n")
    artifacts = [str(path)]
    if args.live:
        artifacts.append(str(cache.save(args.cache)))
    return CommandResult("enrich", artifacts, {"records": len(enriched), **counters})


def cmd_train(args) -> CommandResult:
    config = parse_config_file(args.config)
    if args.out is not None:
        config.out_dir = args.out
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    loaded, encoded = prepare_dataset(config)
    manifest = write_manifest(loaded, out / "manifest.jsonl")
    result = train(config, encoded)
    return CommandResult(
        "train",
        [str(result.best.path), str(manifest), str(out / "train_log.jsonl")],
        {
            "best_epoch": result.best.epoch,
            "val_metrics": result.best.val_metrics,
            "split_counts": loaded.split_counts(),
            "warnings": loaded.warnings,
        },
    )


def _write_report(report: MetricsReport, out: Path) -> list[str]:
    json_path = out / "report.json"
    text_path = out / "report.txt"
    json_path.write_text(report.to_json() + "\n", encoding="utf-8")
    table = format_table(report)
    text_path.write_text(table + "\n", encoding="utf-8")
    print(table)
    return [str(json_path), str(text_path)]


def cmd_evaluate(args) -> CommandResult:
    if args.config is not None:
        config = parse_config_file(args.config)
        _, encoded = prepare_dataset(config)
    else:
        _, _, encoded, _ = load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    dump = out / "predictions.jsonl" if args.dump_predictions else None
    report = evaluate(args.checkpoint, encoded, args.split, dump)
    artifacts = _write_report(report, out)
    if dump is not None:
        artifacts.append(str(dump))
    return CommandResult(
        "evaluate", artifacts,
        {"split": args.split, "mtms": report.mtms,
         "accuracy": report.results[0].accuracy},
    )


def cmd_explain(args) -> CommandResult:
    from PIL import Image

    model, checkpoint, encoded, _ = load_checkpoint(args.checkpoint)
    loaded, _ = prepare_dataset(checkpoint.config)  # for the raw image path
    sample = loaded.find(args.sample)
    task = checkpoint.config.task_spec()
    class_index = task.label_index(args.class_name)

    split = encoded.splits[sample.split]
    index = split.sample_ids.index(args.sample)
    inputs = (split.image_maps[index : index + 1], split.text_seqs[index : index + 1])
    cam = grad_cam(model, inputs, class_index)

    image_path = sample.image_ref
    if checkpoint.config.images_root:
        image_path = Path(checkpoint.config.images_root) / image_path
    with Image.open(image_path) as img:
        pixels = np.asarray(img.convert("RGB"))

    out = _out_dir(args)
    stem = f"{args.sample}_{args.class_name}"
    png, csv_path = render_overlay(cam, pixels, out / f"{stem}.png", out / f"{stem}.csv")
    return CommandResult(
        "explain", [str(png), str(csv_path)],
        {"sample": args.sample, "class": args.class_name,
         "max_activation": float(cam.raw.max())},
    )


def cmd_report(args) -> CommandResult:
    path = Path(args.metrics)
    if not path.is_file():
        raise TrainingError(f"metrics file not found: {path}")
    payload = json.loads(path.read_text(encoding="utf-8"))
    results = []
    for task in payload["tasks"]:
        c = int(task["class_count"])

        def _score(key: str) -> float:
            value = float(task.get(key, 0.0))
            return value / 100.0 if value > 1.0 else value  # percent or fraction

        results.append(
            TaskResult(
                task_id=str(task["task_id"]),
                class_count=c,
                accuracy=_score("accuracy"),
                macro_f1=_score("macro_f1"),
                weighted_f1=_score("weighted_f1"),
                confusion=np.zeros((c, c), dtype=np.int64),
            )
        )
    report = compute_mtms(results)
    out = _out_dir(args)
    artifacts = _write_report(report, out)
    return CommandResult("report", artifacts, {"mtms": report.mtms})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crisisfusion",
        description="Multimodal crisis event classification with knowledge infusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enrich", help="add Wikipedia knowledge to a dataset manifest")
    p.add_argument("--manifest", required=True, help="dataset manifest (JSON lines)")
    p.add_argument("--cache", required=True, help="knowledge cache JSON file")
    p.add_argument("--threshold", type=float, default=kn.DEFAULT_THRESHOLD,
                   help="relatedness threshold for entity selection")
    p.add_argument("--max-chars", type=int, default=kn.DEFAULT_MAX_CHARS,
                   help="per-entity wiki text cap")
    p.add_argument("--single-word", action="store_true",
                   help="score single words only (no multi-word spans)")
    p.add_argument("--live", action="store_true",
                   help="call Tagme/Wikipedia for cache misses (needs TAGME_TOKEN)")
    p.add_argument("--rate-limit", type=float, default=kn.DEFAULT_RATE_LIMIT,
                   help="live requests per second")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_enrich)

    p = sub.add_parser("train", help="train a model from a key=value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the config's out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--config", default=None,
                   help="rebuild the dataset from this config instead of the checkpoint's")
    p.add_argument("--dump-predictions", action="store_true")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="class-activation overlay for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True, help="sample id from the manifest")
    p.add_argument("--class", dest="class_name", required=True, help="target class name")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="metrics table with the multi-task strength column")
    p.add_argument("--metrics", required=True, help="JSON file with per-task scores")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except (CrisisFusionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result.to_dict(), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
