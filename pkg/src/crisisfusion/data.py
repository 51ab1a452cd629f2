"""Loading of CrisisMMD-style annotations and the two evaluation protocols.

Annotations are tab-separated rows carrying an image path, the tweet text and
one label per modality. Setting A keeps only pairs whose image and text labels
agree; Setting B additionally trains on disagreeing pairs while validating and
testing on Setting A's rows. A configurable column map adapts other layouts to
the canonical columns.
"""

from __future__ import annotations

import csv
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import CrisisFusionError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

# Canonical annotation columns; DatasetConfig.column_map renames them.
DEFAULT_COLUMNS = {
    "sample_id": "sample_id",
    "event_name": "event_name",
    "image_path": "image_path",
    "text": "text",
    "image_label": "image_label",
    "text_label": "text_label",
    "split": "split",
}

_URL_PREFIXES = ("http://", "https://", "www.")


class DatasetError(CrisisFusionError, ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    """A classification task: an id plus its ordered class names."""

    task_id: str
    class_names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise DatasetError(f"duplicate class names in {self.task_id}: {self.class_names}")
        if not self.class_names:
            raise DatasetError(f"{self.task_id} has no classes")

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def label_index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise DatasetError(
                f"unknown label {name!r} for {self.task_id}; expected one of {self.class_names}"
            ) from None


# The three standard tasks: binary relevance, five impact categories, three
# damage severities.
TASKS = {
    "task1": TaskSpec("task1", ("informative", "non-informative")),
    "task2": TaskSpec(
        "task2",
        (
            "infrastructure_damage",
            "vehicle_damage",
            "rescue_efforts",
            "affected_individuals",
            "other",
        ),
    ),
    "task3": TaskSpec("task3", ("severe_damage", "mild_damage", "little_or_no_damage")),
}


@dataclass(frozen=True)
class Sample:
    """One image-text pair with per-modality labels and the resolved label."""

    sample_id: str
    image_ref: str
    raw_text: str
    clean_text: str
    image_label: int | None
    text_label: int | None
    label: int
    event_name: str
    split: str

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "image_ref": self.image_ref,
            "raw_text": self.raw_text,
            "clean_text": self.clean_text,
            "image_label": self.image_label,
            "text_label": self.text_label,
            "label": self.label,
            "event_name": self.event_name,
            "split": self.split,
        }


@dataclass(frozen=True)
class DatasetConfig:
    """Where to read annotations and which task/setting protocol to apply.

    ``label_policy_for_b`` picks the training label of disagreeing pairs in
    Setting B ("text_label" or "image_label"). When ``images_root`` is given,
    samples whose image file is missing are dropped with a counted warning;
    with ``images_root=None`` filenames are taken on trust. ``seed`` drives
    the stratified fallback split used when the annotation file has no split
    column.
    """

    setting: str
    task: TaskSpec
    annotations_path: str
    images_root: str | None = None
    label_policy_for_b: str = "text_label"
    column_map: dict = field(default_factory=dict)
    seed: int = 13
    split_fractions: tuple[float, float, float] = (0.75, 0.125, 0.125)

    def __post_init__(self):
        if self.setting not in ("A", "B"):
            raise DatasetError(f"unknown setting {self.setting!r}; expected 'A' or 'B'")
        if self.setting == "B" and self.task.task_id == "task3":
            raise DatasetError("Setting B is only defined for task1 and task2")
        if self.label_policy_for_b not in ("text_label", "image_label"):
            raise DatasetError(f"unknown label policy {self.label_policy_for_b!r}")

    def columns(self) -> dict:
        cols = dict(DEFAULT_COLUMNS)
        cols.update(self.column_map)
        return cols


@dataclass
class LoadedDataset:
    """Immutable after load; samples grouped per split."""

    config: DatasetConfig
    splits: dict[str, list[Sample]]
    warnings: dict[str, int]

    @property
    def task(self) -> TaskSpec:
        return self.config.task

    def split_counts(self) -> dict[str, int]:
        counts = {name: len(self.splits[name]) for name in SPLITS}
        counts["total"] = sum(counts.values())
        return counts

    def find(self, sample_id: str) -> Sample:
        for name in SPLITS:
            for sample in self.splits[name]:
                if sample.sample_id == sample_id:
                    return sample
        raise DatasetError(f"no sample with id {sample_id!r}")


def clean_text(raw_text: str) -> str:
    """Strip mention/hashtag symbols, drop URL tokens, normalize whitespace.

    The '@'/'#' symbol is removed but the word kept (hashtag words often carry
    the event name); tokens starting with http://, https:// or www. are dropped
    entirely. Idempotent by construction.
    """
    kept = []
    for token in raw_text.split():
        if token.lower().startswith(_URL_PREFIXES):
            continue
        token = token.replace("@", "").replace("#", "")
        if not token:
            continue
        if token.lower().startswith(_URL_PREFIXES):
            continue
        kept.append(token)
    return " ".join(kept)


def _parse_label(value: str | None, task: TaskSpec, row_id: str) -> int | None:
    if value is None:
        return None
    value = value.strip()
    if not value:
        return None
    try:
        return task.label_index(value)
    except DatasetError as exc:
        raise DatasetError(f"row {row_id}: {exc}") from None


def _read_rows(config: DatasetConfig) -> list[dict]:
    path = Path(config.annotations_path)
    if not path.is_file():
        raise DatasetError(f"annotation file not found: {path}")
    cols = config.columns()
    rows = []
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle, delimiter="\t")
        if reader.fieldnames is None:
            raise DatasetError(f"annotation file is empty: {path}")
        required = [cols[k] for k in ("sample_id", "image_path", "text", "image_label", "text_label")]
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise DatasetError(f"annotation file {path} lacks columns {missing}")
        has_split = cols["split"] in reader.fieldnames
        has_event = cols["event_name"] in reader.fieldnames
        for line_no, raw in enumerate(reader, start=2):
            rows.append(
                {
                    "sample_id": (raw[cols["sample_id"]] or f"row{line_no}").strip(),
                    "event_name": (raw[cols["event_name"]] or "").strip() if has_event else "",
                    "image_path": (raw[cols["image_path"]] or "").strip(),
                    "text": raw[cols["text"]] or "",
                    "image_label": raw[cols["image_label"]],
                    "text_label": raw[cols["text_label"]],
                    "split": (raw[cols["split"]] or "").strip() if has_split else "",
                }
            )
    return rows


def _assign_splits(rows: list[dict], config: DatasetConfig) -> None:
    """Fill in row['split'], stratified by text label when the file has none.

    Assignment happens before any setting filter so that both settings see the
    same per-row split and Setting B inherits Setting A's val/test exactly.
    """
    explicit = [r["split"] for r in rows if r["split"]]
    if explicit:
        for row in rows:
            if row["split"] not in SPLITS:
                raise DatasetError(
                    f"row {row['sample_id']}: unknown split {row['split']!r}; expected one of {SPLITS}"
                )
        return
    # Seeded stratified shuffle at fixed fractions.
    rng = random.Random(config.seed)
    by_label: dict[str, list[int]] = {}
    for idx, row in enumerate(rows):
        by_label.setdefault(row["text_label"] or row["image_label"] or "", []).append(idx)
    train_frac, val_frac, _ = config.split_fractions
    for indices in by_label.values():
        rng.shuffle(indices)
        n = len(indices)
        n_train = round(n * train_frac)
        n_val = round(n * val_frac)
        for pos, idx in enumerate(indices):
            if pos < n_train:
                rows[idx]["split"] = "train"
            elif pos < n_train + n_val:
                rows[idx]["split"] = "val"
            else:
                rows[idx]["split"] = "test"


def load_dataset(config: DatasetConfig) -> LoadedDataset:
    """Materialize the task/setting protocol from an annotation file.

    Setting A keeps only rows whose image and text labels agree, in every
    split. Setting B keeps all labeled rows in train (resolving disagreements
    via ``label_policy_for_b``) while val/test mirror Setting A's.
    """
    rows = _read_rows(config)
    _assign_splits(rows, config)
    task = config.task
    warnings = {"missing_image": 0, "unlabeled": 0}
    images_root = Path(config.images_root) if config.images_root else None

    splits: dict[str, list[Sample]] = {name: [] for name in SPLITS}
    for row in rows:
        image_label = _parse_label(row["image_label"], task, row["sample_id"])
        text_label = _parse_label(row["text_label"], task, row["sample_id"])
        if image_label is None or text_label is None:
            warnings["unlabeled"] += 1
            continue
        if images_root is not None and not (images_root / row["image_path"]).is_file():
            warnings["missing_image"] += 1
            logger.warning("missing image file for sample %s: %s", row["sample_id"], row["image_path"])
            continue
        agrees = image_label == text_label
        in_train = row["split"] == "train"
        if config.setting == "A" or not in_train:
            # val/test follow the Setting-A protocol in both settings.
            if not agrees:
                continue
            resolved = image_label
        else:
            resolved = text_label if config.label_policy_for_b == "text_label" else image_label
        splits[row["split"]].append(
            Sample(
                sample_id=row["sample_id"],
                image_ref=row["image_path"],
                raw_text=row["text"],
                clean_text=clean_text(row["text"]),
                image_label=image_label,
                text_label=text_label,
                label=resolved,
                event_name=row["event_name"],
                split=row["split"],
            )
        )

    dataset = LoadedDataset(config=config, splits=splits, warnings=warnings)
    logger.info(
        "loaded %s/%s setting %s: %s (warnings: %s)",
        config.annotations_path,
        task.task_id,
        config.setting,
        dataset.split_counts(),
        warnings,
    )
    return dataset


def write_manifest(dataset: LoadedDataset, path: str | Path) -> Path:
    """One JSON line per sample, in train/val/test order; byte-stable for fixed inputs."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for split in SPLITS:
            for sample in dataset.splits[split]:
                handle.write(json.dumps(sample.to_record(), sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    records = []
    with path.open(encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def samples_from_manifest(records: list[dict]) -> dict[str, list[Sample]]:
    splits: dict[str, list[Sample]] = {name: [] for name in SPLITS}
    for rec in records:
        sample = Sample(
            sample_id=rec["sample_id"],
            image_ref=rec["image_ref"],
            raw_text=rec["raw_text"],
            clean_text=rec["clean_text"],
            image_label=rec["image_label"],
            text_label=rec["text_label"],
            label=rec["label"],
            event_name=rec.get("event_name", ""),
            split=rec["split"],
        )
        splits[sample.split].append(sample)
    return splits
