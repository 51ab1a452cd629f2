"""Training and evaluation orchestration.

One master seed derives the init and shuffle streams, so identical configs
reproduce identical loss curves bit for bit. Checkpoints are single archives
of named tensors plus the config hash and a metric snapshot; evaluation
refuses to run against data whose config hash differs from the checkpoint's.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
import torch.nn.functional as F

from . import knowledge as kn
from .data import TASKS, DatasetConfig, LoadedDataset, TaskSpec, load_dataset
from .encoders import build_image_encoder, build_text_encoder, encode_image, encode_text, load_image
from .fusion import MultimodalClassifier, seed_parameters, validate_labels
from .metrics import MetricsReport, compute_mtms, compute_task_metrics

from .exceptions import CrisisFusionError

logger = logging.getLogger(__name__)


class TrainingError(CrisisFusionError, RuntimeError):
    pass


class CheckpointError(TrainingError):
    pass


@dataclass
class TrainConfig:
    """Run settings; defaults follow the published training recipe."""

    annotations: str = ""
    images_root: str | None = None
    task: str = "task1"
    setting: str = "A"
    label_policy_for_b: str = "text_label"
    seed: int = 13

    base_lr: float = 2e-3
    batch_size: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-4
    epochs: int = 50
    # Learning-rate decay: divide by decay_factor either when val accuracy has
    # not improved for decay_patience epochs ("plateau"), at a fixed epoch
    # ("step@N"), or never ("none").
    decay: str = "plateau"
    decay_factor: float = 10.0
    decay_patience: int = 10

    image_encoder: str = "toy"
    text_encoder: str = "toy"
    max_text_tokens: int = 256

    knowledge: bool = True
    knowledge_cache: str | None = None
    threshold: float = kn.DEFAULT_THRESHOLD
    max_chars_per_entity: int = kn.DEFAULT_MAX_CHARS
    single_word_entities: bool = False

    guided_attention: bool = True
    out_dir: str = "runs"

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr < 0:  # zero is legal: a no-op schedule
            raise TrainingError(f"base_lr must be >= 0, got {self.base_lr}")
        if self.decay_factor <= 0 or self.decay_patience < 1:
            raise TrainingError("decay_factor must be positive and decay_patience >= 1")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1) or self.adam_eps <= 0:
            raise TrainingError("Adam betas must lie in [0, 1) and eps must be positive")

    def task_spec(self) -> TaskSpec:
        if self.task not in TASKS:
            raise TrainingError(f"unknown task {self.task!r}; known: {sorted(TASKS)}")
        return TASKS[self.task]


# Fields that determine what the model sees; out_dir and schedule knobs are
# excluded so re-evaluating a checkpoint elsewhere stays legal.
DATA_HASH_FIELDS = (
    "annotations", "images_root", "task", "setting", "label_policy_for_b", "seed",
    "image_encoder", "text_encoder", "max_text_tokens",
    "knowledge", "knowledge_cache", "threshold", "max_chars_per_entity",
    "single_word_entities",
)


def data_config_hash(config: TrainConfig) -> str:
    payload = {name: getattr(config, name) for name in DATA_HASH_FIELDS}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def config_hash(config: TrainConfig) -> str:
    payload = {f.name: getattr(config, f.name) for f in fields(config) if f.name != "out_dir"}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


_BOOL_VALUES = {
    "true": True, "yes": True, "on": True, "1": True,
    "false": False, "no": False, "off": False, "0": False,
}


def parse_config_file(path: str | Path) -> TrainConfig:
    """Flat key=value file; '#' starts a comment, blank lines are ignored."""
    path = Path(path)
    if not path.is_file():
        raise TrainingError(f"config file not found: {path}")
    known = {f.name: f for f in fields(TrainConfig)}
    values: dict = {}
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise TrainingError(f"{path}:{line_no}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise TrainingError(f"{path}:{line_no}: unknown config key {key!r}")
        values[key] = _coerce(known[key], value, f"{path}:{line_no}")
    return TrainConfig(**values)


def _coerce(spec, value: str, where: str):
    target = spec.type
    if value == "" or value.lower() == "none":
        return None
    if target in ("bool", bool):
        try:
            return _BOOL_VALUES[value.lower()]
        except KeyError:
            raise TrainingError(f"{where}: expected a boolean for {spec.name}, got {value!r}") from None
    if target in ("int", int):
        return int(value)
    if target in ("float", float):
        return float(value)
    return value


@dataclass
class EncodedSplit:
    sample_ids: list[str]
    image_maps: torch.Tensor  # (n, c, h, w)
    text_seqs: torch.Tensor  # (n, l, d)
    labels: torch.Tensor  # (n,)

    def __len__(self) -> int:
        return len(self.sample_ids)


@dataclass
class EncodedDataset:
    task: TaskSpec
    splits: dict[str, EncodedSplit]
    data_hash: str
    image_shape: tuple[int, ...]
    text_shape: tuple[int, ...]


def dataset_config(config: TrainConfig) -> DatasetConfig:
    return DatasetConfig(
        setting=config.setting,
        task=config.task_spec(),
        annotations_path=config.annotations,
        images_root=config.images_root,
        label_policy_for_b=config.label_policy_for_b,
        seed=config.seed,
    )


def _knowledge_pipeline(config: TrainConfig):
    if not config.knowledge:
        return None
    if not config.knowledge_cache:
        raise TrainingError(
            "knowledge is enabled but knowledge_cache is unset; "
            "provide a cache file or set knowledge=false"
        )
    cache = kn.KnowledgeCache.load(config.knowledge_cache)
    return kn.CachedScorer(cache), kn.CachedWikiClient(cache)


def encode_dataset(loaded: LoadedDataset, config: TrainConfig) -> EncodedDataset:
    """Run frozen encoders (plus optional knowledge infusion) over every split."""
    image_enc = build_image_encoder(config.image_encoder)
    text_enc = build_text_encoder(config.text_encoder, max_tokens=config.max_text_tokens)
    pipeline = _knowledge_pipeline(config)
    max_span = 1 if config.single_word_entities else kn.DEFAULT_MAX_SPAN_WORDS
    images_root = Path(loaded.config.images_root) if loaded.config.images_root else None

    splits: dict[str, EncodedSplit] = {}
    for split, samples in loaded.splits.items():
        maps, seqs, labels, ids = [], [], [], []
        for sample in samples:
            if images_root is not None:
                pixels = load_image(images_root / sample.image_ref, image_enc.input_size)
            else:
                pixels = load_image(sample.image_ref, image_enc.input_size)
            maps.append(encode_image(pixels, image_enc).tensor)
            text = sample.clean_text
            if pipeline is not None:
                scorer, client = pipeline
                text = kn.enrich(
                    text, scorer, client, config.threshold,
                    config.max_chars_per_entity, max_span,
                ).fused
            seqs.append(encode_text(text, text_enc).sequence)
            labels.append(sample.label)
            ids.append(sample.sample_id)
        splits[split] = EncodedSplit(
            sample_ids=ids,
            image_maps=torch.stack(maps) if maps else torch.zeros((0, *image_enc.spec.output_shape)),
            text_seqs=torch.stack(seqs) if seqs else torch.zeros((0, *text_enc.spec.output_shape)),
            labels=torch.tensor(labels, dtype=torch.long),
        )
    return EncodedDataset(
        task=loaded.task,
        splits=splits,
        data_hash=data_config_hash(config),
        image_shape=image_enc.spec.output_shape,
        text_shape=text_enc.spec.output_shape,
    )


def prepare_dataset(config: TrainConfig) -> tuple[LoadedDataset, EncodedDataset]:
    loaded = load_dataset(dataset_config(config))
    return loaded, encode_dataset(loaded, config)


def derive_seed(master: int, stream: str) -> int:
    digest = hashlib.sha256(f"{master}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def build_model(config: TrainConfig, encoded: EncodedDataset) -> MultimodalClassifier:
    model = MultimodalClassifier(
        image_channels=encoded.image_shape[0],
        text_dim=encoded.text_shape[1],
        num_classes=encoded.task.class_count,
        guided=config.guided_attention,
    )
    seed_parameters(model, derive_seed(config.seed, "init"))
    return model


@dataclass
class Checkpoint:
    path: Path
    epoch: int
    val_metrics: dict
    config: TrainConfig
    cfg_hash: str
    data_hash: str


def save_checkpoint(
    path: str | Path,
    model: MultimodalClassifier,
    config: TrainConfig,
    epoch: int,
    val_metrics: dict,
    optimizer: torch.optim.Optimizer | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "model_state": model.state_dict(),
        "config": asdict(config),
        "config_hash": config_hash(config),
        "data_hash": data_config_hash(config),
        "epoch": epoch,
        "val_metrics": val_metrics,
    }
    if optimizer is not None:
        payload["optimizer_state"] = optimizer.state_dict()
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, encoded: EncodedDataset | None = None):
    """Rebuild the model from a checkpoint, verifying the tensor shape table."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = TrainConfig(**payload["config"])
    if encoded is None:
        _, encoded = prepare_dataset(config)
    model = build_model(config, encoded)
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    saved = {k: tuple(v.shape) for k, v in payload["model_state"].items()}
    if expected != saved:
        raise CheckpointError(
            f"checkpoint {path} shape table does not match the configured model"
        )
    model.load_state_dict(payload["model_state"])
    checkpoint = Checkpoint(
        path=path,
        epoch=payload["epoch"],
        val_metrics=payload["val_metrics"],
        config=config,
        cfg_hash=payload["config_hash"],
        data_hash=payload["data_hash"],
    )
    return model, checkpoint, encoded, payload


def _predict(model: MultimodalClassifier, split: EncodedSplit, batch_size: int) -> torch.Tensor:
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(split), batch_size):
            output = model(
                split.image_maps[start : start + batch_size],
                split.text_seqs[start : start + batch_size],
            )
            preds.append(output.logits.argmax(dim=-1))
    return torch.cat(preds) if preds else torch.zeros(0, dtype=torch.long)


def evaluate_split(model, encoded: EncodedDataset, split: str, batch_size: int = 64,
                   dump_path: str | Path | None = None) -> MetricsReport:
    if split not in encoded.splits:
        raise TrainingError(f"unknown split {split!r}")
    data = encoded.splits[split]
    if len(data) == 0:
        raise TrainingError(f"split {split!r} is empty")
    preds = _predict(model, data, batch_size)
    result = compute_task_metrics(preds.tolist(), data.labels.tolist(), encoded.task)
    if dump_path is not None:
        with Path(dump_path).open("w", encoding="utf-8") as handle:
            for sid, pred, label in zip(data.sample_ids, preds.tolist(), data.labels.tolist()):
                handle.write(json.dumps(
                    {"sample_id": sid, "prediction": pred, "label": label}, sort_keys=True
                ) + "\n")
    return compute_mtms([result])


@dataclass
class TrainResult:
    best: Checkpoint
    model: MultimodalClassifier
    history: list[dict] = field(default_factory=list)
    encoded: EncodedDataset | None = None


def train(config: TrainConfig, encoded: EncodedDataset,
          model: MultimodalClassifier | None = None,
          resume: str | Path | None = None) -> TrainResult:
    """Run the full schedule and return the best-validation checkpoint.

    Per-epoch train loss and validation metrics go to ``out_dir`` as JSON
    lines; a non-finite loss aborts after writing a diagnostic snapshot.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_split = encoded.splits["train"]
    if len(train_split) == 0:
        raise TrainingError("train split is empty")
    has_val = "val" in encoded.splits and len(encoded.splits["val"]) > 0

    start_epoch = 1
    optimizer_state = None
    if resume is not None:
        model, ckpt, _, payload = load_checkpoint(resume, encoded)
        optimizer_state = payload.get("optimizer_state")
        start_epoch = ckpt.epoch + 1
        logger.info("resuming from %s at epoch %d", resume, start_epoch)
    elif model is None:
        model = build_model(config, encoded)

    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.base_lr,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
    )
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    shuffle = torch.Generator().manual_seed(derive_seed(config.seed, "shuffle"))
    step_epoch = None
    if config.decay.startswith("step@"):
        step_epoch = int(config.decay.split("@", 1)[1])
    elif config.decay not in ("plateau", "none"):
        raise TrainingError(f"unknown decay policy {config.decay!r}")

    best_state = None
    best_metrics: dict = {"accuracy": -1.0}
    best_epoch = 0
    epochs_since_improvement = 0
    history: list[dict] = []
    log_path = out_dir / "train_log.jsonl"
    n = len(train_split)

    with log_path.open("a", encoding="utf-8") as log:
        for epoch in range(start_epoch, config.epochs + 1):
            model.train()
            perm = torch.randperm(n, generator=shuffle)
            total_loss = 0.0
            for start in range(0, n, config.batch_size):
                idx = perm[start : start + config.batch_size]
                labels = train_split.labels[idx]
                validate_labels(labels, model.num_classes)
                optimizer.zero_grad()
                output = model(train_split.image_maps[idx], train_split.text_seqs[idx])
                loss = F.cross_entropy(output.logits, labels)
                if not torch.isfinite(loss):
                    snapshot = save_checkpoint(
                        out_dir / "diagnostic.ckpt", model, config, epoch,
                        {"accuracy": float("nan")}, optimizer,
                    )
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}; diagnostic snapshot at {snapshot}"
                    )
                loss.backward()
                optimizer.step()
                total_loss += loss.item() * len(idx)
            train_loss = total_loss / n

            entry = {
                "epoch": epoch,
                "train_loss": train_loss,
                "lr": optimizer.param_groups[0]["lr"],
            }
            if has_val:
                report = evaluate_split(model, encoded, "val", config.batch_size)
                val_acc = report.results[0].accuracy
                entry["val_accuracy"] = val_acc
                entry["val_macro_f1"] = report.results[0].macro_f1
                if val_acc > best_metrics["accuracy"]:
                    best_metrics = {
                        "accuracy": val_acc,
                        "macro_f1": report.results[0].macro_f1,
                        "weighted_f1": report.results[0].weighted_f1,
                    }
                    best_state = copy.deepcopy(model.state_dict())
                    best_epoch = epoch
                    epochs_since_improvement = 0
                else:
                    epochs_since_improvement += 1
                if config.decay == "plateau" and epochs_since_improvement >= config.decay_patience:
                    for group in optimizer.param_groups:
                        group["lr"] /= config.decay_factor
                    epochs_since_improvement = 0
                    logger.info("epoch %d: decayed lr to %g", epoch, optimizer.param_groups[0]["lr"])
            if step_epoch is not None and epoch == step_epoch:
                for group in optimizer.param_groups:
                    group["lr"] /= config.decay_factor
            history.append(entry)
            log.write(json.dumps({**entry, "ts": time.time()}, sort_keys=True) + "\n")
            save_checkpoint(out_dir / "last.ckpt", model, config, epoch,
                            entry if has_val else {}, optimizer)

    if best_state is None:  # no validation data: keep the final state
        best_state = copy.deepcopy(model.state_dict())
        best_epoch = config.epochs
        best_metrics = {}
    model.load_state_dict(best_state)
    best_path = save_checkpoint(out_dir / "best.ckpt", model, config, best_epoch, best_metrics)
    best = Checkpoint(
        path=best_path,
        epoch=best_epoch,
        val_metrics=best_metrics,
        config=config,
        cfg_hash=config_hash(config),
        data_hash=data_config_hash(config),
    )
    return TrainResult(best=best, model=model, history=history, encoded=encoded)


def evaluate(checkpoint_path: str | Path, encoded: EncodedDataset, split: str,
             dump_path: str | Path | None = None) -> MetricsReport:
    """Score a saved checkpoint on one split of a prepared dataset."""
    model, checkpoint, encoded, _ = load_checkpoint(checkpoint_path, encoded)
    if checkpoint.data_hash != encoded.data_hash:
        raise TrainingError(
            f"refusing to evaluate: checkpoint data hash {checkpoint.data_hash} does not "
            f"match dataset hash {encoded.data_hash}"
        )
    return evaluate_split(model, encoded, split, checkpoint.config.batch_size, dump_path)
