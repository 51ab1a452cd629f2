"""Small synthetic multimodal dataset for smoke tests and demos.

Two classes that are linearly separable in the fused feature space: class 0
images light up the top-left quadrant and class 1 the bottom-right, with
per-pixel noise; texts draw from two disjoint word pools. Written in the
canonical annotation layout (TSV plus an image directory) so the full
pipeline runs on it unchanged.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

_CLASS_WORDS = (
    ("flood", "water", "rescue", "boat", "river", "rain"),
    ("wildfire", "smoke", "burn", "ash", "flame", "forest"),
)
_CLASS_NAMES = ("informative", "non-informative")


def toy_image(label: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Noisy RGB image with a bright quadrant that encodes the class."""
    pixels = rng.uniform(0.0, 0.25, size=(size, size, 3)).astype(np.float32)
    half = size // 2
    if label == 0:
        pixels[:half, :half] += 0.7
    else:
        pixels[half:, half:] += 0.7
    return np.clip(pixels, 0.0, 1.0)


def toy_text(label: int, rng: np.random.Generator, n_words: int = 6) -> str:
    pool = _CLASS_WORDS[label]
    return " ".join(rng.choice(pool) for _ in range(n_words))


def write_toy_dataset(
    root: str | Path,
    n: int = 200,
    seed: int = 7,
    train_fraction: float = 0.75,
) -> tuple[Path, Path]:
    """Write annotations.tsv plus an images/ directory; returns both paths.

    Splits are balanced and assigned in the file (75/12.5/12.5 by default);
    image and text labels always agree, so every sample survives Setting A.
    """
    from PIL import Image

    root = Path(root)
    images_dir = root / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    annotations = root / "annotations.tsv"

    n_train = round(n * train_fraction)
    n_val = round(n * (1.0 - train_fraction) / 2)
    with annotations.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, delimiter="\t")
        writer.writerow(
            ["sample_id", "event_name", "image_path", "text", "image_label", "text_label", "split"]
        )
        for i in range(n):
            label = i % 2
            split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
            image_name = f"img_{i:04d}.png"
            pixels = (toy_image(label, rng) * 255).astype(np.uint8)
            Image.fromarray(pixels).save(images_dir / image_name)
            writer.writerow(
                [
                    f"toy_{i:04d}",
                    "toy_event",
                    image_name,
                    toy_text(label, rng),
                    _CLASS_NAMES[label],
                    _CLASS_NAMES[label],
                    split,
                ]
            )
    return annotations, images_dir
