"""Image and text encoder contracts with deterministic toy implementations.

The image side turns a decoded pixel array into a (channels, height, width)
feature map; the text side turns a fused string into a fixed-length sequence
of token embeddings whose row 0 is the summary vector. Toy encoders make the
whole pipeline runnable and bit-reproducible without pretrained weights;
heavyweight backbones plug in through the same registry.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .exceptions import CrisisFusionError

logger = logging.getLogger(__name__)


class EncoderError(CrisisFusionError, RuntimeError):
    pass


class EncoderContractError(EncoderError):
    """A plugin produced tensors that violate its declared spec."""


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    output_shape: tuple[int, ...]
    trainable: bool = False
    max_tokens: int | None = None


@dataclass(frozen=True)
class ImageFeatureMap:
    """Visual features of shape (channels, height, width)."""

    tensor: torch.Tensor


@dataclass(frozen=True)
class TextFeatureSeq:
    """Token embeddings of shape (length, dim); row 0 is the summary vector."""

    sequence: torch.Tensor
    truncated: bool = False

    @property
    def summary(self) -> torch.Tensor:
        return self.sequence[0]


def load_image(path: str | Path, size: int) -> np.ndarray:
    """Decode an image file to a float32 RGB array in [0, 1], resized to size x size."""
    from PIL import Image

    path = Path(path)
    try:
        with Image.open(path) as img:
            img = img.convert("RGB").resize((size, size), Image.BILINEAR)
            return np.asarray(img, dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise EncoderError(f"image file not found: {path}") from None
    except Exception as exc:
        raise EncoderError(f"cannot decode image {path}: {exc}") from exc


def _as_chw(image: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Accept (H, W), (H, W, C) or (C, H, W) pixel arrays; return float32 (3, H, W)."""
    tensor = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if tensor.ndim == 2:
        tensor = tensor.unsqueeze(0).expand(3, -1, -1)
    elif tensor.ndim == 3 and tensor.shape[-1] in (1, 3):
        tensor = tensor.permute(2, 0, 1)
        if tensor.shape[0] == 1:
            tensor = tensor.expand(3, -1, -1)
    if tensor.ndim != 3 or tensor.shape[0] != 3:
        raise EncoderError(f"expected an RGB or grayscale pixel array, got shape {tuple(tensor.shape)}")
    if tensor.max() > 1.5:  # uint8-style range
        tensor = tensor / 255.0
    return tensor


class ToyImageEncoder(nn.Module):
    """One fixed-seed 3x3 convolution followed by average pooling to 2x2.

    Fast, dependency-free and fully deterministic: the same image always maps
    to the same (4, 2, 2) feature map.
    """

    input_size = 32

    def __init__(self, channels: int = 4, pooled: int = 2, seed: int = 0):
        super().__init__()
        self.conv = nn.Conv2d(3, channels, kernel_size=3, padding=1)
        self.pool = nn.AdaptiveAvgPool2d((pooled, pooled))
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            bound = 1.0 / (3 * 9) ** 0.5
            self.conv.weight.uniform_(-bound, bound, generator=generator)
            self.conv.bias.uniform_(-bound, bound, generator=generator)
        self.spec = EncoderSpec(name="toy", output_shape=(channels, pooled, pooled))
        self.eval()

    @torch.no_grad()
    def forward(self, image: np.ndarray | torch.Tensor) -> torch.Tensor:
        pixels = _as_chw(image).unsqueeze(0)
        return self.pool(self.conv(pixels)).squeeze(0)


class ToyTextEncoder:
    """Hashed-unigram embeddings; row 0 holds the mean of the kept tokens.

    Each token embeds via a generator seeded from its own hash, so embeddings
    are stable across processes without any vocabulary.
    """

    def __init__(self, dim: int = 8, max_tokens: int = 256, seed: int = 0):
        self.dim = dim
        self.max_tokens = max_tokens
        self.seed = seed
        self.truncation_count = 0
        self._embeddings: dict[str, np.ndarray] = {}
        self.spec = EncoderSpec(
            name="toy", output_shape=(max_tokens, dim), max_tokens=max_tokens
        )

    def _embed(self, token: str) -> np.ndarray:
        cached = self._embeddings.get(token)
        if cached is None:
            digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            cached = rng.standard_normal(self.dim).astype(np.float64)
            self._embeddings[token] = cached
        return cached

    def encode(self, text: str) -> TextFeatureSeq:
        tokens = text.split()
        truncated = len(tokens) > self.max_tokens - 1
        if truncated:
            self.truncation_count += 1
            tokens = tokens[: self.max_tokens - 1]
        seq = np.zeros((self.max_tokens, self.dim), dtype=np.float64)
        if tokens:
            rows = np.stack([self._embed(t) for t in tokens])
            seq[0] = rows.mean(axis=0)
            seq[1 : 1 + len(rows)] = rows
        return TextFeatureSeq(sequence=torch.from_numpy(seq).float(), truncated=truncated)


class DenseNetImageEncoder(nn.Module):
    """Dense CNN backbone adapter; weights optional, never needed by tests."""

    input_size = 224

    def __init__(self, weights_path: str | None = None):
        super().__init__()
        try:
            from torchvision import models
        except ImportError as exc:
            raise EncoderError("densenet encoder requires torchvision") from exc
        backbone = models.densenet121(weights=None)
        if weights_path:
            backbone.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.features = backbone.features
        self.spec = EncoderSpec(name="densenet", output_shape=(1024, 7, 7), trainable=True)
        self.eval()

    @torch.no_grad()
    def forward(self, image: np.ndarray | torch.Tensor) -> torch.Tensor:
        pixels = _as_chw(image).unsqueeze(0)
        return self.features(pixels).squeeze(0)


class HFTextEncoder:
    """Transformer text encoder adapter (discriminator-style models and friends).

    Loads a Hugging Face checkpoint by name or local path; row 0 of the
    produced sequence is the first-token embedding.
    """

    def __init__(self, model_name: str, max_tokens: int = 256):
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise EncoderError(f"text encoder {model_name!r} requires transformers") from exc
        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModel.from_pretrained(model_name)
        self.model.eval()
        self.max_tokens = max_tokens
        self.truncation_count = 0
        dim = self.model.config.hidden_size
        self.spec = EncoderSpec(
            name=model_name, output_shape=(max_tokens, dim), trainable=True,
            max_tokens=max_tokens,
        )

    @torch.no_grad()
    def encode(self, text: str) -> TextFeatureSeq:
        batch = self.tokenizer(
            text or self.tokenizer.pad_token or "",
            return_tensors="pt",
            truncation=True,
            max_length=self.max_tokens,
            padding="max_length",
            return_overflowing_tokens=False,
        )
        n_tokens = len(self.tokenizer(text or "")["input_ids"])
        truncated = n_tokens > self.max_tokens
        if truncated:
            self.truncation_count += 1
        hidden = self.model(**batch).last_hidden_state.squeeze(0)
        return TextFeatureSeq(sequence=hidden, truncated=truncated)


IMAGE_ENCODERS = {
    "toy": ToyImageEncoder,
    "densenet": DenseNetImageEncoder,
}

TEXT_ENCODERS = {
    "toy": ToyTextEncoder,
    "electra": lambda **kw: HFTextEncoder("google/electra-base-discriminator", **kw),
    "bert": lambda **kw: HFTextEncoder("bert-base-uncased", **kw),
    "albert": lambda **kw: HFTextEncoder("albert-base-v2", **kw),
    "xlnet": lambda **kw: HFTextEncoder("xlnet-base-cased", **kw),
}


def build_image_encoder(name: str, **kwargs):
    try:
        factory = IMAGE_ENCODERS[name]
    except KeyError:
        raise EncoderError(f"unknown image encoder {name!r}; known: {sorted(IMAGE_ENCODERS)}") from None
    return factory(**kwargs)


def build_text_encoder(name: str, **kwargs):
    try:
        factory = TEXT_ENCODERS[name]
    except KeyError:
        raise EncoderError(f"unknown text encoder {name!r}; known: {sorted(TEXT_ENCODERS)}") from None
    return factory(**kwargs)


def encode_image(image: np.ndarray | torch.Tensor, encoder) -> ImageFeatureMap:
    """Run the encoder and enforce its declared shape/finiteness contract."""
    tensor = encoder(image)
    expected = encoder.spec.output_shape
    if tuple(tensor.shape) != tuple(expected):
        raise EncoderContractError(
            f"image encoder {encoder.spec.name!r} declared {expected} but produced {tuple(tensor.shape)}"
        )
    if not torch.isfinite(tensor).all():
        raise EncoderContractError(f"image encoder {encoder.spec.name!r} produced non-finite values")
    return ImageFeatureMap(tensor=tensor)


def encode_text(text: str, encoder) -> TextFeatureSeq:
    """Run the encoder and enforce the sequence contract (shape, finiteness, row 0)."""
    result = encoder.encode(text)
    expected = encoder.spec.output_shape
    if tuple(result.sequence.shape) != tuple(expected):
        raise EncoderContractError(
            f"text encoder {encoder.spec.name!r} declared {expected} but produced "
            f"{tuple(result.sequence.shape)}"
        )
    if not torch.isfinite(result.sequence).all():
        raise EncoderContractError(f"text encoder {encoder.spec.name!r} produced non-finite values")
    return result
