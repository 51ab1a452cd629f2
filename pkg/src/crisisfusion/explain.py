"""Class-discriminative heatmaps over the image pathway.

The gradient of a class's pre-softmax logit with respect to the dedicated
convolution layer's feature maps is global-average-pooled into per-channel
weights; the rectified weighted sum of the feature maps is the raw heatmap.
A min-max normalized copy feeds the blue-to-orange overlay rendering.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import CrisisFusionError

logger = logging.getLogger(__name__)

OVERLAY_ALPHA = 0.5
_COLD = np.array([0.0, 0.0, 255.0])  # blue
_HOT = np.array([255.0, 165.0, 0.0])  # orange


class ExplainError(CrisisFusionError, RuntimeError):
    pass


@dataclass(frozen=True)
class GradCAMMap:
    """Raw (nonnegative) and [0, 1]-normalized heatmaps for one target class."""

    raw: np.ndarray
    normalized: np.ndarray
    target_class: int
    layer_name: str


def _resolve_layer(model: torch.nn.Module, layer_name: str) -> torch.nn.Module:
    module = model
    for part in layer_name.split("."):
        if not hasattr(module, part):
            raise ExplainError(f"model has no layer named {layer_name!r}")
        module = getattr(module, part)
    if not isinstance(module, torch.nn.Module):
        raise ExplainError(f"{layer_name!r} is not a module")
    return module


def _normalize(raw: np.ndarray) -> np.ndarray:
    lo, hi = raw.min(), raw.max()
    if hi <= 0.0:
        return np.zeros_like(raw)
    if hi == lo:  # constant positive map
        return np.ones_like(raw)
    return (raw - lo) / (hi - lo)


def grad_cam(
    model: torch.nn.Module,
    inputs: tuple[torch.Tensor, ...],
    target_class: int,
    layer_name: str = "convd",
) -> GradCAMMap:
    """Heatmap of the target class's logit over the named convolution layer.

    ``model(*inputs)`` must yield logits (directly or via a ``logits``
    attribute) for a single sample; the map's per-channel weights are the
    spatially averaged gradients of the pre-softmax class score.
    """
    layer = _resolve_layer(model, layer_name)
    captured: list[torch.Tensor] = []

    def hook(_module, _inputs, output):
        # Differentiation happens w.r.t. the layer output; give it a grad leaf
        # when the layer is parameter-free and fed by plain tensors.
        if not output.requires_grad:
            output = output.detach().requires_grad_(True)
        captured.append(output)
        return output

    handle = layer.register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            output = model(*inputs)
            logits = getattr(output, "logits", output)
            logits = logits.squeeze()
            if logits.ndim != 1:
                raise ExplainError(f"expected logits for a single sample, got shape {tuple(logits.shape)}")
            if not 0 <= target_class < logits.shape[0]:
                raise ExplainError(
                    f"target class {target_class} out of range [0, {logits.shape[0]})"
                )
            if not captured:
                raise ExplainError(f"layer {layer_name!r} did not run in the forward pass")
            activation = captured[-1]
            score = logits[target_class]
            grads = torch.autograd.grad(score, activation, allow_unused=True)[0]
    finally:
        handle.remove()
        if was_training:
            model.train()

    if grads is None:  # class score independent of the image pathway
        grads = torch.zeros_like(activation)
    activation = activation.detach()
    grads = grads.detach()
    if activation.ndim == 4:  # strip the batch dimension only
        activation, grads = activation[0], grads[0]
    if activation.ndim != 3:
        raise ExplainError(
            f"layer {layer_name!r} must produce a (channels, h, w) map, got {tuple(activation.shape)}"
        )
    weights = grads.mean(dim=(-2, -1))  # global average pool over spatial dims
    raw = torch.relu((weights[:, None, None] * activation).sum(dim=0))
    raw_np = raw.to(torch.float64).cpu().numpy()
    return GradCAMMap(
        raw=raw_np,
        normalized=_normalize(raw_np),
        target_class=target_class,
        layer_name=layer_name,
    )


def upsample_bilinear(map2d: np.ndarray, height: int, width: int) -> np.ndarray:
    tensor = torch.from_numpy(np.asarray(map2d, dtype=np.float64))[None, None]
    out = F.interpolate(tensor, size=(height, width), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def colorize(normalized: np.ndarray) -> np.ndarray:
    """Blue-to-orange colormap; values outside [0, 1] are clipped."""
    v = np.clip(normalized, 0.0, 1.0)[..., None]
    return (1.0 - v) * _COLD + v * _HOT


def render_overlay(
    cam: GradCAMMap,
    image: np.ndarray,
    png_path: str | Path,
    csv_path: str | Path,
) -> tuple[Path, Path]:
    """Write the alpha-blended overlay PNG and the raw heatmap grid.

    The normalized map is bilinearly upsampled to the image resolution,
    colorized and blended at 0.5 onto the image. The CSV holds the raw map
    row-major at six significant digits, so re-renders are byte-identical.
    """
    from PIL import Image

    image = np.asarray(image)
    if image.ndim == 2:
        image = np.stack([image] * 3, axis=-1)
    if image.dtype != np.uint8:
        image = (np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    height, width = image.shape[:2]
    heat = upsample_bilinear(cam.normalized, height, width)
    color = colorize(heat)
    blended = ((1 - OVERLAY_ALPHA) * image.astype(np.float64) + OVERLAY_ALPHA * color)
    blended = np.clip(np.rint(blended), 0, 255).astype(np.uint8)

    png_path, csv_path = Path(png_path), Path(csv_path)
    try:
        Image.fromarray(blended).save(png_path)
        with csv_path.open("w", encoding="utf-8") as handle:
            for row in cam.raw:
                handle.write(",".join(f"{value:.6g}" for value in row) + "\n")
    except OSError as exc:
        raise ExplainError(f"cannot write explanation artifacts: {exc}") from exc
    return png_path, csv_path
