"""Guided cross-attention fusion of visual and textual features.

Each modality first runs through its own scaled dot-product self-attention,
then is pooled and projected into a shared fixed-width space. A sigmoid mask
computed from the *other* modality's pooled representation gates each
projected embedding element-wise; the two gated embeddings are concatenated
(image half first) and classified by a small fully-connected head with
softmax cross-entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import CrisisFusionError

PROJECTION_DIM = 100  # fixed width of the shared space


class FusionError(CrisisFusionError, ValueError):
    pass


@dataclass(frozen=True)
class FusionOutput:
    """Intermediate and final tensors of one fusion forward pass."""

    image_mask: torch.Tensor  # (..., K), strictly in (0, 1) when gated
    text_mask: torch.Tensor
    gated_image: torch.Tensor  # mask * projected embedding
    gated_text: torch.Tensor
    fused: torch.Tensor  # (..., 2K), image half first
    logits: torch.Tensor
    probabilities: torch.Tensor


def _check_finite(tensor: torch.Tensor, what: str) -> None:
    if not torch.isfinite(tensor).all():
        raise FusionError(f"non-finite values in {what}")


class SelfAttention(nn.Module):
    """Single-head scaled dot-product attention over one modality's tokens.

    Query, key and value are learned linear maps of the same input; the score
    matrix is scaled by 1/sqrt(dim) before the row softmax, so every output
    row is a convex combination of value rows. ``identity_projections`` drops
    the learned maps (Q = K = V = input) for oracle comparisons.
    """

    def __init__(self, dim: int, identity_projections: bool = False):
        super().__init__()
        self.dim = dim
        self.identity_projections = identity_projections
        if not identity_projections:
            self.query = nn.Linear(dim, dim)
            self.key = nn.Linear(dim, dim)
            self.value = nn.Linear(dim, dim)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        if seq.shape[-1] != self.dim:
            raise FusionError(f"expected token width {self.dim}, got {seq.shape[-1]}")
        _check_finite(seq, "attention input")
        if self.identity_projections:
            q = k = v = seq
        else:
            q, k, v = self.query(seq), self.key(seq), self.value(seq)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.dim)
        weights = torch.softmax(scores, dim=-1)
        return weights @ v

    def attention_weights(self, seq: torch.Tensor) -> torch.Tensor:
        """Row-stochastic score matrix, exposed for invariant checks."""
        if self.identity_projections:
            q = k = seq
        else:
            q, k = self.query(seq), self.key(seq)
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.dim), dim=-1)


class GuidedCrossAttentionFusion(nn.Module):
    """Self-attention, pooled projection, cross-modal gating and classification.

    Image tokens are the feature-map positions (width = channels); the text
    sequence pools to its row-0 summary vector. ``guided=False`` disables both
    the self-attention stage and the gates (plain projected concatenation)
    for ablations; ``gate_mode="ones"`` replaces the sigmoid by the constant 1
    so the fused vector degenerates to plain concatenation of the projections.
    """

    def __init__(
        self,
        image_dim: int,
        text_dim: int,
        num_classes: int,
        proj_dim: int = PROJECTION_DIM,
        head_hidden: int = PROJECTION_DIM,
        guided: bool = True,
        gate_mode: str = "sigmoid",
        identity_attention: bool = False,
    ):
        super().__init__()
        if gate_mode not in ("sigmoid", "ones"):
            raise FusionError(f"unknown gate_mode {gate_mode!r}")
        self.image_dim = image_dim
        self.text_dim = text_dim
        self.num_classes = num_classes
        self.proj_dim = proj_dim
        self.guided = guided
        self.gate_mode = gate_mode
        if guided:
            self.image_attention = SelfAttention(image_dim, identity_attention)
            self.text_attention = SelfAttention(text_dim, identity_attention)
            self.image_gate = nn.Linear(text_dim, proj_dim)  # image mask from text
            self.text_gate = nn.Linear(image_dim, proj_dim)  # text mask from image
        self.image_proj = nn.Linear(image_dim, proj_dim)
        self.text_proj = nn.Linear(text_dim, proj_dim)
        self.head = nn.Sequential(
            nn.Linear(2 * proj_dim, head_hidden),
            nn.ReLU(),
            nn.Linear(head_hidden, num_classes),
        )

    def pool_image(self, attended: torch.Tensor) -> torch.Tensor:
        """Mean over the token axis."""
        return attended.mean(dim=-2)

    def pool_text(self, attended: torch.Tensor) -> torch.Tensor:
        """Row 0, the summary vector."""
        return attended[..., 0, :]

    def project_image(self, pooled: torch.Tensor) -> torch.Tensor:
        return F.relu(self.image_proj(pooled))

    def project_text(self, pooled: torch.Tensor) -> torch.Tensor:
        return F.relu(self.text_proj(pooled))

    def cross_gate(
        self,
        pooled_image: torch.Tensor,
        pooled_text: torch.Tensor,
        proj_image: torch.Tensor,
        proj_text: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Masks, gated embeddings and the fused vector (image half first).

        The image mask depends only on the pooled text representation, the
        text mask only on the pooled image representation.
        """
        _check_finite(pooled_image, "pooled image")
        _check_finite(pooled_text, "pooled text")
        if self.guided and self.gate_mode == "sigmoid":
            image_mask = torch.sigmoid(self.image_gate(pooled_text))
            text_mask = torch.sigmoid(self.text_gate(pooled_image))
        else:
            image_mask = torch.ones_like(proj_image)
            text_mask = torch.ones_like(proj_text)
        gated_image = image_mask * proj_image
        gated_text = text_mask * proj_text
        fused = torch.cat([gated_image, gated_text], dim=-1)
        return image_mask, text_mask, gated_image, gated_text, fused

    def classify(self, fused: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        _check_finite(fused, "fused vector")
        logits = self.head(fused)
        return logits, torch.softmax(logits, dim=-1)

    def forward(self, image_tokens: torch.Tensor, text_seq: torch.Tensor) -> FusionOutput:
        """image_tokens: (..., m, image_dim); text_seq: (..., l, text_dim)."""
        if self.guided:
            attended_image = self.image_attention(image_tokens)
            attended_text = self.text_attention(text_seq)
        else:
            attended_image, attended_text = image_tokens, text_seq
        pooled_image = self.pool_image(attended_image)
        pooled_text = self.pool_text(attended_text)
        proj_image = self.project_image(pooled_image)
        proj_text = self.project_text(pooled_text)
        image_mask, text_mask, gated_image, gated_text, fused = self.cross_gate(
            pooled_image, pooled_text, proj_image, proj_text
        )
        logits, probabilities = self.classify(fused)
        return FusionOutput(
            image_mask=image_mask,
            text_mask=text_mask,
            gated_image=gated_image,
            gated_text=gated_text,
            fused=fused,
            logits=logits,
            probabilities=probabilities,
        )


class MultimodalClassifier(nn.Module):
    """Full trainable pipeline over encoded inputs.

    A 1x1 convolution (``convd``) sits between the image feature map and the
    fusion stage, preserving the (channels, h, w) shape; it exists to host
    class-activation explanations. The map is then flattened to h*w tokens of
    width ``channels`` and fused with the text sequence.
    """

    def __init__(
        self,
        image_channels: int,
        text_dim: int,
        num_classes: int,
        proj_dim: int = PROJECTION_DIM,
        head_hidden: int = PROJECTION_DIM,
        guided: bool = True,
        gate_mode: str = "sigmoid",
    ):
        super().__init__()
        self.num_classes = num_classes
        self.convd = nn.Conv2d(image_channels, image_channels, kernel_size=1)
        self.fusion = GuidedCrossAttentionFusion(
            image_channels, text_dim, num_classes,
            proj_dim=proj_dim, head_hidden=head_hidden,
            guided=guided, gate_mode=gate_mode,
        )

    def forward(self, image_map: torch.Tensor, text_seq: torch.Tensor) -> FusionOutput:
        """image_map: (..., c, h, w); text_seq: (..., l, text_dim)."""
        activation = self.convd(image_map)
        tokens = activation.flatten(-2).transpose(-2, -1)  # (..., h*w, c)
        return self.fusion(tokens, text_seq)


def validate_labels(labels: torch.Tensor, num_classes: int) -> None:
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise FusionError(
            f"label out of range [0, {num_classes}): min={int(labels.min())}, max={int(labels.max())}"
        )


def batch_loss(model: nn.Module, image_inputs: torch.Tensor, text_seqs: torch.Tensor,
               labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy of the batch; labels validated before the forward."""
    validate_labels(labels, model.num_classes)
    output = model(image_inputs, text_seqs)
    return F.cross_entropy(output.logits, labels)


def loss_and_grads(
    model: nn.Module,
    image_inputs: torch.Tensor,
    text_seqs: torch.Tensor,
    labels: torch.Tensor,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Batch loss plus the gradient for every named parameter of the model.

    Parameters outside the active configuration (e.g. gate weights under
    ``gate_mode="ones"``) get an explicit zero gradient.
    """
    loss = batch_loss(model, image_inputs, text_seqs, labels)
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = tuple(
        g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)
    )
    return loss.detach(), dict(zip(names, grads))


def seed_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic fan-in-scaled uniform init for every weight and bias."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in module.named_parameters():
            if param.ndim >= 2:
                fan_in = param.shape[1] * (param[0, 0].numel() if param.ndim > 2 else 1)
            else:
                fan_in = max(param.shape[0], 1)
            bound = 1.0 / math.sqrt(fan_in)
            param.uniform_(-bound, bound, generator=generator)
