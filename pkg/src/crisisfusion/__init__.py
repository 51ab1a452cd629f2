"""Multimodal crisis event classification with knowledge infusion.

Image and text features are fused through guided cross-attention (per-modality
self-attention followed by cross-modal sigmoid gating), text is enriched with
Wikipedia knowledge before encoding, predictions are explained with
class-activation heatmaps, and multi-task performance is summarized by a
class-count-weighted accuracy score.
"""

__version__ = "0.1.0"
