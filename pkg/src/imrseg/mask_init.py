"""Coarse initial masks from label text: dense cosine path and Grad-CAM path."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .embeddings import DEFAULT_TEMPLATE, encode_image_dense, encode_text
from .errors import CapabilityError, ConfigError, DomainError, ShapeError

METHODS = ("cosine", "gradcam")
MODES = ("soft", "hard")


@dataclass
class ScoreMap:
    values: torch.Tensor      # (h, w)
    kind: str


@dataclass
class MaskEstimate:
    soft: torch.Tensor                 # (H, W) in [0, 1]
    binary: torch.Tensor = None        # (H, W) bool, optional
    logits: torch.Tensor = None        # (2, H, W) background/foreground, optional

    @property
    def resolution(self):
        return tuple(self.soft.shape[-2:])


def cosine_similarity_map(dense, text):
    feats = dense.tensor
    vec = text.vector.to(feats.dtype)
    if feats.shape[-1] != vec.shape[0]:
        raise ShapeError(f"dense width {feats.shape[-1]} != text width {vec.shape[0]}")
    norms = feats.norm(dim=-1) * vec.norm()
    dots = feats @ vec
    # featureless sites carry no evidence
    values = torch.where(norms > 0, dots / torch.where(norms > 0, norms, torch.ones_like(norms)),
                         torch.zeros_like(dots))
    return ScoreMap(values=values, kind="cosine")


def normalize_score_map(score, sigma_eps=1e-4):
    v = score.values
    if not torch.isfinite(v).all():
        raise DomainError("score map has non-finite entries")
    lo, hi = v.min(), v.max()
    return ScoreMap(values=(v - lo) / (hi - lo + sigma_eps), kind=score.kind)


def binarize(mask, threshold=0.5):
    """Threshold a ScoreMap or MaskEstimate; ties go to foreground."""
    soft = mask.values if isinstance(mask, ScoreMap) else mask.soft
    if soft.numel() and (soft.min() < 0 or soft.max() > 1):
        raise DomainError("binarize expects values in [0, 1]")
    return MaskEstimate(soft=soft, binary=soft >= threshold,
                        logits=getattr(mask, "logits", None))


def resize(values, size):
    """Bilinear resize of an (h, w) map (or (C, h, w) stack) to ``size``."""
    squeeze = values.ndim == 2
    x = values[None, None] if squeeze else values[None]
    if tuple(x.shape[-2:]) != tuple(size):
        x = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)
    return x[0, 0] if squeeze else x[0]


def grad_cam(provider, image, text, output_size=None):
    """Grad-CAM of the image-text cosine score on the provider's last conv
    activations.  Channel weights are spatial means of the score gradient;
    the map is ReLU(sum_k w_k A_k), resized to ``output_size`` (defaults to
    the image resolution when the image is an array)."""
    if not getattr(provider, "differentiable", False):
        raise CapabilityError(f"{type(provider).__name__} does not expose gradients")
    with torch.enable_grad():
        act = provider.activations(image).detach().requires_grad_(True)
        score = provider.score(act, text.vector)
        grad, = torch.autograd.grad(score, act, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(act)
    weights = grad.mean(dim=(1, 2))
    cam = torch.relu(torch.einsum("k,khw->hw", weights, act.detach()))
    if output_size is None and not isinstance(image, str):
        output_size = tuple(image.shape[:2])
    if output_size is not None:
        cam = resize(cam, output_size)
    return ScoreMap(values=cam, kind="gradcam")


def initial_mask(provider, image, class_label, method="gradcam", mode="soft",
                 template=DEFAULT_TEMPLATE, threshold=0.5, sigma_eps=1e-4, output_size=None):
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if output_size is None:
        output_size = tuple(image.shape[:2])
    text = encode_text(provider, class_label, template)
    if method == "cosine":
        score = normalize_score_map(cosine_similarity_map(encode_image_dense(provider, image), text),
                                    sigma_eps)
        soft = resize(score.values, output_size).clamp(0.0, 1.0)
    else:
        score = normalize_score_map(grad_cam(provider, image, text, output_size=output_size), sigma_eps)
        soft = score.values
    est = MaskEstimate(soft=soft.detach())
    return binarize(est, threshold) if mode == "hard" else est
