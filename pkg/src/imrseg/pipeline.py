"""End-to-end model: coarse masks, N symmetric refinement steps, the
intermediate-supervision loss, K-shot aggregation and zero-shot self-guidance."""

from dataclasses import asdict, dataclass, field, fields, is_dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ToyBackbone
from .correlation import Conv4DSpec, Neck, correlate, resize_maps
from .embeddings import DEFAULT_TEMPLATE, ProviderSpec
from .errors import ConfigError, ShapeError
from .imr import CELL_VARIANTS, Head, RecurrentCell, cell_groups
from .mask_init import MaskEstimate, binarize, initial_mask

LAMBDA_SCHEDULES = ("none", "linear", "same")
UPDATE_SCHEDULES = ("parallel", "alternating")


@dataclass
class ArchConfig:
    image_size: int = 64
    level_channels: tuple = (24, 32, 48)         # finest level first
    branch_channels: tuple = (8, 8, 16)
    support_strides: tuple = ((2, 2, 2), (2, 2, 1), (2, 1, 1))
    kernel: int = 3
    mix_channels: int = 16
    corr_channels: int = 32
    gn_groups: int = 4
    feat_proj_channels: int = 8
    cell_groups: int = 16
    head_mid_channels: int = 16
    fuse_channels: int = 16
    backbone_seed: int = 0

    @property
    def corr_size(self):
        return self.image_size // 4


@dataclass
class PipelineConfig:
    steps: int = 2
    cell_variant: str = "group_conv"
    update_schedule: str = "parallel"
    lambda_schedule: str = "same"
    w_s: float = 1.0
    threshold: float = 0.5
    init_method: str = "gradcam"
    template: str = DEFAULT_TEMPLATE
    seed: int = 0
    fold: int = 0
    lr: float = 2e-4
    batch_size: int = 4
    episodes: int = 2000
    log_every: int = 1
    hue_augment: bool = True
    provider: ProviderSpec = field(default_factory=ProviderSpec)
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if isinstance(self.provider, dict):
            self.provider = ProviderSpec(**self.provider)
        if isinstance(self.arch, dict):
            arch = dict(self.arch)
            for key in ("level_channels", "branch_channels"):
                if key in arch:
                    arch[key] = tuple(arch[key])
            if "support_strides" in arch:
                arch["support_strides"] = tuple(tuple(s) for s in arch["support_strides"])
            self.arch = ArchConfig(**arch)
        self.validate()

    def validate(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not self.lr > 0 or self.lr == float("inf"):
            raise ConfigError(f"lr must be a positive finite number, got {self.lr}")
        if self.batch_size < 1 or self.episodes < 1:
            raise ConfigError("batch_size and episodes must be >= 1")
        if self.w_s < 0:
            raise ConfigError("w_s must be non-negative")
        if self.cell_variant not in CELL_VARIANTS:
            raise ConfigError(f"cell_variant must be one of {CELL_VARIANTS}")
        if self.lambda_schedule not in LAMBDA_SCHEDULES:
            raise ConfigError(f"lambda_schedule must be one of {LAMBDA_SCHEDULES}")
        if self.update_schedule not in UPDATE_SCHEDULES:
            raise ConfigError(f"update_schedule must be one of {UPDATE_SCHEDULES}")
        if self.update_schedule == "alternating" and self.cell_variant != "none":
            raise ConfigError("the alternating schedule is only defined for cell_variant='none'")
        if self.init_method not in ("gradcam", "cosine"):
            raise ConfigError("init_method must be 'gradcam' or 'cosine'")
        if self.cell_variant == "group_conv":
            cell_groups(self.arch.corr_channels, self.arch.cell_groups)

    def to_dict(self):
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if is_dataclass(obj):
        return _plain(asdict(obj))
    return obj


class IMRModel(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        a = config.arch
        if len(a.support_strides) != 3 or any(len(s) != len(a.branch_channels) for s in a.support_strides):
            raise ConfigError("support_strides needs one stride per branch layer for three branches")
        self.backbone = ToyBackbone(a.level_channels, seed=a.backbone_seed)
        branch_specs = []
        for strides in a.support_strides:
            chans = (1,) + tuple(a.branch_channels)
            branch_specs.append([
                Conv4DSpec(chans[i], chans[i + 1], a.kernel, a.kernel, 1, s, a.gn_groups)
                for i, s in enumerate(strides)])
        top = a.branch_channels[-1]
        mix = [Conv4DSpec(top, a.mix_channels, a.kernel, a.kernel, groups=a.gn_groups),
               Conv4DSpec(a.mix_channels, a.corr_channels, a.kernel, a.kernel, groups=a.gn_groups)]
        if a.mix_channels != top:
            raise ConfigError("mix_channels must equal the last branch width (the fine branch is added to it)")
        self.neck = Neck(branch_specs, mix)
        self.feat_proj = nn.Conv2d(a.level_channels[0], a.feat_proj_channels, 1)
        x_channels = a.corr_channels + a.feat_proj_channels + 1
        self.cell = RecurrentCell(x_channels, a.corr_channels, config.cell_variant, a.cell_groups)
        self.head = Head(a.corr_channels, a.head_mid_channels, a.fuse_channels)

    def trainable_state(self):
        return {k: v for k, v in self.state_dict().items() if not k.startswith("backbone.")}

    def features(self, images):
        """(B, H, W, 3) or (B, 3, H, W) float images -> pyramid."""
        if images.shape[-1] == 3 and images.shape[1] != 3:
            images = images.permute(0, 3, 1, 2)
        return self.backbone(images.to(self.feat_proj.weight.dtype).contiguous())

    def compose_input(self, corr, feat_fine, mask_prev):
        size = corr.shape[-2:]
        proj = self.feat_proj(resize_maps(feat_fine, size))
        m = resize_maps(mask_prev[:, None].to(corr.dtype), size)
        return torch.cat([corr, proj, m], dim=1)

    def branch(self, pyr_a, pyr_b, mask_b_prev, mask_a_prev, h_a):
        """Refine branch ``a`` guided by branch ``b``.

        Returns (logits (B, 2, H, W), new state, correlation volume).
        """
        corr = correlate(self.neck, pyr_a, pyr_b, mask_b_prev)
        if h_a is None:
            h_a = torch.zeros_like(corr)
        if self.cell.variant == "none":
            h_new = torch.zeros_like(h_a)
        else:
            h_new = self.cell(self.compose_input(corr, pyr_a[0], mask_a_prev), h_a)
        return self.head(corr, h_new, mask_a_prev), h_new, corr


@dataclass
class RefinementTrajectory:
    support: list          # [MaskEstimate], t = 0..N
    query: list
    states_s: list = field(default_factory=list)
    states_q: list = field(default_factory=list)

    def __len__(self):
        return len(self.query)


def _estimate(logits):
    return MaskEstimate(soft=torch.softmax(logits, dim=1)[:, 1], logits=logits)


def refine_step(model, pyr_s, pyr_q, mask_s, mask_q, h_s, h_q):
    """One parallel symmetric update; both sides read only t-1 estimates.

    Masks are (B, H, W) soft tensors.  Returns (est_s, est_q, h_s', h_q').
    """
    logits_q, h_q2, _ = model.branch(pyr_q, pyr_s, mask_s, mask_q, h_q)
    logits_s, h_s2, _ = model.branch(pyr_s, pyr_q, mask_q, mask_s, h_s)
    return _estimate(logits_s), _estimate(logits_q), h_s2, h_q2


def run_refinement(model, pyr_s, pyr_q, mask_s0, mask_q0, steps=None, schedule=None):
    """Unroll N refinement steps from soft initial masks (B, H, W)."""
    cfg = model.config
    steps = steps or cfg.steps
    schedule = schedule or cfg.update_schedule
    traj = RefinementTrajectory(support=[MaskEstimate(soft=mask_s0)], query=[MaskEstimate(soft=mask_q0)])
    h_s = h_q = None
    m_s, m_q = mask_s0, mask_q0
    for t in range(1, steps + 1):
        if schedule == "parallel":
            est_s, est_q, h_s, h_q = refine_step(model, pyr_s, pyr_q, m_s, m_q, h_s, h_q)
        elif t % 2 == 1:
            # mutual baseline: query from support on odd steps, support from query on even
            logits, h_q, _ = model.branch(pyr_q, pyr_s, m_s, m_q, h_q)
            est_q, est_s = _estimate(logits), traj.support[-1]
        else:
            logits, h_s, _ = model.branch(pyr_s, pyr_q, m_q, m_s, h_s)
            est_s, est_q = _estimate(logits), traj.query[-1]
        traj.support.append(est_s)
        traj.query.append(est_q)
        traj.states_s.append(h_s)
        traj.states_q.append(h_q)
        m_s, m_q = est_s.soft, est_q.soft
    return traj


def run_zero_shot(model, pyr_q, mask_q0, steps=None):
    """Query guides itself: its previous estimate stands in for the support mask."""
    steps = steps or model.config.steps
    traj = RefinementTrajectory(support=[MaskEstimate(soft=mask_q0)], query=[MaskEstimate(soft=mask_q0)])
    h_q = None
    m_q = mask_q0
    for _ in range(steps):
        logits, h_q, _ = model.branch(pyr_q, pyr_q, m_q, m_q, h_q)
        est = _estimate(logits)
        traj.query.append(est)
        traj.support.append(est)
        traj.states_q.append(h_q)
        traj.states_s.append(h_q)
        m_q = est.soft
    return traj


# ---------------------------------------------------------------------------
# loss

def compute_lambda(t, n, schedule):
    if not 1 <= t <= n:
        raise ConfigError(f"step {t} outside 1..{n}")
    if schedule == "none":
        return 1.0 if t == n else 0.0
    if schedule == "linear":
        return t / n
    if schedule == "same":
        return 1.0
    raise ConfigError(f"unknown lambda schedule {schedule!r}")


def _log_probs(est):
    if est.logits is not None:
        return F.log_softmax(est.logits, dim=-3)
    p = est.soft.clamp(1e-12, 1.0)
    q = (1.0 - est.soft).clamp(1e-12, 1.0)
    return torch.stack([q.log(), p.log()], dim=-3)


def segmentation_loss(est, gt):
    """Mean per-pixel two-class cross entropy; ``gt`` is boolean/0-1."""
    logp = _log_probs(est)
    gt = torch.as_tensor(gt)
    if logp.shape[-2:] != gt.shape[-2:]:
        raise ShapeError(f"prediction {tuple(logp.shape[-2:])} vs ground truth {tuple(gt.shape[-2:])}")
    fg = gt.to(logp.dtype)
    return -(fg * logp.select(-3, 1) + (1 - fg) * logp.select(-3, 0)).mean()


def loss_all(trajectory, gt_s, gt_q, config, return_terms=False):
    """Sum over t = 1..N of lambda_t * [CE(query) + w_s * CE(support)]."""
    n = len(trajectory.query) - 1
    total = 0.0
    terms = []
    for t in range(1, n + 1):
        lam = compute_lambda(t, n, config.lambda_schedule)
        lq = segmentation_loss(trajectory.query[t], gt_q)
        ls = segmentation_loss(trajectory.support[t], gt_s)
        total = total + lam * (lq + config.w_s * ls)
        terms.append({"t": t, "lambda": lam, "query": float(lq.detach()), "support": float(ls.detach())})
    return (total, terms) if return_terms else total


# ---------------------------------------------------------------------------
# inference

def aggregate_k_shot(masks):
    """Vote count divided by its maximum; all-empty votes give all zeros."""
    if not masks:
        raise ShapeError("need at least one mask")
    stack = torch.stack([torch.as_tensor(np.asarray(m) if not torch.is_tensor(m) else m) for m in masks])
    total = stack.to(torch.float64).sum(0)
    peak = total.max()
    soft = total / peak if peak > 0 else torch.zeros_like(total)
    return MaskEstimate(soft=soft)


def _float_image(image):
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return arr.astype(np.float32)


def soft_initial_mask(provider, image, class_label, config):
    est = initial_mask(provider, _float_image(image), class_label, method=config.init_method,
                       mode="soft", template=config.template)
    return est.soft.to(torch.float32)


def _pyramid(model, image):
    return model.features(torch.as_tensor(_float_image(image))[None])


@torch.no_grad()
def predict_query(model, provider, support_image, query_image, class_label):
    """One-shot prediction; returns (binary mask (H, W), trajectory)."""
    cfg = model.config
    m_s0 = soft_initial_mask(provider, support_image, class_label, cfg)[None]
    m_q0 = soft_initial_mask(provider, query_image, class_label, cfg)[None]
    traj = run_refinement(model, _pyramid(model, support_image), _pyramid(model, query_image), m_s0, m_q0)
    final = traj.query[-1].soft[0] >= cfg.threshold
    return final, traj


@torch.no_grad()
def predict_k_shot(model, provider, support_images, query_image, class_label):
    """K independent one-shot runs, then vote aggregation and binarization."""
    preds, trajs = zip(*(predict_query(model, provider, s, query_image, class_label)
                         for s in support_images))
    agg = aggregate_k_shot(list(preds))
    return binarize(agg, model.config.threshold).binary, list(trajs)


@torch.no_grad()
def predict_zero_shot(model, provider, query_image, class_label):
    cfg = model.config
    m_q0 = soft_initial_mask(provider, query_image, class_label, cfg)[None]
    traj = run_zero_shot(model, _pyramid(model, query_image), m_q0)
    return traj.query[-1].soft[0] >= cfg.threshold, traj


def build_model(config, seed=None):
    torch.manual_seed(config.seed if seed is None else seed)
    return IMRModel(config)

