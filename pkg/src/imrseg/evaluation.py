"""IoU metrics and the episodic evaluation protocol."""

import csv
import json
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import EpisodeSampler
from .embeddings import build_provider
from .errors import ConfigError, ShapeError
from .mask_init import binarize
from .pipeline import aggregate_k_shot, run_refinement, run_zero_shot
from .tensorio import config_hash
from .training import RecordCache, load_model

AVERAGING = ("class", "episode")

REPORT_SCHEMA = {
    "type": "object",
    "required": ["fold", "miou", "class_iou", "step_miou", "episodes", "k", "mode",
                 "config_hash", "seed", "averaging"],
    "properties": {
        "fold": {"type": "integer"},
        "miou": {"type": "number", "minimum": 0, "maximum": 1},
        "class_iou": {"type": "object", "additionalProperties": {"type": "number"}},
        "step_miou": {"type": "array", "items": {"type": "number"}},
        "episodes": {"type": "integer", "minimum": 1},
        "k": {"type": "integer", "minimum": 1},
        "mode": {"enum": ["few-shot", "zero-shot"]},
        "config_hash": {"type": "string"},
        "seed": {"type": "integer"},
        "averaging": {"enum": list(AVERAGING)},
    },
}


def _as_bool(mask):
    if torch.is_tensor(mask):
        mask = mask.detach().cpu().numpy()
    return np.asarray(mask).astype(bool)


def iou(pred, gt):
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ShapeError(f"iou shape mismatch: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


@dataclass
class EvalReport:
    fold: int
    miou: float
    class_iou: dict
    step_miou: list
    episodes: int
    k: int
    mode: str
    config_hash: str
    seed: int
    averaging: str = "class"
    per_episode: list = field(default_factory=list, repr=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("per_episode")
        return d

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def to_csv(self, path):
        n_steps = len(self.step_miou)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "class"] + [f"iou_t{t}" for t in range(n_steps)])
            for row in self.per_episode:
                w.writerow([row["episode"], row["class"]] + [f"{v:.6f}" for v in row["step_iou"]])

    def render_table(self):
        lines = [f"fold {self.fold}  mode {self.mode}  K={self.k}  episodes {self.episodes}"
                 f"  seed {self.seed}  config {self.config_hash}",
                 f"{'class':<12}{'IoU':>8}"]
        lines += [f"{c:<12}{v:>8.4f}" for c, v in sorted(self.class_iou.items())]
        lines.append(f"{'mIoU':<12}{self.miou:>8.4f}")
        lines.append("per-step mIoU: " + "  ".join(f"t={t}:{v:.4f}" for t, v in enumerate(self.step_miou)))
        return "\n".join(lines)


class _Accumulator:
    def __init__(self):
        self.inter = defaultdict(float)
        self.union = defaultdict(float)
        self.ious = defaultdict(list)

    def add(self, cls, pred, gt):
        p, g = _as_bool(pred), _as_bool(gt)
        self.inter[cls] += np.logical_and(p, g).sum()
        self.union[cls] += np.logical_or(p, g).sum()
        self.ious[cls].append(iou(p, g))

    def per_class(self, averaging):
        if averaging == "class":
            return {c: (self.inter[c] / self.union[c] if self.union[c] else 1.0) for c in self.union}
        return {c: float(np.mean(v)) for c, v in self.ious.items()}


def evaluate_predictor(predictor, index, fold, episodes=1000, k=1, seed=0, mode="few-shot",
                       averaging="class", cfg_hash="", workers=1):
    """``predictor(episode)`` returns the list of binary query masks for
    t = 0..N (the last one is the prediction)."""
    if averaging not in AVERAGING:
        raise ConfigError(f"averaging must be one of {AVERAGING}")
    if not index.fold_classes(fold):
        raise ConfigError(f"fold {fold} has no test classes")
    sampler = EpisodeSampler(index, fold, "test", k=k, seed=seed)
    stream = [sampler.sample() for _ in range(episodes)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outputs = list(pool.map(predictor, stream))
    else:
        outputs = [predictor(ep) for ep in stream]
    n_steps = len(outputs[0])
    accs = [_Accumulator() for _ in range(n_steps)]
    rows = []
    for ep, masks in zip(stream, outputs):
        if len(masks) != n_steps:
            raise ShapeError("predictor returned trajectories of varying length")
        gt = ep.query.mask
        for t, m in enumerate(masks):
            accs[t].add(ep.class_label, m, gt)
        rows.append({"episode": ep.episode_id, "class": ep.class_label,
                     "step_iou": [iou(m, gt) for m in masks]})
    step_class = [acc.per_class(averaging) for acc in accs]
    step_miou = [float(np.mean(list(pc.values()))) for pc in step_class]
    final = step_class[-1]
    return EvalReport(fold=fold, miou=step_miou[-1], class_iou={c: float(v) for c, v in final.items()},
                      step_miou=step_miou, episodes=episodes, k=k, mode=mode, config_hash=cfg_hash,
                      seed=seed, averaging=averaging, per_episode=rows)


def model_predictor(model, provider, mode="few-shot", cache=None):
    cfg = model.config
    cache = cache or RecordCache(model, provider, cfg)
    thr = cfg.threshold

    @torch.no_grad()
    def predict(ep):
        pyr_q, m_q0, _ = cache.batch([ep.query])
        if mode == "zero-shot":
            traj = run_zero_shot(model, pyr_q, m_q0)
            return [est.soft[0] >= thr for est in traj.query]
        if mode != "few-shot":
            raise ConfigError(f"unknown evaluation mode {mode!r}")
        per_support = []
        for rec in ep.supports:
            pyr_s, m_s0, _ = cache.batch([rec])
            traj = run_refinement(model, pyr_s, pyr_q, m_s0, m_q0)
            per_support.append([est.soft[0] >= thr for est in traj.query])
        if len(per_support) == 1:
            return per_support[0]
        steps = []
        for t in range(len(per_support[0])):
            agg = aggregate_k_shot([traj_t[t] for traj_t in per_support])
            steps.append(binarize(agg, thr).binary)
        return steps

    return predict


def evaluate(checkpoint, index, fold=None, episodes=1000, k=1, mode="few-shot", seed=0,
             provider=None, averaging="class", workers=1):
    """``checkpoint`` is a directory or an in-memory model."""
    model = load_model(checkpoint)[0] if not hasattr(checkpoint, "branch") else checkpoint
    model.eval()
    cfg = model.config
    if tuple(index.resolution) != (cfg.arch.image_size, cfg.arch.image_size):
        raise ConfigError(f"checkpoint expects {cfg.arch.image_size}px images, dataset has {index.resolution}")
    fold = cfg.fold if fold is None else fold
    provider = provider or build_provider(cfg.provider)
    predictor = model_predictor(model, provider, mode)
    return evaluate_predictor(predictor, index, fold, episodes, k, seed, mode, averaging,
                              config_hash(cfg.to_dict()), workers)
