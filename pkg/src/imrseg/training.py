"""Episodic training with intermediate supervision, and checkpoint I/O."""

import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .data import EpisodeSampler
from .embeddings import build_provider
from .errors import TrainingError
from .pipeline import IMRModel, PipelineConfig, build_model, loss_all, run_refinement, soft_initial_mask
from .tensorio import config_hash, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class RecordCache:
    """Frozen-path quantities per record: backbone pyramid, soft initial
    mask and ground truth.  Nothing here receives gradients."""

    def __init__(self, model, provider, config):
        self.model = model
        self.provider = provider
        self.config = config
        self._items = {}

    def get(self, rec):
        item = self._items.get(rec.image_id)
        if item is None:
            image = torch.as_tensor(rec.image_float())
            with torch.no_grad():
                pyr = [f[0] for f in self.model.features(image[None])]
            mask0 = soft_initial_mask(self.provider, rec.image, rec.class_label, self.config)
            item = (pyr, mask0, torch.as_tensor(rec.mask))
            self._items[rec.image_id] = item
        return item

    def batch(self, records, hue_angles=None):
        items = [self.get(r) for r in records]
        dtype = self.model.feat_proj.weight.dtype
        if hue_angles is None:
            pyr = [torch.stack([it[0][lvl] for it in items]).to(dtype) for lvl in range(3)]
        else:
            images = torch.stack([torch.as_tensor(r.image_float()) for r in records]).permute(0, 3, 1, 2)
            with torch.no_grad():
                pyr = [f.to(dtype) for f in self.model.features(rotate_hue(images, hue_angles))]
        mask0 = torch.stack([it[1] for it in items]).to(dtype)
        gt = torch.stack([it[2] for it in items])
        return pyr, mask0, gt


def rotate_hue(images, angles):
    """Rotate colours about the grey axis; images (B, 3, H, W), angles (B,) radians."""
    axis = torch.full((3,), 3 ** -0.5, dtype=images.dtype)
    cross = torch.tensor([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]],
                         dtype=images.dtype)
    outer = torch.outer(axis, axis)
    eye = torch.eye(3, dtype=images.dtype)
    angles = torch.as_tensor(angles, dtype=images.dtype)
    c, s = torch.cos(angles)[:, None, None], torch.sin(angles)[:, None, None]
    rot = c * eye + s * cross + (1 - c) * outer          # Rodrigues, (B, 3, 3)
    out = torch.einsum("bij,bjhw->bihw", rot, images)
    return out.clamp(0.0, 1.0)


def train(index, config, provider=None, log_path=None, model=None):
    """Optimise neck, cell, projection and head; backbone and provider stay frozen.

    Returns ``(model, records)`` where records is the list of JSON log lines.
    """
    if provider is None:
        provider = build_provider(config.provider)
    if model is None:
        model = build_model(config)
    model.train()
    cache = RecordCache(model, provider, config)
    sampler = EpisodeSampler(index, config.fold, "train", k=1, seed=config.seed)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=config.lr)
    aug_rng = np.random.default_rng([config.seed, 1])
    n_iters = max(1, config.episodes // config.batch_size)
    records = []
    fh = open(log_path, "w") if log_path else None
    try:
        for step in range(1, n_iters + 1):
            episodes = [sampler.sample() for _ in range(config.batch_size)]
            # one rotation per episode, shared by support and query
            angles = aug_rng.uniform(0, 2 * np.pi, size=len(episodes)) if config.hue_augment else None
            pyr_s, m_s0, gt_s = cache.batch([ep.supports[0] for ep in episodes], angles)
            pyr_q, m_q0, gt_q = cache.batch([ep.query for ep in episodes], angles)
            traj = run_refinement(model, pyr_s, pyr_q, m_s0, m_q0)
            loss, terms = loss_all(traj, gt_s, gt_q, config, return_terms=True)
            if not math.isfinite(float(loss.detach())):
                ids = [f"{ep.episode_id}:{ep.class_label}/{ep.query.image_id}" for ep in episodes]
                raise TrainingError(f"non-finite loss {float(loss.detach())} at step {step}; episodes {ids}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step % config.log_every == 0 or step == n_iters:
                line = {"step": step, "loss": float(loss.detach()), "terms": terms, "seed": config.seed,
                        "episodes": [ep.episode_id for ep in episodes]}
                records.append(line)
                if fh:
                    fh.write(json.dumps(line) + "\n")
    finally:
        if fh:
            fh.close()
    model.eval()
    return model, records


def save_model(model, directory, extra=None):
    state = {k: v.to(torch.float32) for k, v in model.trainable_state().items()}
    return save_checkpoint(directory, state, model.config.to_dict(), extra=extra)


def load_model(directory):
    index, tensors = load_checkpoint(directory)
    config = PipelineConfig.from_dict(index["config"])
    model = IMRModel(config)
    state = model.state_dict()
    missing = set(model.trainable_state()) - set(tensors)
    if missing:
        raise TrainingError(f"checkpoint {directory} lacks tensors {sorted(missing)}")
    for name, arr in tensors.items():
        if name not in state:
            raise TrainingError(f"checkpoint tensor {name!r} does not belong to this architecture")
        state[name] = torch.as_tensor(arr)
    model.load_state_dict(state)
    model.eval()
    return model, index
