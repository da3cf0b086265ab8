"""Seeded training loop: batching, guide masking, loss, AdamW with warmup.

Defaults follow the published fine-tuning recipe (lr 5e-6, 10% warmup,
betas (0.9, 0.999), no weight decay, batch 16, temperature 0.01,
100k steps). :meth:`TrainConfig.desk` is the small synthetic preset.

Batch order is a pure function of ``(seed, epoch)``, so a run resumed from a
checkpoint at step k continues exactly like the uninterrupted run.
"""
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import encoder, kernels
from .errors import ConfigError, ContractError
from .loss import LossConfig, backprop_to_embeddings, contrastive_loss, model_similarities
from .selection import Strategy, build_masks, count_active_negatives, masked_fraction

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-6
    warmup_ratio: float = 0.1
    total_steps: int = 100_000
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    adam_epsilon: float = 1e-8
    strategy: Strategy = Strategy.GUIDED
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    checkpoint_every: int = 10_000
    schedule: str = "linear"  # post-warmup: "linear" decay to 0, or "constant"
    grad_clip: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1]")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not self.adam_epsilon > 0:
            raise ConfigError("adam_epsilon must be > 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.schedule not in ("linear", "constant"):
            raise ConfigError("schedule must be 'linear' or 'constant'")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be > 0 when set")

    @classmethod
    def desk(cls, **overrides):
        base = dict(learning_rate=1e-2, total_steps=2000, checkpoint_every=1000)
        base.update(overrides)
        return cls(**base)

    @property
    def warmup_steps(self):
        return int(round(self.warmup_ratio * self.total_steps))

    def to_dict(self):
        out = asdict(self)
        out["strategy"] = self.strategy.value
        return out


def lr_at(step, cfg):
    """Linear warmup from 0, then linear decay to 0 at ``total_steps`` (or constant)."""
    if not 0 <= step < cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps})")
    warm = cfg.warmup_steps
    if step < warm:
        return cfg.learning_rate * step / warm
    if cfg.schedule == "constant":
        return cfg.learning_rate
    return cfg.learning_rate * (cfg.total_steps - step) / (cfg.total_steps - warm)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, table):
        return cls(np.zeros_like(table), np.zeros_like(table), 0)


def adamw_step(params, grads, state, lr, cfg):
    """In-place AdamW update of ``params.table``; returns ``(params, state)``."""
    if grads.shape != params.table.shape or state.m.shape != params.table.shape:
        raise ContractError("parameter, gradient and moment shapes must agree")
    state.t += 1
    kernels.adamw_update(params.table, grads, state.m, state.v, lr, cfg.beta1, cfg.beta2,
                         cfg.adam_epsilon, cfg.weight_decay, state.t)
    return params, state


# -- logging ----------------------------------------------------------------

LOG_FIELDS = ["step", "loss", "lr", "mean_active_negatives",
              "masked_qp", "masked_qn", "masked_qq", "masked_pp", "skipped_rows"]


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    wall_clock: float = 0.0

    def append(self, rec):
        self.records.append(rec)

    def losses(self):
        return [r["loss"] for r in self.records]

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
            w.writeheader()
            for rec in self.records:
                w.writerow({k: rec.get(k, "") for k in LOG_FIELDS})


@dataclass
class TrainResult:
    params: encoder.EncoderParams
    log: TrainLog
    checkpoints: list
    state: AdamState


# -- batching ---------------------------------------------------------------

def batch_indices(step, n_items, batch_size, seed):
    """Item indices for ``step``; epochs are reshuffled and the last partial batch kept."""
    per_epoch = math.ceil(n_items / batch_size)
    epoch, b = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n_items)
    return perm[b * batch_size:(b + 1) * batch_size]


def _pairs_only(data):
    with_neg = sum(t.negative is not None for t in data)
    if 0 < with_neg < len(data):
        log.warning("%d of %d triplets lack a negative; training on (query, positive) pairs only",
                    len(data) - with_neg, len(data))
    return with_neg < len(data)


def batch_step(batch, params, guide, cfg, acc, pairs_only=False):
    """Forward, masks, loss and backward for one batch; gradients go into ``acc``."""
    n = len(batch)
    texts = [t.query for t in batch] + [t.positive for t in batch]
    if not pairs_only:
        texts += [t.negative for t in batch]
    enc = encoder.forward(texts, params)
    emb = enc.embeddings
    q, p = emb[:n], emb[n:2 * n]
    neg = None if pairs_only else emb[2 * n:]
    block = model_similarities(q, p, neg)

    guide_block = None
    if cfg.strategy is Strategy.GUIDED:
        guide_block = guide.similarities(list(batch) if not pairs_only else
                                         [type(t)(t.query, t.positive) for t in batch])
    masks = build_masks(block, guide_block, cfg.strategy)
    skip = enc.degenerate[:n] | enc.degenerate[n:2 * n]
    out = contrastive_loss(block, masks, cfg.loss, skip=skip)

    gq, gp, gn = backprop_to_embeddings(out.grad, q, p, neg)
    grad_emb = np.vstack([gq, gp] if gn is None else [gq, gp, gn])
    encoder.backward(enc, grad_emb, params, acc)
    return out, masks


def train(data, params, guide, cfg, out_dir=None, start_step=0, state=None,
          log_every=0):
    """Run steps ``start_step .. total_steps - 1``; ``params`` is not modified.

    Checkpoints (table plus optimizer moments) are written to ``out_dir``
    every ``cfg.checkpoint_every`` steps and at the end, when ``out_dir`` is set.
    """
    if not data:
        raise ConfigError("training data is empty")
    pairs_only = _pairs_only(data)
    if cfg.strategy is Strategy.GUIDED and guide is None:
        raise ConfigError("strategy 'guided' requires a guide")
    if cfg.strategy is Strategy.ASSIGNED and pairs_only:
        raise ConfigError("strategy 'assigned' requires assigned negatives; the data has none")

    params = params.copy()
    state = AdamState.zeros_like(params.table) if state is None else \
        AdamState(state.m.copy(), state.v.copy(), state.t)
    acc = encoder.GradAccumulator.like(params)
    tlog = TrainLog()
    checkpoints = []
    t0 = time.perf_counter()

    for step in range(start_step, cfg.total_steps):
        idx = batch_indices(step, len(data), cfg.batch_size, cfg.seed)
        batch = [data[i] for i in idx]
        acc.zero()
        out, masks = batch_step(batch, params, guide, cfg, acc, pairs_only)
        if cfg.grad_clip is not None:
            norm = float(np.linalg.norm(acc.grad_table))
            if norm > cfg.grad_clip:
                acc.grad_table *= cfg.grad_clip / norm
        lr = lr_at(step, cfg)
        adamw_step(params, acc.grad_table, state, lr, cfg)

        frac = masked_fraction(masks)
        live = ~out.skipped
        active = count_active_negatives(masks, cfg.loss.include_pp_rows)
        tlog.append({
            "step": step,
            "loss": out.value,
            "lr": lr,
            "mean_active_negatives": float(active[live].mean()) if live.any() else 0.0,
            "masked_qp": frac["qp"],
            "masked_qn": frac.get("qn"),
            "masked_qq": frac["qq"],
            "masked_pp": frac["pp"],
            "skipped_rows": int(out.skipped.sum()),
        })
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f lr %.3g", step, out.value, lr)
        done = step + 1
        if out_dir is not None and done % cfg.checkpoint_every == 0 and done < cfg.total_steps:
            checkpoints.append(save_training_checkpoint(out_dir, params, state, done, cfg))

    if out_dir is not None:
        checkpoints.append(save_training_checkpoint(out_dir, params, state, cfg.total_steps,
                                                    cfg, name="final.ckpt"))
    tlog.wall_clock = time.perf_counter() - t0
    return TrainResult(params, tlog, checkpoints, state)


def save_training_checkpoint(out_dir, params, state, step, cfg, name=None):
    path = Path(out_dir) / (name or f"step{step:07d}.ckpt")
    encoder.save_checkpoint(path, params, extra_arrays={"adam_m": state.m, "adam_v": state.v},
                            meta={"step": step, "adam_t": state.t, "train_config": cfg.to_dict()})
    return path


def load_training_checkpoint(path):
    """Return ``(params, AdamState or None, step)``."""
    params, extras, meta = encoder.load_checkpoint(path, with_extras=True)
    state = None
    if "adam_m" in extras:
        state = AdamState(extras["adam_m"], extras["adam_v"], int(meta.get("adam_t", 0)))
    return params, state, int(meta.get("step", 0))


def config_from_dict(d):
    """Build a TrainConfig from flat keys, ignoring unknown ones."""
    d = dict(d)
    loss_keys = {"temperature", "include_pp_rows", "reduction"}
    loss_cfg = LossConfig(**{k: d[k] for k in loss_keys if k in d})
    names = {f for f in TrainConfig.__dataclass_fields__} - {"loss"}
    return TrainConfig(loss=loss_cfg, **{k: d[k] for k in names if k in d})

