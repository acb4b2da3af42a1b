"""Deterministic mini-batch training with gradient accumulation and metric logging."""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ._validation import ValidationError
from .neural.layers import NonFiniteError
from .neural.schedule import lr_factor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 1
    max_steps: int = None
    batch_size: int = 6
    accum_factor: int = 1
    log_every: int = 10
    validate_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.accum_factor < 1 or self.log_every < 1:
            raise ValidationError("epochs, batch_size, accum_factor and log_every must be >= 1")


@dataclass
class MetricsLog:
    """Line-oriented ``epoch, step, split, metric, value`` records."""

    records: list = field(default_factory=list)

    def add(self, epoch, step, split, metric, value):
        self.records.append((int(epoch), int(step), split, metric, float(value)))

    def lines(self):
        return [f"{e}, {s}, {split}, {m}, {v!r}" for e, s, split, m, v in self.records]

    def write(self, path, header=None):
        with open(path, "w", encoding="utf-8") as fh:
            if header:
                fh.write(f"# {header}\n")
            for line in self.lines():
                fh.write(line + "\n")

    @classmethod
    def read(cls, path):
        out = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip() or line.startswith("#"):
                    continue
                e, s, split, m, v = (p.strip() for p in line.split(","))
                out.add(int(e), int(s), split, m, float(v))
        return out

    def series(self, split, metric):
        return [v for _, _, sp, m, v in self.records if sp == split and m == metric]


def train_loop(model, items, loss_fn, optimizer, schedule, cfg, validate=None, augment=None,
               on_step=None, on_epoch=None):
    """Train ``model`` on ``items`` and return a :class:`MetricsLog`.

    ``loss_fn(model, batch_items)`` must return a sum-reduced scalar so that
    accumulating ``accum_factor`` micro-batches of size ``batch_size`` matches
    one batch of ``accum_factor * batch_size``. ``augment(index, epoch)``
    optionally returns a fresh item for an utterance. ``validate(model)``
    returns a WER that also drives validation-based annealing.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    metrics = MetricsLog()
    history = []
    step = 0
    window = []
    n = len(items)
    if n == 0:
        raise ValidationError("no training items")
    done = False
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(n)
        micro = [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        for g in range(0, len(micro), cfg.accum_factor):
            optimizer.zero_grad()
            total, count = 0.0, 0
            for mb in micro[g:g + cfg.accum_factor]:
                batch = [augment(int(j), epoch) if augment else items[j] for j in mb]
                loss = loss_fn(model, batch)
                if not torch.isfinite(loss):
                    raise NonFiniteError(f"loss became {loss.item()} at epoch {epoch}, step {step + 1}")
                loss.backward()
                total += loss.item()
                count += len(mb)
            step += 1
            optimizer.step(lr_factor(schedule, step, history))
            window.append(total / count)
            if on_step is not None:
                on_step(step, model)
            if step % cfg.log_every == 0:
                metrics.add(epoch, step, "train", "loss", float(np.mean(window)))
                window = []
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        if window and (done or epoch == cfg.epochs):
            metrics.add(epoch, step, "train", "loss", float(np.mean(window)))
            window = []
        if validate is not None and (epoch % cfg.validate_every == 0 or done or epoch == cfg.epochs):
            wer = validate(model)
            history.append(wer)
            metrics.add(epoch, step, "valid", "wer", wer)
            log.info("epoch %d step %d valid wer %.2f", epoch, step, wer)
        if on_epoch is not None:
            on_epoch(epoch, step, metrics)
        if done:
            break
    model.eval()
    return metrics


def pad_batch(arrays, dtype):
    """Stack ragged (T_i, D) arrays into (B, T_max, D) plus lengths."""
    lengths = [a.shape[0] for a in arrays]
    out = np.zeros((len(arrays), max(lengths)) + arrays[0].shape[1:])
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
    return torch.as_tensor(out, dtype=dtype), lengths


def pad_tokens(seqs, pad_value):
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), pad_value, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out


def checkpoint_path(directory, epoch):
    return Path(directory) / f"epoch{epoch:03d}.ckpt"
