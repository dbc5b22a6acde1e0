"""Toy-scale training: synthetic tasks, MLM masking, AdamW, LR schedule."""

from __future__ import annotations

import csv
import io
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .errors import DivergenceDetected, ShapeMismatch
from .model import Model, save_checkpoint


MASK_ID = 0
IGNORE_INDEX = -100
METRIC_FIELDS = ("step", "loss", "token_acc", "lr")
_EVAL_STREAM = 1_000_003


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def mask_tokens(ids, p: float, seed, vocab_size: int, mask_id: int = MASK_ID,
                ignore_index: int = IGNORE_INDEX):
    """BERT-style masking.

    Each position is selected with probability ``p``; selected positions are
    replaced by ``mask_id`` (80%), a random non-mask token (10%) or left
    unchanged (10%).  Labels hold the original id at selected positions and
    ``ignore_index`` elsewhere.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"mask probability {p} outside (0, 1)")
    rng = _rng(seed)
    ids = np.asarray(ids)
    selected = rng.random(ids.shape) < p
    labels = np.where(selected, ids, ignore_index)
    roll = rng.random(ids.shape)
    random_tokens = rng.integers(1, vocab_size, size=ids.shape)
    masked = ids.copy()
    masked[selected & (roll < 0.8)] = mask_id
    swap = selected & (roll >= 0.8) & (roll < 0.9)
    masked[swap] = random_tokens[swap]
    return masked, labels


def synth_batch(task: str, cfg: TrainConfig, seed, batch_size: int | None = None):
    """``(inputs, targets)`` of shape ``[B, seq_len]``; tokens drawn from ``[1, vocab)``."""
    rng = _rng(seed)
    B = cfg.batch_size if batch_size is None else batch_size
    seq = rng.integers(1, cfg.vocab_size, size=(B, cfg.seq_len))
    if task == "copy":
        return seq, seq.copy()
    if task == "reverse":
        return seq, seq[:, ::-1].copy()
    if task == "mlm_synthetic":
        return mask_tokens(seq, cfg.mask_prob, rng, cfg.vocab_size)
    raise ValueError(f"unknown task {task!r}")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> peak, then linear decay to ``final_lr_factor * peak``."""
    total = cfg.steps
    warm = int(round(cfg.warmup_frac * total))
    final = cfg.final_lr_factor * cfg.lr
    if total == 0:
        return 0.0
    if step < warm:
        return cfg.lr * step / warm
    if step >= total:
        return final
    frac = (step - warm) / (total - warm)
    return cfg.lr + (final - cfg.lr) * frac


@dataclass
class AdamWState:
    t: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params: dict) -> AdamWState:
        return cls(0, {k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})

    def as_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, d) -> AdamWState:
        return cls(int(d["t"]), dict(d["m"]), dict(d["v"]))


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float, cfg: TrainConfig):
    """One in-place decoupled-weight-decay Adam update.

    Weight decay shrinks weights directly by ``weight_decay * lr / peak_lr``
    (decay follows the schedule but not the gradient); moments are
    bias-corrected.
    """
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    decay = cfg.weight_decay * (lr / cfg.lr) if cfg.lr > 0 else 0.0
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeMismatch(f"{k}: param {p.shape}, grad {g.shape}, state {state.m[k].shape}")
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if decay:
            p *= 1.0 - decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state


def clip_grads(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


def loss_and_grads(model: Model, inputs, targets, rng=None):
    tape = ad.Tape()
    pv = model.bind(tape)
    logits = model.apply(tape, pv, inputs, rng=rng)
    loss = ad.cross_entropy(logits, targets, IGNORE_INDEX)
    tape.backward(loss)
    return float(loss.value), {k: v.grad for k, v in pv.items()}


def evaluate(model: Model, inputs, targets) -> tuple[float, float]:
    """Mean loss and token accuracy over non-ignored target positions."""
    tape = ad.Tape()
    logits = model.apply(tape, model.bind(tape, requires_grad=False), inputs)
    loss = float(ad.cross_entropy(logits, targets, IGNORE_INDEX).value)
    valid = targets != IGNORE_INDEX
    pred = logits.value.argmax(axis=-1)
    acc = float((pred == targets)[valid].mean()) if valid.any() else 0.0
    return loss, acc


def eval_batch(cfg: TrainConfig):
    return synth_batch(cfg.task, cfg, [cfg.seed, _EVAL_STREAM], cfg.eval_batch_size)


def format_metrics(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([r["step"], repr(r["loss"]), repr(r["token_acc"]), repr(r["lr"])])
    return buf.getvalue()


def train(model: Model, cfg: TrainConfig, out_dir=None, echo: bool = True) -> list[dict]:
    """Train in place; returns metric rows and writes ``metrics.csv`` / ``checkpoint.ckpt``.

    Deterministic for a fixed ``cfg.seed``: batch ``s`` comes from the seed
    sequence ``[seed, s]`` and dropout masks from ``[seed, s, 1]``.
    """
    if model.cfg.vocab_size < cfg.vocab_size or model.cfg.max_seq_len < cfg.seq_len:
        raise ShapeMismatch("model vocabulary/sequence length smaller than the task's")
    params = model.params
    state = (AdamWState.from_dict(model.optimizer_state) if model.optimizer_state
             else AdamWState.zeros(params))
    ev_in, ev_tgt = eval_batch(cfg)
    rows = []

    def record(step, lr):
        loss, acc = evaluate(model, ev_in, ev_tgt)
        rows.append({"step": step, "loss": loss, "token_acc": acc, "lr": lr})
        if echo:
            print(f"{step},{loss!r},{acc!r},{lr!r}", file=sys.stdout, flush=True)
        if not np.isfinite(loss):
            raise DivergenceDetected(f"eval loss became {loss} at step {step}")

    if echo:
        print(",".join(METRIC_FIELDS), flush=True)
    record(0, lr_at(0, cfg))
    for step in range(1, cfg.steps + 1):
        inputs, targets = synth_batch(cfg.task, cfg, [cfg.seed, step])
        drop_rng = np.random.default_rng([cfg.seed, step, 1])
        loss, grads = loss_and_grads(model, inputs, targets, drop_rng)
        if not np.isfinite(loss):
            raise DivergenceDetected(f"training loss became {loss} at step {step}")
        if cfg.grad_clip:
            clip_grads(grads, cfg.grad_clip)
        lr = lr_at(step, cfg)
        adamw_step(params, grads, state, lr, cfg)
        model.check_invertible()
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            record(step, lr)
    model.step += cfg.steps
    model.optimizer_state = state.as_dict()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(format_metrics(rows))
        save_checkpoint(model, out / "checkpoint.ckpt")
    return rows
