"""Finite-difference gradient checks for single layers and whole models.

Losses are ``sum(output * R)`` with a fixed Gaussian ``R`` so every output
entry contributes with an O(1) weight.  Parameters are jittered away from
their structured initial values (unit gains, zero biases) before checking.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .attention import dual_channel_layer, init_layer, mixed_head_layer, vanilla_block
from .config import AttentionConfig, ModelConfig
from .cvar import CVar
from .model import Model

JITTER = 0.1
# errors of entries far below the peak gradient are measured against
# 1e-3 * max|g| (see autodiff.grad_check)
FLOOR_FRAC = 1e-3


def _jitter(params: dict, rng: np.random.Generator, scale: float = JITTER) -> OrderedDict:
    return OrderedDict((k, v + scale * rng.standard_normal(v.shape)) for k, v in params.items())


def _expand_probe(pv: dict, shapes: dict) -> dict:
    # vector parameters probed as [P, d] must broadcast against [1, n, d]
    out = {}
    for k, v in pv.items():
        if v.ndim == 2 and len(shapes[k]) == 1:
            v = v.reshape(v.shape[0], 1, shapes[k][0])
        out[k] = v
    return out


def layer_setup(kind: str, n: int = 8, d_model: int = 32, n_heads: int = 4, seed: int = 0, **attn):
    """Jittered layer parameters, a complex (or real) input and a loss weighting."""
    cfg = AttentionConfig(d_model=d_model, n_heads=n_heads, dropout=0.0, **attn)
    rng = np.random.default_rng(seed)
    params = _jitter(init_layer(kind, cfg, 4 * d_model, rng, std=0.2), rng)
    x_re = rng.standard_normal((1, n, d_model))
    x_im = rng.standard_normal((1, n, d_model))
    R = rng.standard_normal((1, n, d_model))
    return cfg, params, (x_re, x_im), R


def layer_loss_fn(kind: str, cfg: AttentionConfig, inputs, R, shapes):
    x_re, x_im = inputs

    def fn(tape: ad.Tape, pv):
        P = _expand_probe(pv, shapes)
        if kind == "vanilla":
            out = vanilla_block(tape.constant(x_re), P, cfg)
        else:
            I = CVar(tape.constant(x_re), tape.constant(x_im))
            if kind == "mobius_mixed":
                out = mixed_head_layer(I, P, cfg)
            else:
                o = dual_channel_layer(I, P, cfg)
                # weight the channels differently so both adjoint paths are exercised
                out = o.re + o.im * 0.5
        return (out * tape.constant(R)).sum(axis=(-2, -1))

    return fn


def layer_grad_check(kind: str, n: int = 8, d_model: int = 32, n_heads: int = 4, seed: int = 0,
                     h: float = 1e-6, tol: float = 1e-5, floor_frac: float = FLOOR_FRAC,
                     **attn) -> ad.GradCheckReport:
    cfg, params, inputs, R = layer_setup(kind, n, d_model, n_heads, seed, **attn)
    shapes = {k: v.shape for k, v in params.items()}
    fn = layer_loss_fn(kind, cfg, inputs, R, shapes)
    return ad.grad_check(fn, params, h=h, tol=tol, vectorized=True, floor_frac=floor_frac)


def tiny_model_config(layout: str = "framed", n_layers: int = 3, d_model: int = 32, n_heads: int = 4,
                      vocab_size: int = 32, max_seq_len: int = 8, seed: int = 0, **attn) -> ModelConfig:
    acfg = AttentionConfig(d_model=d_model, n_heads=n_heads, dropout=0.0, **attn)
    if layout == "vanilla":
        return ModelConfig(vocab_size=vocab_size, max_seq_len=max_seq_len, n_layers=n_layers,
                           placement="custom", layer_kinds=("vanilla",) * n_layers, seed=seed,
                           attention=acfg)
    return ModelConfig(vocab_size=vocab_size, max_seq_len=max_seq_len, n_layers=n_layers,
                       placement=layout, seed=seed, attention=acfg)


def model_loss_fn(model: Model, ids, R):
    def fn(tape: ad.Tape, pv):
        logits = model.apply(tape, pv, ids)
        return (logits * tape.constant(R)).sum(axis=(-2, -1))

    return fn


def model_grad_check(cfg: ModelConfig, n: int = 8, seed: int = 0, h: float = 1e-6,
                     tol: float = 1e-5, floor_frac: float = FLOOR_FRAC) -> ad.GradCheckReport:
    """Check every parameter of a model on one random sequence of length ``n``."""
    rng = np.random.default_rng(seed)
    model = Model(cfg)
    model.params = _jitter(model.params, rng)
    ids = rng.integers(0, cfg.vocab_size, size=(1, n))
    R = rng.standard_normal((1, n, cfg.vocab_size))
    return ad.grad_check(model_loss_fn(model, ids, R), model.params, h=h, tol=tol, vectorized=True,
                         floor_frac=floor_frac)


def group_errors(report: ad.GradCheckReport) -> "OrderedDict[str, float]":
    """Max relative error per parameter group (``embed``, ``layers.i``, ``head`` or top name)."""
    groups: OrderedDict[str, float] = OrderedDict()
    for name, err in report.per_param.items():
        parts = name.split(".")
        g = ".".join(parts[:2]) if parts[0] == "layers" else parts[0]
        groups[g] = max(groups.get(g, 0.0), err)
    return groups
