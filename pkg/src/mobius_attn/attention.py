"""Attention layers: vanilla heads, Mobius heads, mixed-head and dual-channel blocks.

Layer functions take a mapping from relative parameter names to tape
variables, e.g. ``"ln1.g"`` or ``"mob.0.a_re"``.  Linear maps are stored as
``x @ W + b`` with ``W`` of shape ``[d_in, d_out]``.  Complex parameters are
stored as separate ``*_re`` / ``*_im`` real arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .config import AttentionConfig
from .cvar import CVar, cadd, cdiv, cmatmul, cmul, collapse, cslice
from .errors import ConfigError, OddHeadDim, ShapeMismatch

Params = Mapping[str, ad.Variable]

MOBIUS_COEFFS = ("a", "b", "c", "d")


# ---------------------------------------------------------------------------
# Mobius heads
# ---------------------------------------------------------------------------

@dataclass
class MobiusHead:
    """Per-dimension Mobius query coefficients plus complex key/value weights."""

    a: CVar
    b: CVar
    c: CVar
    d: CVar
    wk: CVar
    wv: CVar
    wpre: CVar | None = None

    @classmethod
    def from_params(cls, P: Params, prefix: str) -> MobiusHead:
        def cv(name):
            return CVar(P[f"{prefix}{name}_re"], P[f"{prefix}{name}_im"])

        wpre = cv("wpre") if f"{prefix}wpre_re" in P else None
        return cls(*(cv(n) for n in MOBIUS_COEFFS), cv("wk"), cv("wv"), wpre)

    def coefficients(self) -> np.ndarray:
        """Complex array ``[4, d_head]`` of (a, b, c, d) values."""
        return np.stack([x.re.value + 1j * x.im.value for x in (self.a, self.b, self.c, self.d)])


def mobius_query(head: MobiusHead, rho: CVar, pole_eps: float = 0.0) -> CVar:
    """Elementwise ``(a rho + b) / (c rho + d)``.

    With a ``wpre`` matrix (the low-dimensional variant) ``rho`` first goes
    through that complex linear map.
    """
    if head.wpre is not None:
        rho = cmatmul(rho, head.wpre)
    num = cadd(cmul(head.a, rho), head.b)
    den = cadd(cmul(head.c, rho), head.d)
    return cdiv(num, den, pole_eps)


def complex_key_value(head: MobiusHead, rho: CVar, kv_policy: str = "diagonal") -> tuple[CVar, CVar]:
    if kv_policy == "diagonal":
        if head.wk.shape[-1] != rho.shape[-1]:
            raise ShapeMismatch(f"key weights {head.wk.shape} vs input {rho.shape}")
        return cmul(head.wk, rho), cmul(head.wv, rho)
    if kv_policy == "full":
        if head.wk.shape[-2] != rho.shape[-1]:
            raise ShapeMismatch(f"key weights {head.wk.shape} vs input {rho.shape}")
        return cmatmul(rho, head.wk), cmatmul(rho, head.wv)
    raise ConfigError(f"unknown kv_policy {kv_policy!r}")


def mobius_attention(Q: CVar, K: CVar, V: CVar, softmax_policy: str = "real_part",
                     conj_keys: bool = False, capture: list | None = None) -> CVar:
    """``softmax(reduce(Q K^T) / sqrt(d)) V`` with real weights and complex values.

    ``reduce`` is the real part (default) or the modulus.  ``conj_keys`` swaps
    the plain transpose for the conjugate transpose.
    """
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ShapeMismatch(f"Q {Q.shape}, K {K.shape}, V {V.shape}")
    scale = 1.0 / math.sqrt(Q.shape[-1])
    krt, kit = K.re.T, K.im.T
    if conj_keys:
        o_re = Q.re @ krt + Q.im @ kit
    else:
        o_re = Q.re @ krt - Q.im @ kit
    if softmax_policy == "real_part":
        logits = o_re * scale
    elif softmax_policy == "magnitude":
        o_im = (Q.im @ krt - Q.re @ kit) if conj_keys else (Q.re @ kit + Q.im @ krt)
        logits = ad.sqrt(ad.clamp_min(o_re * o_re + o_im * o_im, 1e-300)) * scale
    else:
        raise ConfigError(f"unknown softmax_policy {softmax_policy!r}")
    S = ad.softmax_rows(logits)
    if capture is not None:
        capture.append(S.value)
    return CVar(S @ V.re, S @ V.im)


# ---------------------------------------------------------------------------
# vanilla heads
# ---------------------------------------------------------------------------

def scaled_dot_attention(q, k, v, capture: list | None = None):
    S = ad.softmax_rows((q @ k.T) * (1.0 / math.sqrt(q.shape[-1])))
    if capture is not None:
        capture.append(S.value)
    return S @ v


def rotary_tables(n: int, d_head: int):
    if d_head % 2:
        raise OddHeadDim(f"rotary positions need an even head dimension, got {d_head}")
    theta = 10000.0 ** (-2.0 * np.arange(d_head // 2) / d_head)
    ang = np.arange(n)[:, None] * theta[None, :]
    cos = np.repeat(np.cos(ang), 2, axis=-1)
    sin = np.repeat(np.sin(ang), 2, axis=-1)
    rot = np.zeros((d_head, d_head))
    idx = np.arange(0, d_head, 2)
    rot[idx + 1, idx] = -1.0
    rot[idx, idx + 1] = 1.0
    return cos, sin, rot


def apply_rotary(Q, K, positions=None):
    """Rotate consecutive pairs ``(2i, 2i+1)`` by ``p * 10000**(-2i/d)``.

    Works on numpy arrays or tape variables of shape ``[..., n, d_head]``.
    """
    n, dh = Q.shape[-2], Q.shape[-1]
    positions = np.arange(n) if positions is None else np.asarray(positions)
    if dh % 2:
        raise OddHeadDim(f"rotary positions need an even head dimension, got {dh}")
    cos, sin, rot = rotary_tables(int(positions.max()) + 1, dh)
    cos, sin = cos[positions], sin[positions]

    def rotate(x):
        return x * cos + (x @ rot) * sin

    return rotate(Q), rotate(K)


def vanilla_attention(x, wq, bq, wk, bk, wv, bv, rotary: bool = False, capture=None):
    """Single head of standard scaled dot-product attention with learned projections."""
    q, k, v = x @ wq + bq, x @ wk + bk, x @ wv + bv
    if rotary:
        q, k = apply_rotary(q, k)
    return scaled_dot_attention(q, k, v, capture)


def _vanilla_heads(x, P: Params, n_heads: int, dh: int, rotary: bool, capture):
    q = x @ P["van.q.w"] + P["van.q.b"]
    k = x @ P["van.k.w"] + P["van.k.b"]
    v = x @ P["van.v.w"] + P["van.v.b"]
    outs = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = (ad.slice_(t, lo, hi) for t in (q, k, v))
        if rotary:
            qh, kh = apply_rotary(qh, kh)
        sink = [] if capture is not None else None
        outs.append(scaled_dot_attention(qh, kh, vh, sink))
        if sink:
            capture.append({"kind": "vanilla", "head": h, "weights": sink[0]})
    return outs


def _mobius_heads(Ip: CVar, P: Params, n_heads: int, cfg: AttentionConfig, capture):
    dh = cfg.d_head
    outs = []
    for h in range(n_heads):
        head = MobiusHead.from_params(P, f"mob.{h}.")
        rho = cslice(Ip, h * dh, (h + 1) * dh)
        Q = mobius_query(head, rho, cfg.pole_eps)
        K, V = complex_key_value(head, rho, cfg.kv_policy)
        sink = [] if capture is not None else None
        outs.append(mobius_attention(Q, K, V, cfg.softmax_policy, cfg.conj_keys, sink))
        if sink:
            capture.append({"kind": "mobius", "head": h, "weights": sink[0]})
    return outs


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def dropout(x, rate: float, rng: np.random.Generator | None):
    if rng is None or rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask


def linear(x, P: Params, name: str):
    return x @ P[f"{name}.w"] + P[f"{name}.b"]


def layer_norm(x, P: Params, name: str):
    return ad.layer_norm(x, P[f"{name}.g"], P[f"{name}.b"])


def feed_forward(x, P: Params, name: str, rate: float, rng):
    h = ad.gelu(linear(x, P, f"{name}.in"))
    return dropout(linear(h, P, f"{name}.out"), rate, rng)


def _post_attention(a_joined, residual, P: Params, rate: float, rng, proj="out", ffn="ffn"):
    a1 = dropout(linear(a_joined, P, proj), rate, rng)
    a1 = layer_norm(a1 + residual, P, "ln2")
    a2 = feed_forward(a1, P, ffn, rate, rng)
    return layer_norm(a2 + a1, P, "ln3")


def vanilla_block(x, P: Params, cfg: AttentionConfig, rng=None, capture=None):
    """Standard post-norm encoder block over a real input."""
    rotary = cfg.positional == "rotary"
    heads = _vanilla_heads(x, P, cfg.n_heads, cfg.d_head, rotary, capture)
    return _post_attention(ad.concat(heads), x, P, cfg.dropout, rng)


def mixed_head_layer(I: CVar, P: Params, cfg: AttentionConfig, rng=None, capture=None):
    """Mixed Mobius/vanilla block; returns a real ``[..., n, d_model]`` tensor.

    Shared LN1 on both channels, Mobius heads on the complex input, vanilla
    heads on the summed channels, Mobius outputs collapsed by channel
    addition and concatenated after the vanilla heads, then the usual
    projection, residual (real channel), LN2, feed-forward, residual, LN3.
    """
    if I.shape[-1] != cfg.d_model:
        raise ShapeMismatch(f"input width {I.shape[-1]} != d_model {cfg.d_model}")
    Ip = CVar(layer_norm(I.re, P, "ln1"), layer_norm(I.im, P, "ln1"))
    parts = []
    if cfg.vanilla_heads:
        parts += _vanilla_heads(Ip.re + Ip.im, P, cfg.vanilla_heads, cfg.d_head,
                                cfg.positional == "rotary", capture)
    if cfg.mobius_heads:
        parts += [collapse(a) for a in _mobius_heads(Ip, P, cfg.mobius_heads, cfg, capture)]
    return _post_attention(ad.concat(parts), Ip.re, P, cfg.dropout, rng)


def dual_channel_layer(I: CVar, P: Params, cfg: AttentionConfig, rng=None, capture=None) -> CVar:
    """All-Mobius block keeping separate real/imaginary projections and FFNs."""
    if cfg.n_mobius_heads is not None and cfg.n_mobius_heads != cfg.n_heads:
        raise ConfigError("dual-channel layers have no vanilla heads")
    if I.shape[-1] != cfg.d_model:
        raise ShapeMismatch(f"input width {I.shape[-1]} != d_model {cfg.d_model}")
    Ip = CVar(layer_norm(I.re, P, "ln1"), layer_norm(I.im, P, "ln1"))
    heads = _mobius_heads(Ip, P, cfg.n_heads, cfg, capture)
    A_r = ad.concat([h.re for h in heads])
    A_i = ad.concat([h.im for h in heads])
    a1_r = layer_norm(dropout(linear(A_r, P, "out_r"), cfg.dropout, rng) + Ip.re, P, "ln2")
    a1_i = layer_norm(dropout(linear(A_i, P, "out_i"), cfg.dropout, rng) + Ip.im, P, "ln2")
    a2_r = feed_forward(a1_r, P, "ffn_r", cfg.dropout, rng) + a1_r
    a2_i = feed_forward(a1_i, P, "ffn_i", cfg.dropout, rng) + a1_i
    return CVar(layer_norm(a2_r, P, "ln3"), layer_norm(a2_i, P, "ln3"))


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_mobius_head(rng: np.random.Generator, cfg: AttentionConfig, std: float,
                     mobius_std: float = 0.02) -> dict[str, np.ndarray]:
    """Near-identity Mobius coefficients; key/value weights per ``kv_policy``."""
    dh = cfg.d_head
    p = {}
    for name in MOBIUS_COEFFS:
        base = 1.0 if name in ("a", "d") else 0.0
        p[f"{name}_re"] = base + mobius_std * rng.standard_normal(dh)
        p[f"{name}_im"] = mobius_std * rng.standard_normal(dh)
    for name in ("wk", "wv"):
        if cfg.kv_policy == "diagonal":
            p[f"{name}_re"] = 1.0 + std * rng.standard_normal(dh)
            p[f"{name}_im"] = std * rng.standard_normal(dh)
        else:
            p[f"{name}_re"] = std * rng.standard_normal((dh, dh))
            p[f"{name}_im"] = std * rng.standard_normal((dh, dh))
    if cfg.query_policy == "linear_then_mobius":
        p["wpre_re"] = np.eye(dh) + std * rng.standard_normal((dh, dh))
        p["wpre_im"] = std * rng.standard_normal((dh, dh))
    return p


def _lin(rng, d_in, d_out, std):
    return {"w": std * rng.standard_normal((d_in, d_out)), "b": np.zeros(d_out)}


def _ln(d):
    return {"g": np.ones(d), "b": np.zeros(d)}


def _flat(prefix, d):
    return {f"{prefix}.{k}": v for k, v in d.items()}


def init_layer(kind: str, cfg: AttentionConfig, d_ff: int, rng: np.random.Generator,
               std: float = 0.02) -> dict[str, np.ndarray]:
    """Fresh parameters for one block of the given kind (relative names)."""
    d = cfg.d_model
    p: dict[str, np.ndarray] = {}
    if kind != "vanilla":
        p.update(_flat("ln1", _ln(d)))
    n_van = {"vanilla": cfg.n_heads, "mobius_mixed": cfg.vanilla_heads, "mobius_dual": 0}[kind]
    n_mob = {"vanilla": 0, "mobius_mixed": cfg.mobius_heads, "mobius_dual": cfg.n_heads}[kind]
    if n_van:
        for t in "qkv":
            p.update(_flat(f"van.{t}", _lin(rng, d, n_van * cfg.d_head, std)))
    for h in range(n_mob):
        p.update(_flat(f"mob.{h}", init_mobius_head(rng, cfg, std)))
    if kind == "mobius_dual":
        for ch in ("r", "i"):
            p.update(_flat(f"out_{ch}", _lin(rng, d, d, std)))
        p.update(_flat("ln2", _ln(d)))
        for ch in ("r", "i"):
            p.update(_flat(f"ffn_{ch}.in", _lin(rng, d, d_ff, std)))
            p.update(_flat(f"ffn_{ch}.out", _lin(rng, d_ff, d, std)))
    else:
        p.update(_flat("out", _lin(rng, d, d, std)))
        p.update(_flat("ln2", _ln(d)))
        p.update(_flat("ffn.in", _lin(rng, d, d_ff, std)))
        p.update(_flat("ffn.out", _lin(rng, d_ff, d, std)))
    p.update(_flat("ln3", _ln(d)))
    return p
