"""Encoder assembly, parameter counting and checkpoint files."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import dropout, dual_channel_layer, init_layer, mixed_head_layer, vanilla_block
from .complex_core import ComplexTensor
from .config import ModelConfig
from .cvar import CVar, collapse
from .errors import (CorruptFile, InvertibilityViolation, OutOfVocab, SequenceTooLong,
                     ShapeMismatch, VersionMismatch)

CHECKPOINT_MAGIC = b"MOBATTCK"
CHECKPOINT_VERSION = 1
DET_MIN = 1e-12


class Model:
    """Parameters plus the layer stack described by a :class:`ModelConfig`."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.kinds = cfg.kinds()
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        self.step = 0
        self.optimizer_state = None
        fresh = self._init_params(np.random.default_rng(cfg.seed))
        if params is None:
            self.params = fresh
        else:
            if set(params) != set(fresh):
                missing = sorted(set(fresh) ^ set(params))
                raise ShapeMismatch(f"parameter names differ from config: {missing[:5]}")
            for k, v in fresh.items():
                if params[k].shape != v.shape:
                    raise ShapeMismatch(f"{k}: {params[k].shape} != {v.shape}")
                self.params[k] = np.asarray(params[k], dtype=np.float64)
        self.shapes = {k: v.shape for k, v in self.params.items()}

    # -- construction ---------------------------------------------------

    def _init_params(self, rng) -> OrderedDict:
        cfg, d, std = self.cfg, self.cfg.d_model, self.cfg.init_std
        p = OrderedDict()
        p["embed.tok"] = std * rng.standard_normal((cfg.vocab_size, d))
        p["embed.pos"] = std * rng.standard_normal((cfg.max_seq_len, d))
        if self.kinds[0] == "vanilla":
            p["embed.ln.g"] = np.ones(d)
            p["embed.ln.b"] = np.zeros(d)
        for i, kind in enumerate(self.kinds):
            for k, v in init_layer(kind, cfg.attention, cfg.ffn_dim, rng, std).items():
                p[f"layers.{i}.{k}"] = v
        p["head.dense.w"] = std * rng.standard_normal((d, d))
        p["head.dense.b"] = np.zeros(d)
        p["head.ln.g"] = np.ones(d)
        p["head.ln.b"] = np.zeros(d)
        if not cfg.tie_embeddings:
            p["head.decoder.w"] = std * rng.standard_normal((d, cfg.vocab_size))
        p["head.decoder.b"] = np.zeros(cfg.vocab_size)
        return p

    def mobius_head_prefixes(self):
        """Yield ``(layer, head, prefix)`` for every Mobius head."""
        for i, kind in enumerate(self.kinds):
            if kind == "vanilla":
                continue
            n = self.cfg.attention.n_heads if kind == "mobius_dual" else self.cfg.attention.mobius_heads
            for h in range(n):
                yield i, h, f"layers.{i}.mob.{h}."

    def mobius_coefficients(self, layer: int, head: int) -> np.ndarray:
        """Complex ``[4, d_head]`` array of (a, b, c, d)."""
        pre = f"layers.{layer}.mob.{head}."
        return np.stack([self.params[f"{pre}{c}_re"] + 1j * self.params[f"{pre}{c}_im"]
                         for c in "abcd"])

    def min_mobius_det(self) -> float:
        dets = [np.abs(m[0] * m[3] - m[1] * m[2]).min()
                for m in (self.mobius_coefficients(i, h) for i, h, _ in self.mobius_head_prefixes())]
        return float(min(dets)) if dets else float("inf")

    def check_invertible(self):
        det = self.min_mobius_det()
        if not det > DET_MIN:
            raise InvertibilityViolation(f"Mobius |det| fell to {det:.3e}")

    # -- forward ----------------------------------------------------------

    def bind(self, tape: ad.Tape, requires_grad: bool = True) -> dict[str, ad.Variable]:
        return {k: tape.leaf(v, requires_grad, name=k) for k, v in self.params.items()}

    def _expand(self, pv: dict[str, ad.Variable]) -> dict[str, ad.Variable]:
        # a parameter with an extra leading probe axis: vectors become [P, 1, d]
        out = {}
        for k, v in pv.items():
            base = self.shapes[k]
            if v.ndim == len(base) + 1 and len(base) == 1:
                v = v.reshape(v.shape[0], 1, base[0])
            out[k] = v
        return out

    def apply(self, tape: ad.Tape, pv: dict[str, ad.Variable], token_ids, rng=None,
              capture: list | None = None) -> ad.Variable:
        """Logits ``[B, n, vocab]`` recorded on ``tape``.

        ``rng`` enables dropout; ``capture`` collects post-softmax attention
        matrices as dicts with layer, head, kind and weights.
        """
        cfg, acfg = self.cfg, self.cfg.attention
        ids = _as_batch(token_ids)
        P = self._expand(pv)
        tok, pos = embed(P["embed.tok"], P["embed.pos"], ids, cfg.vocab_size, cfg.max_seq_len)
        if self.kinds[0] == "vanilla":
            x = tok if acfg.positional == "rotary" else tok + pos
            x = ad.layer_norm(x, P["embed.ln.g"], P["embed.ln.b"])
            x = dropout(x, acfg.dropout, rng)
        else:
            x = None
        for i, kind in enumerate(self.kinds):
            lp = _Prefixed(P, f"layers.{i}.")
            sink = [] if capture is not None else None
            if kind == "vanilla":
                x = vanilla_block(x, lp, acfg, rng, sink)
            else:
                I = build_complex_input(tok, pos) if i == 0 else build_last_layer_input(x, tok)
                if kind == "mobius_mixed":
                    x = mixed_head_layer(I, lp, acfg, rng, sink)
                else:
                    x = collapse(dual_channel_layer(I, lp, acfg, rng, sink))
            if sink:
                for rec in sink:
                    rec["layer"] = i
                capture.extend(sink)
        h = ad.gelu(x @ P["head.dense.w"] + P["head.dense.b"])
        h = ad.layer_norm(h, P["head.ln.g"], P["head.ln.b"])
        dec = P["embed.tok"].T if cfg.tie_embeddings else P["head.decoder.w"]
        return h @ dec + P["head.decoder.b"]


class _Prefixed:
    """Read-only view of a parameter dict under a name prefix."""

    def __init__(self, params, prefix):
        self._p, self._prefix = params, prefix

    def __getitem__(self, key):
        return self._p[self._prefix + key]

    def __contains__(self, key):
        return self._prefix + key in self._p


def _as_batch(token_ids) -> np.ndarray:
    ids = np.asarray(token_ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeMismatch(f"token ids must be an integer [n] or [B, n] array, got {ids.shape}")
    return ids


def embed(tok_table, pos_table, ids, vocab_size: int, max_len: int):
    """Token rows ``[B, n, d]`` and position rows ``[1, n, d]``."""
    ids = _as_batch(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise OutOfVocab(f"token ids must lie in [0, {vocab_size})")
    n = ids.shape[-1]
    if n > max_len:
        raise SequenceTooLong(f"sequence length {n} > max_seq_len {max_len}")
    tok = ad.gather(tok_table, ids)
    pos = ad.gather(pos_table, np.arange(n)[None, :])
    return tok, pos


def build_complex_input(tok, pos) -> CVar:
    """Token embeddings on the real channel, position embeddings on the imaginary one."""
    return CVar(tok, pos)


def build_last_layer_input(prev_output, first_layer_token_reals) -> CVar:
    """Previous layer output on the real channel, cached raw token embeddings on the imaginary."""
    if prev_output.shape[-2:] != first_layer_token_reals.shape[-2:]:
        raise ShapeMismatch(f"{prev_output.shape} vs {first_layer_token_reals.shape}")
    return CVar(prev_output, first_layer_token_reals)


def collapse_to_real(O):
    """``O_r + O_i`` for a :class:`ComplexTensor` or a tape :class:`CVar`."""
    if isinstance(O, ComplexTensor):
        return O.real_part + O.imag_part
    return collapse(O)


def forward(model: Model, token_ids, capture: list | None = None) -> np.ndarray:
    """Inference logits (no dropout) as a numpy array ``[n, vocab]`` or ``[B, n, vocab]``."""
    tape = ad.Tape()
    out = model.apply(tape, model.bind(tape, requires_grad=False), token_ids, capture=capture)
    logits = out.value
    return logits[0] if np.asarray(token_ids).ndim == 1 else logits


def count_parameters(model: Model) -> dict[str, int]:
    """Per-module scalar counts plus ``total``.

    Complex tensors are stored as separate real and imaginary arrays, so
    each complex entry counts twice.
    """
    counts: dict[str, int] = OrderedDict()
    for k, v in model.params.items():
        parts = k.split(".")
        group = f"layers.{parts[1]}" if parts[0] == "layers" else parts[0]
        counts[group] = counts.get(group, 0) + int(v.size)
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path, step: int | None = None, optimizer_state=None):
    """Write a versioned header, a JSON manifest and raw little-endian float64 payloads."""
    step = model.step if step is None else step
    optimizer_state = model.optimizer_state if optimizer_state is None else optimizer_state
    tensors = list(model.params.items())
    opt_meta = None
    if optimizer_state is not None:
        opt_meta = {"t": int(optimizer_state["t"])}
        tensors += [(f"opt.m/{k}", v) for k, v in optimizer_state["m"].items()]
        tensors += [(f"opt.v/{k}", v) for k, v in optimizer_state["v"].items()]
    manifest, offset = [], 0
    for name, arr in tensors:
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps({"config": model.cfg.to_dict(), "step": int(step), "optimizer": opt_meta,
                         "tensors": manifest, "payload_bytes": offset}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:8] != CHECKPOINT_MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(data[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header") from exc
    payload = data[20 + hlen:]
    if len(payload) != header.get("payload_bytes"):
        raise CorruptFile(f"{path}: payload is {len(payload)} bytes, "
                          f"manifest expects {header.get('payload_bytes')}")
    arrays = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        chunk = payload[t["offset"]:t["offset"] + 8 * n]
        if len(chunk) != 8 * n:
            raise CorruptFile(f"{path}: tensor {t['name']} truncated")
        arrays[t["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(t["shape"]).astype(np.float64)
    cfg = ModelConfig.from_dict(header["config"])
    params = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    model = Model(cfg, params)
    model.step = header["step"]
    if header.get("optimizer"):
        model.optimizer_state = {
            "t": header["optimizer"]["t"],
            "m": {k[len("opt.m/"):]: v for k, v in arrays.items() if k.startswith("opt.m/")},
            "v": {k[len("opt.v/"):]: v for k, v in arrays.items() if k.startswith("opt.v/")},
        }
    return model
