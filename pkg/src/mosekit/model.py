"""Bidirectional multi-exit encoder: RoPE, grouped-query full attention, shared exit heads."""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import Vocab

CHECK_MODE_ENV = "MOSEKIT_CHECK_MODE"
FORMAT_VERSION = 1
_MAGIC = b"MOSECKPT"


class ConfigError(ValueError):
    pass


def check_mode() -> bool:
    return os.environ.get(CHECK_MODE_ENV, "") not in ("", "0")


def default_dtype() -> torch.dtype:
    return torch.float64 if check_mode() else torch.float32


@dataclass
class EncoderConfig:
    vocab_size: int
    depth: int = 8
    exits: tuple[int, ...] = (1, 2, 4, 6, 8)
    hidden: int = 64
    n_heads: int = 4
    n_kv_heads: int = 2
    intermediate: int = 256
    rope_theta: float = 1e6
    max_seq: int = 128
    proj_dim: int = 32
    norm_eps: float = 1e-5

    def __post_init__(self):
        self.exits = tuple(int(e) for e in self.exits)

    @classmethod
    def full_scale(cls, vocab_size: int = 49152) -> "EncoderConfig":
        return cls(vocab_size=vocab_size, depth=36, exits=(4, 9, 18, 27, 36), hidden=1024,
                   n_heads=16, n_kv_heads=4, intermediate=12288, rope_theta=1e6,
                   max_seq=2048, proj_dim=1024)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    def problems(self) -> list[str]:
        out = []
        if self.depth < 1:
            out.append("depth must be >= 1")
        if not self.exits:
            out.append("exit set must be non-empty")
        if list(self.exits) != sorted(set(self.exits)):
            out.append("exit set must be strictly ascending")
        if self.exits and (min(self.exits) < 1 or max(self.exits) > self.depth):
            out.append(f"exit layers must lie in [1, depth={self.depth}]")
        if self.n_kv_heads < 1 or self.n_heads % self.n_kv_heads:
            out.append("n_heads must be divisible by n_kv_heads")
        if self.n_heads < 1 or self.hidden % self.n_heads:
            out.append("hidden must be divisible by n_heads")
        elif self.head_dim % 2:
            out.append("head dimension must be even for RoPE")
        if self.vocab_size < 6:
            out.append("vocab_size must be >= 6")
        return out

    def validate(self) -> "EncoderConfig":
        probs = self.problems()
        if probs:
            raise ConfigError("invalid EncoderConfig: " + "; ".join(probs))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["exits"] = list(self.exits)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


# --- RoPE --------------------------------------------------------------------

_ROPE_CACHE: dict = {}


def _rope_tables(positions: torch.Tensor, d: int, theta: float, dtype: torch.dtype):
    key = (tuple(positions.tolist()), d, theta, dtype)
    hit = _ROPE_CACHE.get(key)
    if hit is None:
        j = torch.arange(d // 2, dtype=torch.float64)
        freqs = theta ** (-2.0 * j / d)
        angles = positions.to(torch.float64)[:, None] * freqs[None, :]
        hit = (angles.cos().to(dtype), angles.sin().to(dtype))
        if len(_ROPE_CACHE) > 64:
            _ROPE_CACHE.clear()
        _ROPE_CACHE[key] = hit
    return hit


def rope_rotate(x: torch.Tensor, positions: torch.Tensor, theta: float) -> torch.Tensor:
    """Rotate consecutive feature pairs (2j, 2j+1) by ``pos * theta**(-2j/d)``.

    ``x`` is ``(..., L, d)``; ``positions`` is ``(L,)``.
    """
    d = x.shape[-1]
    if d % 2:
        raise ValueError(f"RoPE needs an even head dimension, got {d}")
    cos, sin = _rope_tables(positions, d, theta, x.dtype)
    pairs = x.unflatten(-1, (d // 2, 2))
    xe, xo = pairs[..., 0], pairs[..., 1]
    return torch.stack((xe * cos - xo * sin, xe * sin + xo * cos), dim=-1).flatten(-2)


# --- layers ------------------------------------------------------------------

class Attention(nn.Module):
    def __init__(self, cfg: EncoderConfig, **kw):
        super().__init__()
        hd = cfg.head_dim
        self.n_heads, self.n_kv_heads, self.head_dim = cfg.n_heads, cfg.n_kv_heads, hd
        self.theta = cfg.rope_theta
        self.q = nn.Linear(cfg.hidden, cfg.n_heads * hd, **kw)
        self.k = nn.Linear(cfg.hidden, cfg.n_kv_heads * hd, **kw)
        self.v = nn.Linear(cfg.hidden, cfg.n_kv_heads * hd, **kw)
        self.o = nn.Linear(cfg.n_heads * hd, cfg.hidden, **kw)


def gqa_attention(attn: Attention, x: torch.Tensor, valid_mask: torch.Tensor,
                  return_probs: bool = False):
    """Full bidirectional softmax attention; padded keys get -inf logits."""
    B, L, _ = x.shape
    hd = attn.head_dim
    q = attn.q(x).view(B, L, attn.n_heads, hd).transpose(1, 2)
    k = attn.k(x).view(B, L, attn.n_kv_heads, hd).transpose(1, 2)
    v = attn.v(x).view(B, L, attn.n_kv_heads, hd).transpose(1, 2)
    pos = torch.arange(L, device=x.device)
    q = rope_rotate(q, pos, attn.theta)
    k = rope_rotate(k, pos, attn.theta)
    if not return_probs:
        # fused kernel, same math as the explicit path below
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=valid_mask[:, None, None, :],
                                             enable_gqa=attn.n_heads != attn.n_kv_heads)
        return attn.o(out.transpose(1, 2).reshape(B, L, attn.n_heads * hd))
    group = attn.n_heads // attn.n_kv_heads
    k = k.repeat_interleave(group, dim=1)
    v = v.repeat_interleave(group, dim=1)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
    scores = scores.masked_fill(~valid_mask[:, None, None, :], float("-inf"))
    probs = torch.softmax(scores, dim=-1)
    out = (probs @ v).transpose(1, 2).reshape(B, L, attn.n_heads * hd)
    return attn.o(out), probs


class Block(nn.Module):
    def __init__(self, cfg: EncoderConfig, **kw):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.hidden, eps=cfg.norm_eps, **kw)
        self.attn = Attention(cfg, **kw)
        self.ln2 = nn.LayerNorm(cfg.hidden, eps=cfg.norm_eps, **kw)
        self.fc = nn.Linear(cfg.hidden, cfg.intermediate, **kw)
        self.proj = nn.Linear(cfg.intermediate, cfg.hidden, **kw)

    def forward(self, x, valid_mask):
        x = x + gqa_attention(self.attn, self.ln1(x), valid_mask)
        return x + self.proj(F.gelu(self.fc(self.ln2(x)), approximate="tanh"))


class ExitState(NamedTuple):
    hidden: torch.Tensor  # (B, L, H), after the shared final norm
    pooled: torch.Tensor  # (B, H), hidden at the [CLS] position


ExitStates = dict[int, ExitState]


class MultiExitEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, device=None, dtype=None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        kw = {"device": device, "dtype": dtype}
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.hidden, **kw)
        self.layers = nn.ModuleList(Block(cfg, **kw) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(cfg.hidden, eps=cfg.norm_eps, **kw)
        # one learned vector per exit, added before the shared MLM/ICC heads
        self.layer_emb = nn.Embedding(len(cfg.exits), cfg.hidden, **kw)
        self.mlm_head = nn.Linear(cfg.hidden, cfg.vocab_size, **kw)
        self.icc_head = nn.Linear(cfg.hidden, 1, **kw)
        self.proj_heads = nn.ModuleDict({str(e): nn.Linear(cfg.hidden, cfg.proj_dim, **kw) for e in cfg.exits})
        self.clone_heads = nn.ModuleDict({str(e): nn.Linear(cfg.hidden, 1, **kw) for e in cfg.exits})

    def exit_index(self, exit: int) -> int:
        try:
            return self.cfg.exits.index(exit)
        except ValueError:
            raise ValueError(f"layer {exit} is not an exit; exits are {list(self.cfg.exits)}") from None

    def forward(self, ids: torch.Tensor, valid_mask: torch.Tensor, up_to_exit: Optional[int] = None,
                cls_pos: Optional[torch.Tensor] = None) -> ExitStates:
        up_to_exit = self.cfg.exits[-1] if up_to_exit is None else up_to_exit
        self.exit_index(up_to_exit)
        if ids.shape[-1] > self.cfg.max_seq:
            raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_seq {self.cfg.max_seq}")
        valid_mask = valid_mask.bool()
        x = self.tok_emb(ids)
        rows = torch.arange(ids.shape[0], device=ids.device)
        cls_pos = torch.full_like(rows, ids.shape[1] - 1) if cls_pos is None else cls_pos
        states: ExitStates = {}
        for layer_no in range(1, up_to_exit + 1):
            x = self.layers[layer_no - 1](x, valid_mask)
            if layer_no in self.cfg.exits:
                h = self.final_norm(x)
                states[layer_no] = ExitState(h, h[rows, cls_pos])
        return states

    def layer_vector(self, exit: int) -> torch.Tensor:
        return self.layer_emb.weight[self.exit_index(exit)]


def forward(model: MultiExitEncoder, ids, valid_mask, up_to_exit: int) -> ExitStates:
    return model(ids, valid_mask, up_to_exit)


def _state(states: ExitStates, exit: int) -> ExitState:
    if exit not in states:
        raise ValueError(f"exit {exit} not present in ExitStates (have {sorted(states)})")
    return states[exit]


def exit_mlm_logits(model: MultiExitEncoder, states: ExitStates, exit: int,
                    positions: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Shared MLM head over ``hidden + layer_emb[exit]``.

    With a boolean ``positions`` mask only those rows are scored, giving ``(N, V)``
    instead of ``(B, L, V)``.
    """
    h = _state(states, exit).hidden
    if positions is not None:
        h = h[positions]
    return model.mlm_head(h + model.layer_vector(exit))


def exit_icc_logit(model: MultiExitEncoder, states: ExitStates, exit: int) -> torch.Tensor:
    return model.icc_head(_state(states, exit).pooled + model.layer_vector(exit)).squeeze(-1)


def exit_clone_logit(model: MultiExitEncoder, states: ExitStates, exit: int) -> torch.Tensor:
    model.exit_index(exit)
    return model.clone_heads[str(exit)](_state(states, exit).pooled).squeeze(-1)


def project(model: MultiExitEncoder, pooled: torch.Tensor, exit: int) -> torch.Tensor:
    """Per-exit linear projection followed by L2 normalisation."""
    model.exit_index(exit)
    if (pooled.norm(dim=-1) == 0).any():
        raise ValueError("cannot project a zero vector")
    z = model.proj_heads[str(exit)](pooled)
    n = z.norm(dim=-1, keepdim=True)
    if (n == 0).any():
        raise ValueError("projection produced a zero vector; cannot normalise")
    return z / n


# --- initialisation & checkpoints -------------------------------------------

@dataclass
class Checkpoint:
    config: EncoderConfig
    model: MultiExitEncoder
    step: int = 0
    vocab: Optional[Vocab] = None
    extra: dict = field(default_factory=dict)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.model.parameters()).dtype


def init(config: EncoderConfig, seed: int = 0, dtype: Optional[torch.dtype] = None,
         zero_layer_embedding: bool = False, vocab: Optional[Vocab] = None) -> Checkpoint:
    """Scaled-normal matrices, zero biases, unit norm gains; deterministic in ``seed``."""
    config.validate()
    dtype = dtype or default_dtype()
    model = MultiExitEncoder(config, dtype=dtype)
    gen = torch.Generator().manual_seed(seed)
    residual_scale = 1.0 / math.sqrt(2 * config.depth)
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if ".ln" in name or name.startswith("final_norm"):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            elif name.startswith("layer_emb") and zero_layer_embedding:
                p.zero_()
            else:
                std = 0.02
                if name.endswith("attn.o.weight") or name.endswith(".proj.weight"):
                    std *= residual_scale
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(dtype) * std)
    return Checkpoint(config, model, 0, vocab)


def count_parameters(config: EncoderConfig, include_task_heads: bool = True) -> int:
    """Exact parameter count, built on the meta device so nothing is allocated."""
    m = MultiExitEncoder(config, device="meta")
    n = sum(p.numel() for p in m.parameters())
    if not include_task_heads:
        n -= sum(p.numel() for p in m.proj_heads.parameters())
        n -= sum(p.numel() for p in m.clone_heads.parameters())
    return n


_DTYPES = {"float32": (torch.float32, "<f4"), "float64": (torch.float64, "<f8")}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Versioned container: magic, JSON header, raw little-endian tensors in header order."""
    dtype_name = "float64" if ckpt.dtype == torch.float64 else "float32"
    np_dtype = _DTYPES[dtype_name][1]
    state = ckpt.model.state_dict()
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "dtype": dtype_name,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
        "vocab": ckpt.vocab.itos if ckpt.vocab is not None else None,
        "extra": ckpt.extra,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_MAGIC + struct.pack("<I", len(raw)) + raw)
        for v in state.values():
            f.write(v.detach().cpu().numpy().astype(np_dtype).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", data, len(_MAGIC))
    off = len(_MAGIC) + 4
    header = json.loads(data[off:off + hlen])
    off += hlen
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {header['format_version']}")
    torch_dtype, np_dtype = _DTYPES[header["dtype"]]
    cfg = EncoderConfig.from_dict(header["config"])
    model = MultiExitEncoder(cfg, dtype=torch_dtype)
    state = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=np_dtype, count=n, offset=off).reshape(t["shape"])
        off += n * np.dtype(np_dtype).itemsize
        state[t["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    vocab = Vocab(header["vocab"]) if header.get("vocab") else None
    return Checkpoint(cfg, model, header["step"], vocab, header.get("extra", {}))
