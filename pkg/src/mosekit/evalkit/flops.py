"""Analytic forward-pass FLOPs per exit. A multiply-add counts as 2 operations."""

from __future__ import annotations

from ..model import EncoderConfig


def matmul_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def layer_flops(cfg: EncoderConfig, seq_len: int) -> int:
    s, h, hd = seq_len, cfg.hidden, cfg.head_dim
    q_width, kv_width = cfg.n_heads * hd, cfg.n_kv_heads * hd
    attn = (matmul_flops(s, h, q_width)            # Q
            + 2 * matmul_flops(s, h, kv_width)     # K, V (grouped)
            + cfg.n_heads * matmul_flops(s, hd, s)  # logits
            + cfg.n_heads * matmul_flops(s, s, hd)  # weighted sum
            + matmul_flops(s, q_width, h))         # output projection
    mlp = matmul_flops(s, h, cfg.intermediate) + matmul_flops(s, cfg.intermediate, h)
    return attn + mlp


def exit_head_flops(cfg: EncoderConfig) -> int:
    # projection of the single pooled [CLS] vector
    return matmul_flops(1, cfg.hidden, cfg.proj_dim)


def flops_per_exit(cfg: EncoderConfig, seq_len: int) -> dict[int, float]:
    """GFLOPs of one forward pass stopped at each exit."""
    per_layer = layer_flops(cfg, seq_len)
    return {e: (e * per_layer + exit_head_flops(cfg)) / 1e9 for e in cfg.exits}
