"""Loss functions and the depth-weighted multi-exit combination."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import torch
import torch.nn.functional as F

IGNORE = -100
DEFAULT_TEMPERATURE = 10.0
# "temperature" multiplies cosine similarities (10.0 == dividing by 0.1);
# flip to False to read it as a divisor instead.
TEMPERATURE_IS_MULTIPLIER = True


@dataclass
class ExitLossBreakdown:
    per_exit: dict[int, torch.Tensor]
    weights: dict[int, float]
    total: torch.Tensor

    def to_log(self) -> dict:
        return {
            "per_exit": {str(k): float(v.detach()) for k, v in self.per_exit.items()},
            "alpha": {str(k): w for k, w in self.weights.items()},
            "loss": float(self.total.detach()),
        }


def depth_weights(exits: Sequence[int], depth: int) -> dict[int, float]:
    """alpha_i = i / depth, so the last layer has weight 1."""
    return {int(e): e / depth for e in exits}


def mlm_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over labelled positions (``labels != IGNORE``).

    ``logits`` may already be restricted to the labelled rows, in which case
    ``labels`` is the matching 1-D vector. With no targets the loss is 0.
    """
    if logits.dim() == labels.dim() + 1 and logits.shape[:-1] == labels.shape:
        logits, labels = logits.reshape(-1, logits.shape[-1]), labels.reshape(-1)
    keep = labels != IGNORE
    if not keep.any():
        return logits.sum() * 0.0
    return F.cross_entropy(logits[keep], labels[keep])


def icc_loss(logit: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy; label 1 = same repository (or next / clone)."""
    return F.binary_cross_entropy_with_logits(logit, label.to(logit.dtype))


def pretrain_loss_per_exit(mlm: torch.Tensor, icc: torch.Tensor) -> torch.Tensor:
    return mlm + icc


def multilayer_combine(losses: Mapping[int, torch.Tensor], depth: int,
                       exits: Optional[Sequence[int]] = None,
                       weights: Optional[Mapping[int, float]] = None) -> ExitLossBreakdown:
    exits = sorted(losses) if exits is None else list(exits)
    missing = set(exits) - set(losses)
    if missing:
        raise ValueError(f"missing loss for exits {sorted(missing)}")
    extra = set(losses) - set(exits)
    if extra:
        raise ValueError(f"losses given for non-exit layers {sorted(extra)}")
    w = depth_weights(exits, depth) if weights is None else {int(k): float(v) for k, v in weights.items()}
    total = None
    for e in exits:
        term = losses[e] * w[e]
        total = term if total is None else total + term
    return ExitLossBreakdown({e: losses[e] for e in exits}, {e: w[e] for e in exits}, total)


def similarity_logits(emb_a: torch.Tensor, emb_b: torch.Tensor,
                      temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    sim = emb_a @ emb_b.T
    return sim * temperature if TEMPERATURE_IS_MULTIPLIER else sim / temperature


def clip_contrastive(emb_a: torch.Tensor, emb_b: torch.Tensor,
                     temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Symmetric in-batch cross-entropy; row i of ``emb_a`` matches row i of ``emb_b``."""
    if emb_a.shape != emb_b.shape:
        raise ValueError(f"batch shapes differ: {tuple(emb_a.shape)} vs {tuple(emb_b.shape)}")
    if emb_a.shape[0] < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 (no negatives otherwise)")
    logits = similarity_logits(emb_a, emb_b, temperature)
    target = torch.arange(logits.shape[0], device=logits.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def finetune_loss(emb_a: Mapping[int, torch.Tensor], emb_b: Mapping[int, torch.Tensor],
                  depth: int, temperature: float = DEFAULT_TEMPERATURE,
                  weights: Optional[Mapping[int, float]] = None) -> ExitLossBreakdown:
    losses = {e: clip_contrastive(emb_a[e], emb_b[e], temperature) for e in emb_a}
    return multilayer_combine(losses, depth, weights=weights)


def clone_loss(logits: Mapping[int, torch.Tensor], labels: torch.Tensor, depth: int,
               weights: Optional[Mapping[int, float]] = None) -> ExitLossBreakdown:
    if labels is None or (isinstance(labels, torch.Tensor) and labels.isnan().any()):
        raise ValueError("clone loss needs a label for every pair")
    losses = {e: icc_loss(l, labels) for e, l in logits.items()}
    return multilayer_combine(losses, depth, weights=weights)
