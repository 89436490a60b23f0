"""Per-exit evaluation of a checkpoint: retrieval, clone detection, pre-training accuracy."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from ..model import Checkpoint, exit_icc_logit, exit_mlm_logits
from ..objectives import IGNORE
from ..packing import RepoIndex
from ..training import (ClonePair, TrainPlan, c2c_query, clone_logits, collate, embed_texts, pack_clone_pairs,
                        pretrain_batch, t2c_query)
from .flops import flops_per_exit
from .index import build_index, search
from .metrics import RankedList, map_multi, mrr, ndcg_binary, recall_at_k

log = logging.getLogger(__name__)

FULL_SCALE_DISTRACTORS = 999
DESK_DISTRACTORS = 99


@dataclass
class ExitReport:
    exit: int
    task: str
    metrics: dict[str, float]
    gflops: float

    def to_record(self) -> dict:
        return {"exit": self.exit, "task": self.task, "gflops": self.gflops, "metrics": dict(self.metrics)}

    @classmethod
    def from_record(cls, rec: dict) -> "ExitReport":
        return cls(int(rec["exit"]), rec["task"], dict(rec["metrics"]), float(rec["gflops"]))


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    target: str


def ranking_metrics(lists: Sequence[RankedList]) -> dict[str, float]:
    return {
        "mrr": mrr(lists),
        "ndcg": ndcg_binary(lists),
        "map": map_multi(lists),
        "recall_at_1": recall_at_k(lists, 1),
        "recall_at_5": recall_at_k(lists, 5),
    }


def rank_queries(query_vecs: Mapping[str, np.ndarray], pool_vecs: Mapping[str, np.ndarray],
                 queries: Sequence[Query], n_distractors: int, seed: int) -> list[RankedList]:
    """Rank each query's target against ``n_distractors`` seeded draws from the pool."""
    pool_ids = sorted(pool_vecs)
    rng = np.random.default_rng(seed)
    lists = []
    for q in queries:
        others = [p for p in pool_ids if p != q.target]
        if q.target not in pool_vecs or len(others) < n_distractors:
            raise ValueError(f"pool too small for query {q.id!r}: need target + {n_distractors} distractors")
        picks = rng.choice(len(others), size=n_distractors, replace=False)
        cands = {q.target: pool_vecs[q.target], **{others[i]: pool_vecs[others[i]] for i in sorted(picks)}}
        idx = build_index(cands)
        lists.append(RankedList(q.id, search(idx, query_vecs[q.id], len(cands)), {q.target}))
    return lists


def retrieval_eval(ckpt: Checkpoint, queries: Sequence[Query], pool: Mapping[str, str],
                   exits: Sequence[int] | None = None, n_distractors: int = DESK_DISTRACTORS,
                   seed: int = 0, task: str = "t2c", max_len: int = 128) -> list[ExitReport]:
    exits = list(ckpt.config.exits if exits is None else exits)
    pool_ids = sorted(pool)
    if len(pool_ids) < n_distractors + 1:
        raise ValueError(f"pool has {len(pool_ids)} items; need at least {n_distractors + 1}")
    q_emb = embed_texts(ckpt, [q.text for q in queries], exits, max_len)
    p_emb = embed_texts(ckpt, [pool[i] for i in pool_ids], exits, max_len)
    gflops = flops_per_exit(ckpt.config, max_len)
    reports = []
    for e in exits:
        qv = {q.id: q_emb[e][i].double().numpy() for i, q in enumerate(queries)}
        pv = {pid: p_emb[e][i].double().numpy() for i, pid in enumerate(pool_ids)}
        lists = rank_queries(qv, pv, queries, n_distractors, seed)
        reports.append(ExitReport(e, task, ranking_metrics(lists), gflops[e]))
    return reports


def triplet_queries(triplets, task: str = "t2c") -> tuple[list[Query], dict[str, str]]:
    """Queries and pool for text-to-code (nl -> code_a) or code-to-code (code_a -> code_b)."""
    if task == "t2c":
        return ([Query(t.id, t2c_query(t), t.id) for t in triplets], {t.id: t.code_a.text for t in triplets})
    if task == "c2c":
        return ([Query(t.id, c2c_query(t), t.id) for t in triplets], {t.id: t.code_b.text for t in triplets})
    raise ValueError(f"unknown retrieval task {task!r}")


def binary_metrics(pred: Sequence[int], truth: Sequence[int]) -> dict[str, float]:
    """Precision/recall/F1 with undefined ratios reported as 0 (and logged)."""
    pred = np.asarray(pred, dtype=int)
    truth = np.asarray(truth, dtype=int)
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    undefined = []
    precision = tp / (tp + fp) if tp + fp else (undefined.append("precision") or 0.0)
    recall = tp / (tp + fn) if tp + fn else (undefined.append("recall") or 0.0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else (undefined.append("f1") or 0.0)
    if undefined:
        log.warning("undefined %s (no positives); reported as 0", ", ".join(undefined))
    return {"precision": precision, "recall": recall, "f1": f1,
            "accuracy": float(np.mean(pred == truth)) if len(truth) else 0.0}


@torch.no_grad()
def clone_eval(ckpt: Checkpoint, pairs: Sequence[ClonePair], exits: Sequence[int] | None = None,
               threshold: float = 0.5, max_len: int = 128, batch_size: int = 256) -> list[ExitReport]:
    exits = list(ckpt.config.exits if exits is None else exits)
    labels = [p.label for p in pairs]
    if 1 not in labels or 0 not in labels:
        log.warning("clone evaluation set lacks positives or negatives; metrics may be undefined")
    probs: dict[int, list[np.ndarray]] = {e: [] for e in exits}
    for i in range(0, len(pairs), batch_size):
        batch = pack_clone_pairs(ckpt, pairs[i:i + batch_size], max_len)
        for e, logit in clone_logits(ckpt, batch, exits).items():
            probs[e].append(torch.sigmoid(logit).double().numpy())
    gflops = flops_per_exit(ckpt.config, max_len)
    out = []
    for e in exits:
        p = np.concatenate(probs[e])
        out.append(ExitReport(e, "clone", binary_metrics((p >= threshold).astype(int), labels), gflops[e]))
    return out


@torch.no_grad()
def pretrain_accuracy(ckpt: Checkpoint, index: RepoIndex, exit: int | None = None, n_examples: int = 512,
                      max_len: int = 128, seed: int = 12345, objective: str = "icc") -> tuple[float, float]:
    """Masked-token accuracy and binary (ICC/NSP) accuracy on freshly packed training data."""
    exit = ckpt.config.exits[-1] if exit is None else exit
    plan = TrainPlan(batch_size=64, max_len=max_len, objective=objective)
    rng = np.random.default_rng(seed)
    hit = n = cls_hit = cls_n = 0
    while cls_n < n_examples:
        batch = collate(pretrain_batch(index, ckpt.config.vocab_size, plan, rng), ckpt.dtype)
        states = ckpt.model(batch.ids, batch.valid, exit)
        pos = batch.mlm_labels != IGNORE
        logits = exit_mlm_logits(ckpt.model, states, exit, pos)
        hit += int((logits.argmax(-1) == batch.mlm_labels[pos]).sum())
        n += int(pos.sum())
        pred = (exit_icc_logit(ckpt.model, states, exit) > 0).to(batch.target.dtype)
        cls_hit += int((pred == batch.target).sum())
        cls_n += len(pred)
    return hit / max(n, 1), cls_hit / cls_n


def training_recall(ckpt: Checkpoint, triplets, task: str = "t2c", max_len: int = 128) -> dict[int, dict[str, float]]:
    """Metrics with the whole training set as the candidate pool (no distractor sampling)."""
    queries, pool = triplet_queries(triplets, task)
    reports = retrieval_eval(ckpt, queries, pool, n_distractors=len(pool) - 1, task=task, max_len=max_len)
    return {r.exit: r.metrics for r in reports}


@torch.no_grad()
def positive_pair_scores(ckpt: Checkpoint, triplets, exits: Sequence[int] | None = None, task: str = "c2c",
                         max_len: int = 128) -> dict[int, np.ndarray]:
    """Cosine similarity of each query with its own target, per exit."""
    exits = list(ckpt.config.exits if exits is None else exits)
    queries, pool = triplet_queries(triplets, task)
    q = embed_texts(ckpt, [x.text for x in queries], exits, max_len)
    d = embed_texts(ckpt, [pool[x.target] for x in queries], exits, max_len)
    return {e: (q[e] * d[e]).sum(-1).double().numpy() for e in exits}


__all__ = [
    "ExitReport", "Query", "binary_metrics", "clone_eval", "positive_pair_scores", "pretrain_accuracy",
    "rank_queries", "ranking_metrics", "retrieval_eval", "training_recall", "triplet_queries",
    "FULL_SCALE_DISTRACTORS", "DESK_DISTRACTORS",
]
