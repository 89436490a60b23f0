"""Invariant suite behind ``mosekit selfcheck``.

Each check recomputes its expectation with a small brute-force reference
instead of trusting the code under test.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .datagen import gen_corpus, plant_near_duplicates
from .dedup import est_jaccard, jaccard, lsh_dedup, minhash, shingle
from .evalkit.flops import flops_per_exit
from .evalkit.metrics import RankedList, map_multi, mrr, ndcg_binary, recall_at_k
from .evalkit.permtest import permutation_test
from .model import EncoderConfig, exit_clone_logit, exit_icc_logit, exit_mlm_logits, init, project
from .objectives import IGNORE, clip_contrastive, depth_weights, icc_loss, mlm_loss, multilayer_combine
from .packing import CROSS_REPO, RepoIndex, apply_mlm_mask, pack_icc
from .tokenizer import CLS_ID, MASK_ID, N_SPECIAL, PAD_ID, SEP_ID, build_vocab


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name} {self.detail}"


# --- model --------------------------------------------------------------------

def tiny_config() -> EncoderConfig:
    return EncoderConfig(vocab_size=16, depth=2, exits=(1, 2), hidden=8, n_heads=2, n_kv_heads=1,
                         intermediate=16, max_seq=12, proj_dim=4)


def _tiny_inputs(cfg: EncoderConfig, batch: int, seed: int):
    g = np.random.default_rng(seed)
    L = cfg.max_seq
    ids = g.integers(N_SPECIAL, cfg.vocab_size, size=(batch, L))
    valid = np.ones((batch, L), dtype=bool)
    for b in range(batch):
        pad = int(g.integers(0, L // 3))
        ids[b, :pad] = PAD_ID
        valid[b, :pad] = False
        ids[b, pad] = SEP_ID
    ids[:, -1] = CLS_ID
    labels = np.full((batch, L), IGNORE)
    for b in range(batch):
        pos = g.choice(np.flatnonzero(valid[b] & (ids[b] >= N_SPECIAL)), size=2, replace=False)
        labels[b, pos] = ids[b, pos]
        ids[b, pos] = MASK_ID
    target = (np.arange(batch) % 2).astype(np.float64)
    return torch.as_tensor(ids), torch.as_tensor(valid), torch.as_tensor(labels), torch.as_tensor(target)


def tiny_objective(ckpt, ids, valid, labels, target) -> torch.Tensor:
    """Every loss the trainers use, summed, so every parameter gets a gradient."""
    m = ckpt.model
    cfg = ckpt.config
    states = m(ids, valid)
    pre = {e: mlm_loss(exit_mlm_logits(m, states, e), labels) + icc_loss(exit_icc_logit(m, states, e), target)
           for e in cfg.exits}
    total = multilayer_combine(pre, cfg.depth).total
    half = ids.shape[0] // 2
    for e in cfg.exits:
        z = project(m, states[e].pooled, e)
        total = total + clip_contrastive(z[:half], z[half:2 * half])
        total = total + icc_loss(exit_clone_logit(m, states, e), target)
    return total


def gradient_check(seed: int = 0, h: float = 3e-4, floor: float = 1e-6) -> dict:
    """Five-point finite differences against autograd on every parameter coordinate, in float64.

    The O(h^4) stencil keeps truncation and cancellation error near 1e-11,
    well under the smallest gradients that matter. ``floor`` guards the ratio for
    coordinates whose true gradient is (structurally) almost zero.
    """
    cfg = tiny_config()
    ckpt = init(cfg, seed, dtype=torch.float64)
    inputs = _tiny_inputs(cfg, 4, seed)
    params = list(ckpt.model.parameters())
    for p in params:
        p.grad = None
    tiny_objective(ckpt, *inputs).backward()
    worst = 0.0
    n = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            gflat = p.grad.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                vals = []
                for k in (2, 1, -1, -2):
                    flat[i] = orig + k * h
                    vals.append(float(tiny_objective(ckpt, *inputs)))
                flat[i] = orig
                fd = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
                ad = float(gflat[i])
                worst = max(worst, abs(fd - ad) / max(abs(fd), abs(ad), floor))
                n += 1
    return {"max_rel_err": worst, "coords": n}


def prefix_configs() -> list[EncoderConfig]:
    return [
        EncoderConfig(vocab_size=40, depth=4, exits=(1, 2, 4), hidden=16, n_heads=4, n_kv_heads=2,
                      intermediate=32, max_seq=24, proj_dim=8),
        EncoderConfig(vocab_size=40, depth=6, exits=(2, 3, 6), hidden=24, n_heads=6, n_kv_heads=3,
                      intermediate=48, max_seq=24, proj_dim=8),
        EncoderConfig(vocab_size=40, depth=5, exits=(1, 5), hidden=32, n_heads=4, n_kv_heads=1,
                      intermediate=64, max_seq=24, proj_dim=8),
    ]


def prefix_consistency(n_inputs: int = 20, seed: int = 0) -> dict:
    """Stopping at exit e gives the same states as running the full stack."""
    worst = 0.0
    for ci, cfg in enumerate(prefix_configs()):
        ckpt = init(cfg, seed + ci, dtype=torch.float64)
        ids, valid, _, _ = _tiny_inputs(cfg, n_inputs, seed + ci)
        with torch.no_grad():
            full = ckpt.model(ids, valid)
            for e in cfg.exits:
                part = ckpt.model(ids, valid, e)
                worst = max(worst, float((part[e].hidden - full[e].hidden).abs().max()),
                            float((project(ckpt.model, part[e].pooled, e)
                                   - project(ckpt.model, full[e].pooled, e)).abs().max()))
    return {"max_abs_diff": worst}


def alpha_vector() -> dict:
    exits, depth = (4, 9, 18, 27, 36), 36
    w = depth_weights(exits, depth)
    expected = [4 / 36, 9 / 36, 18 / 36, 27 / 36, 1.0]
    losses = {e: torch.tensor(float(k + 1), dtype=torch.float64) for k, e in enumerate(exits)}
    total = float(multilayer_combine(losses, depth).total)
    ref = math.fsum(e / 36 * (k + 1) for k, e in enumerate(exits))
    return {"weights": [w[e] for e in exits], "weights_exact": [w[e] for e in exits] == expected,
            "combine_err": abs(total - ref)}


# --- data ---------------------------------------------------------------------

def _index(seed: int) -> tuple[RepoIndex, int]:
    corpus = gen_corpus(seed, 16, 8, ["toyA", "toyB", "toyC"])
    vocab = build_vocab(corpus, 4096)
    return RepoIndex(corpus, vocab), len(vocab)


def masking_stats(min_tokens: int = 100_000, seed: int = 0, max_len: int = 128) -> dict:
    index, V = _index(seed)
    rng = np.random.default_rng(seed)
    maskable = selected = n_mask = n_rand = n_keep = 0
    while maskable < min_tokens:
        ex = pack_icc(index, max_len, 0.5, rng)
        m = apply_mlm_mask(ex, V, 0.15, rng)
        maskable += int((ex.valid_mask & (ex.ids >= N_SPECIAL)).sum())
        for pos, orig in m.mlm_targets:
            selected += 1
            if m.ids[pos] == MASK_ID:
                n_mask += 1
            elif m.ids[pos] == orig:
                n_keep += 1
            else:
                n_rand += 1
    return {"tokens": maskable, "selected": selected / maskable, "mask": n_mask / selected,
            "random": n_rand / selected, "keep": n_keep / selected}


def icc_stats(n_packs: int = 10_000, seed: int = 0, max_len: int = 128) -> dict:
    """Cross-repo fraction plus a layout audit of every pack."""
    index, _ = _index(seed)
    rng = np.random.default_rng(seed)
    cross = 0
    layout_errors = 0
    for _ in range(n_packs):
        ex = pack_icc(index, max_len, 0.5, rng)
        ids, valid = ex.ids, ex.valid_mask
        first = int(np.argmax(valid))
        ok = (valid[first:].all() and not valid[:first].any() and (ids[:first] == PAD_ID).all()
              and ids[-1] == CLS_ID and ex.cls_pos == max_len - 1 and len(ex.seg_bounds) >= 2
              and ids[first] == SEP_ID)
        for a, b in ex.seg_bounds:
            ok = ok and ids[a - 1] == SEP_ID and (ids[a:b] >= N_SPECIAL).all()
        layout_errors += not ok
        cross += ex.icc_label == CROSS_REPO
    return {"packs": n_packs, "cross_fraction": cross / n_packs, "layout_errors": layout_errors}


def minhash_accuracy(n_pairs: int = 100, seed: int = 0, tol: float = 0.09) -> dict:
    """Estimated vs exact Jaccard on synthetic shingle sets with J spread over [0.5, 0.9]."""
    rng = np.random.default_rng(seed)
    within = 0
    worst = 0.0
    for i in range(n_pairs):
        target = 0.5 + 0.4 * i / max(n_pairs - 1, 1)
        shared = 200
        extra = int(round(shared * (1 / target - 1)))
        base = [f"s{i}-{k}" for k in range(shared)]
        a = set(base) | {f"a{i}-{k}" for k in range(extra // 2)}
        b = set(base) | {f"b{i}-{k}" for k in range(extra - extra // 2)}
        j = jaccard(a, b)
        perm_seed = int(rng.integers(1, 2**31))
        est = est_jaccard(minhash(a, seed=perm_seed), minhash(b, seed=perm_seed))
        worst = max(worst, abs(est - j))
        within += abs(est - j) <= tol
    return {"pairs": n_pairs, "within_frac": within / n_pairs, "max_err": worst}


def dedup_planted(seed: int = 0) -> dict:
    corpus = gen_corpus(seed, 12, 8, ["toyA", "toyB", "toyC", "toyD"])
    full, planted = plant_near_duplicates(corpus, 0.1, seed)
    kept, removed = lsh_dedup(full)
    kept_ids = {s.id for s in kept}
    missed = [c for _, c in planted if c in kept_ids]
    text = {s.id: s.text for s in full}
    low = [(r, k) for r, k in removed if jaccard(shingle(text[r]), shingle(text[k])) < 0.5]
    return {"planted": len(planted), "missed": len(missed), "removed": len(removed), "removed_below_0.5": len(low)}


# --- evaluation -----------------------------------------------------------------

def _ref_metrics(cands: list, relevant: set) -> tuple[float, float, float, float]:
    ranks = [i + 1 for i, c in enumerate(cands) if c in relevant]
    rr = 1.0 / ranks[0]
    dcg = sum(1.0 / math.log2(r + 1) for r in ranks)
    idcg = sum(1.0 / math.log2(k + 2) for k in range(len(ranks)))
    hits = 0
    ap = 0.0
    for i, c in enumerate(cands):
        if c in relevant:
            hits += 1
            ap += hits / (i + 1)
    r1 = float(cands[0] in relevant) / len(relevant)
    return rr, dcg / idcg, ap / len(relevant), r1


def metric_oracles(n_lists: int = 100, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    lists, refs = [], []
    for q in range(n_lists):
        n = int(rng.integers(2, 30))
        cands = [f"c{k}" for k in rng.permutation(n)]
        k_rel = int(rng.integers(1, min(4, n) + 1))
        rel = set(rng.choice(cands, size=k_rel, replace=False).tolist())
        lists.append(RankedList(q, cands, rel))
        refs.append(_ref_metrics(cands, rel))
    ref = np.mean(np.array(refs), axis=0)
    got = np.array([mrr(lists), ndcg_binary(lists), map_multi(lists), recall_at_k(lists, 1)])
    single = [RankedList(0, ["a", "b", "t"], {"t"})]
    return {"max_err": float(np.abs(got - ref).max()), "ndcg_rank3": ndcg_binary(single)}


def flops_check() -> dict:
    f = flops_per_exit(EncoderConfig.full_scale(), 2048)
    vals = [f[e] for e in sorted(f)]
    return {"ratio_4_36": f[4] / f[36], "monotone": all(b > a for a, b in zip(vals, vals[1:]))}


def permtest_calibration(trials: int = 200, n_perm: int = 2000, n: int = 30, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    rejected = sum(permutation_test(rng.normal(size=n), rng.normal(size=n), n_perm, 0.05, seed + t)[1]
                   for t in range(trials))
    return {"trials": trials, "rejection_rate": rejected / trials}


# --- suite ----------------------------------------------------------------------

CHECKS: dict[str, tuple[Callable[[], dict], Callable[[dict], bool]]] = {
    "gradient_check": (gradient_check, lambda d: d["max_rel_err"] <= 1e-4),
    "prefix_consistency": (prefix_consistency, lambda d: d["max_abs_diff"] <= 1e-6),
    "alpha_vector": (alpha_vector, lambda d: d["weights_exact"] and d["combine_err"] == 0.0),
    "masking": (masking_stats, lambda d: abs(d["selected"] - 0.15) <= 0.01 and abs(d["mask"] - 0.8) <= 0.02
                and abs(d["random"] - 0.1) <= 0.02 and abs(d["keep"] - 0.1) <= 0.02),
    "icc_packing": (lambda: icc_stats(2000), lambda d: abs(d["cross_fraction"] - 0.5) <= 0.035
                    and d["layout_errors"] == 0),
    "minhash": (minhash_accuracy, lambda d: d["within_frac"] >= 0.95),
    "dedup_planted": (dedup_planted, lambda d: d["missed"] == 0 and d["removed_below_0.5"] == 0),
    "metric_oracles": (metric_oracles, lambda d: d["max_err"] <= 1e-12 and abs(d["ndcg_rank3"] - 0.5) <= 1e-12),
    "flops": (flops_check, lambda d: 0.09 <= d["ratio_4_36"] <= 0.13 and d["monotone"]),
    "permtest_calibration": (permtest_calibration, lambda d: 0.01 <= d["rejection_rate"] <= 0.10),
}


def run_check(name: str) -> CheckResult:
    fn, ok = CHECKS[name]
    t = time.perf_counter()
    detail = fn()
    return CheckResult(name, bool(ok(detail)), detail, time.perf_counter() - t)


def run_all(names=None) -> list[CheckResult]:
    return [run_check(n) for n in (names or CHECKS)]
