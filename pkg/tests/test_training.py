import numpy as np
import pytest
import torch

from mosekit.datagen import gen_triplets
from mosekit.evalkit.harness import binary_metrics, clone_eval
from mosekit.model import init
from mosekit.training import (C2C_PREFIX, ClonePair, T2C_PREFIX, NumericError, OptimizerConfig, TrainPlan, _optimise,
                              adamw_state, adamw_step, augment_code, collate, finetune_clone, lr_at,
                              make_clone_pairs, pretrain, pretrain_batch, pretrain_step_losses, retrieval_batch)
from mosekit.objectives import multilayer_combine
from mosekit.tokenizer import build_vocab

from conftest import small_config


# --- optimiser ------------------------------------------------------------------

def test_adamw_first_step_hand_value():
    p = torch.zeros(1, dtype=torch.float64)
    cfg = OptimizerConfig(weight_decay=0.0, eps=1e-8)
    st = adamw_state([p])
    adamw_step([p], [torch.ones(1, dtype=torch.float64)], st, cfg, lr=0.1)
    # m_hat = v_hat = 1, so the step is lr * 1 / (1 + eps)
    assert abs(float(p) + 0.1 / (1 + 1e-8)) < 1e-15


def test_adamw_decay_only():
    p = torch.ones(1, dtype=torch.float64)
    cfg = OptimizerConfig(weight_decay=0.1)
    adamw_step([p], [torch.zeros(1, dtype=torch.float64)], adamw_state([p]), cfg, lr=0.1)
    assert float(p) == pytest.approx(0.99, abs=1e-15)


def test_adamw_matches_torch_reference():
    g = torch.Generator().manual_seed(0)
    p0 = torch.randn(7, 3, generator=g, dtype=torch.float64)
    cfg = OptimizerConfig(beta1=0.9, beta2=0.95, eps=1e-6, weight_decay=0.1)
    mine = p0.clone()
    ref = torch.nn.Parameter(p0.clone())
    opt = torch.optim.AdamW([ref], lr=3e-3, betas=(0.9, 0.95), eps=1e-6, weight_decay=0.1)
    st = adamw_state([mine])
    for _ in range(25):
        grad = torch.randn(7, 3, generator=g, dtype=torch.float64)
        adamw_step([mine], [grad], st, cfg, lr=3e-3)
        ref.grad = grad.clone()
        opt.step()
    assert torch.allclose(mine, ref.detach(), atol=1e-12, rtol=0)


def test_adamw_rejects_nonfinite():
    p = torch.zeros(2)
    with pytest.raises(NumericError):
        adamw_step([p], [torch.tensor([1.0, float("nan")])], adamw_state([p]), OptimizerConfig(), 0.1)


def test_lr_schedule_hand_values():
    cfg = OptimizerConfig(base_lr=1.0, warmup_steps=10, decay_milestones=[(100, 0.36), (200, 0.1)])
    assert [lr_at(s, cfg) for s in (0, 5, 10, 99, 100, 199, 200, 10_000)] == [0.0, 0.5, 1.0, 1.0, 0.36, 0.36, 0.1, 0.1]
    full = OptimizerConfig.full_scale_pretrain()
    assert lr_at(239_999, full) == pytest.approx(6.24e-4 * 0.01)
    assert lr_at(240_000, full) == pytest.approx(6.24e-4 * 0.001)
    with pytest.raises(ValueError):
        OptimizerConfig(decay_milestones=[(5, 0.5), (5, 0.1)])


def test_gradient_clipping_caps_global_norm(small_ckpt):
    # with clipping, one Adam step is the same as feeding the clipped gradient
    params = list(small_ckpt.model.parameters())
    x = sum((p * p).sum() for p in params) * 1e3
    cfg = OptimizerConfig(clip_norm=1.0, weight_decay=0.0)
    before = [p.detach().clone() for p in params]
    _optimise(small_ckpt.model, x, adamw_state(params), cfg, 0.0, 0)
    total = torch.sqrt(sum((p.grad ** 2).sum() for p in params))
    assert float(total) == pytest.approx(1.0, rel=1e-5)
    assert all(torch.equal(a, b) for a, b in zip(before, params))


def test_nonfinite_loss_raises(small_ckpt):
    with pytest.raises(NumericError):
        _optimise(small_ckpt.model, torch.tensor(float("inf")), {}, OptimizerConfig(), 0.1, 3)


# --- pre-training -------------------------------------------------------------------

def _plan(**kw):
    base = dict(steps=6, batch_size=4, max_len=64, seed=1, log_every=1)
    base.update(kw)
    return TrainPlan(**base)


def test_pretrain_deterministic_float64(vocab, index):
    runs = []
    for _ in range(2):
        ck = init(small_config(len(vocab)), 0, dtype=torch.float64, vocab=vocab)
        ck, logs = pretrain(ck, index, _plan(), OptimizerConfig(warmup_steps=2))
        runs.append((ck.model.state_dict(), [l["loss"] for l in logs]))
    assert runs[0][1] == runs[1][1]
    assert all(torch.equal(runs[0][0][k], runs[1][0][k]) for k in runs[0][0])


def test_pretrain_loss_decreases(vocab, index):
    ck = init(small_config(len(vocab)), 0, dtype=torch.float64, vocab=vocab)
    _, logs = pretrain(ck, index, _plan(steps=40, batch_size=8), OptimizerConfig(base_lr=3e-3, warmup_steps=5))
    assert np.mean([l["loss"] for l in logs[-5:]]) < logs[0]["loss"]
    assert set(logs[0]["per_exit"]) == {"1", "2", "4"}
    assert logs[0]["alpha"] == {"1": 0.25, "2": 0.5, "4": 1.0}


def test_single_exit_ablation_matches_zeroed_weights(vocab, index):
    out = []
    for plan in (_plan(single_exit=4), _plan(exit_weights={1: 0.0, 2: 0.0, 4: 1.0})):
        ck = init(small_config(len(vocab)), 0, dtype=torch.float64, vocab=vocab)
        _, logs = pretrain(ck, index, plan, OptimizerConfig(warmup_steps=2))
        out.append([l["per_exit"]["4"] for l in logs])
    assert out[0] == out[1]


def test_single_exit_must_be_an_exit(vocab, index):
    ck = init(small_config(len(vocab)), 0, vocab=vocab)
    with pytest.raises(ValueError):
        pretrain(ck, index, _plan(single_exit=3), OptimizerConfig())


def test_nsp_objective_runs(vocab, index, rng):
    ck = init(small_config(len(vocab)), 0, dtype=torch.float64, vocab=vocab)
    batch = collate(pretrain_batch(index, len(vocab), _plan(objective="nsp"), rng), torch.float64)
    losses = pretrain_step_losses(ck, batch, [1, 2, 4])
    assert all(torch.isfinite(v) for v in losses.values())
    assert float(multilayer_combine(losses, 4).total.detach()) > 0


# --- retrieval batches ------------------------------------------------------------------

def test_augment_renames_frequent_long_words():
    rng = np.random.default_rng(0)
    code = "abc x abc x abc x de de de ok ok"
    out = augment_code(code, rng).split()
    assert out[1::2][:3] == ["x", "x", "x"]         # too short
    assert out[6:9] == ["de", "de", "de"]           # too short
    assert out[9:] == ["ok", "ok"]                  # only twice
    new = out[0]
    assert new != "abc" and out[2] == out[4] == new and len(new) >= 3
    assert "abc" not in out


def test_augment_without_targets_is_identity():
    assert augment_code("a b c a b", np.random.default_rng(0)) == "a b c a b"


def test_batch_composition_and_distinct_triplets(triplets):
    rng = np.random.default_rng(0)
    t2c = total = 0
    for _ in range(1000):
        b = retrieval_batch(triplets, 8, rng)
        assert len({e.triplet_id for e in b}) == len(b)
        t2c += sum(e.kind == "t2c" for e in b)
        total += len(b)
    assert abs(t2c / total - 0.5) <= 0.02


def test_odd_batch_split_is_fair(triplets):
    rng = np.random.default_rng(3)
    fracs = [sum(e.kind == "t2c" for e in retrieval_batch(triplets, 7, rng)) for _ in range(2000)]
    assert set(fracs) == {3, 4}
    assert abs(np.mean(fracs) / 7 - 0.5) < 0.02


def test_augmentation_incidence(triplets):
    rng = np.random.default_rng(1)
    flags = [e.augmented for _ in range(1250) for e in retrieval_batch(triplets, 8, rng)]
    assert len(flags) == 10_000
    assert abs(np.mean(flags) - 0.30) <= 0.02


def test_queries_carry_prefixes_and_docs_are_code(triplets):
    by_id = {t.id: t for t in triplets}
    for e in retrieval_batch(triplets, 10, np.random.default_rng(2), aug_rate=0.0):
        t = by_id[e.triplet_id]
        if e.kind == "t2c":
            assert e.query == f"{T2C_PREFIX} {t.nl}" and e.doc == t.code_a.text
        else:
            assert e.query == f"{C2C_PREFIX} {t.code_a.text}" and e.doc == t.code_b.text


def test_batch_size_checks(triplets):
    with pytest.raises(ValueError):
        retrieval_batch(triplets, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        retrieval_batch(triplets[:1], 4, np.random.default_rng(0))


# --- clone ----------------------------------------------------------------------------

def test_clone_pairs_balanced(triplets):
    pairs = make_clone_pairs(triplets, 0)
    assert sum(p.label for p in pairs) == len(triplets) == len(pairs) // 2


def test_clone_overfit_every_exit():
    ts = gen_triplets(21, 32, ["toyA", "toyB", "toyC", "toyD"])
    pairs = make_clone_pairs(ts, 0)
    assert len(pairs) == 64
    vocab = build_vocab([x for p in pairs for x in (p.a, p.b)], 1024)
    ck = init(small_config(len(vocab)), 0, vocab=vocab)
    plan = TrainPlan(mode="finetune_clone", steps=300, batch_size=32, max_len=64, seed=0, log_every=50)
    ck, _ = finetune_clone(ck, pairs, plan, OptimizerConfig(base_lr=2e-3, warmup_steps=20, weight_decay=0.0))
    for r in clone_eval(ck, pairs, max_len=64):
        assert r.metrics["f1"] >= 0.95, (r.exit, r.metrics)


def test_degenerate_labels_warn(caplog):
    m = binary_metrics([0, 0, 0], [0, 0, 0])
    assert m == {"precision": 0.0, "recall": 0.0, "f1": 0.0, "accuracy": 1.0}
    assert "undefined" in caplog.text


def test_unlabelled_pair_rejected(vocab):
    ck = init(small_config(len(vocab)), 0, vocab=vocab)
    with pytest.raises(ValueError):
        finetune_clone(ck, [ClonePair("a", "b", None)], TrainPlan(steps=1), OptimizerConfig())
