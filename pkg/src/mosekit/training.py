"""Optimisation loops: pre-training, retrieval and clone fine-tuning, single-exit ablations."""

from __future__ import annotations

import logging
import re
import string
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .datagen import Snippet, Triplet
from .model import Checkpoint, MultiExitEncoder, exit_clone_logit, exit_icc_logit, exit_mlm_logits, project
from .objectives import (IGNORE, ExitLossBreakdown, clone_loss, finetune_loss, icc_loss, mlm_loss,
                         multilayer_combine, pretrain_loss_per_exit)
from .packing import PackedExample, RepoIndex, apply_mlm_mask, pack_icc, pack_nsp, pack_pair, pack_single
from .tokenizer import encode

log = logging.getLogger(__name__)

T2C_PREFIX = "retrieve code for this description :"
C2C_PREFIX = "find equivalent code :"


class NumericError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-6
    weight_decay: float = 0.1
    base_lr: float = 1e-3
    warmup_steps: int = 100
    # (step, factor): from ``step`` on, lr = base_lr * factor
    decay_milestones: list[tuple[int, float]] = field(default_factory=list)
    clip_norm: Optional[float] = 1.0

    def __post_init__(self):
        self.decay_milestones = [(int(s), float(f)) for s, f in self.decay_milestones]
        self.validate()

    def validate(self) -> None:
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        steps = [s for s, _ in self.decay_milestones]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("decay milestones must be strictly increasing")

    @classmethod
    def full_scale_pretrain(cls) -> "OptimizerConfig":
        return cls(base_lr=6.24e-4, warmup_steps=4000,
                   decay_milestones=[(120_000, 0.36), (185_000, 0.1), (220_000, 0.031),
                                     (230_000, 0.01), (240_000, 0.001)])

    @classmethod
    def full_scale_finetune(cls) -> "OptimizerConfig":
        return cls(base_lr=1e-5, warmup_steps=0)

    @classmethod
    def full_scale_clone(cls) -> "OptimizerConfig":
        return cls(base_lr=1e-5, warmup_steps=2000)


@dataclass
class TrainPlan:
    mode: str = "pretrain"  # pretrain | finetune_retrieval | finetune_clone
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    single_exit: Optional[int] = None
    augmentation_rate: float = 0.30
    max_len: int = 128
    mlm_rate: float = 0.15
    p_cross: float = 0.5
    objective: str = "icc"  # icc | nsp (pre-training ablation)
    temperature: float = 10.0
    exit_weights: Optional[dict[int, float]] = None
    log_every: int = 1

    def __post_init__(self):
        if self.exit_weights is not None:
            self.exit_weights = {int(k): float(v) for k, v in self.exit_weights.items()}

    def check(self, exits: Sequence[int]) -> None:
        if self.single_exit is not None and self.single_exit not in exits:
            raise ValueError(f"single_exit {self.single_exit} is not one of the exits {list(exits)}")
        if self.objective not in ("icc", "nsp"):
            raise ValueError(f"unknown pre-training objective {self.objective!r}")


# --- optimiser ---------------------------------------------------------------

def adamw_state(params: Sequence[torch.Tensor]) -> dict:
    return {"step": 0,
            "m": [torch.zeros_like(p) for p in params],
            "v": [torch.zeros_like(p) for p in params]}


@torch.no_grad()
def adamw_step(params: Sequence[torch.Tensor], grads: Sequence[Optional[torch.Tensor]], state: dict,
               cfg: OptimizerConfig, lr: float) -> None:
    """One in-place AdamW update with decoupled weight decay and bias correction."""
    for i, g in enumerate(grads):
        if g is not None and not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter #{i} at optimiser step {state['step'] + 1}")
    state["step"] += 1
    t = state["step"]
    bc1 = 1 - cfg.beta1 ** t
    bc2 = 1 - cfg.beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            g = torch.zeros_like(p)
        p.mul_(1 - lr * cfg.weight_decay)
        m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
        denom = (v / bc2).sqrt_().add_(cfg.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    factor = 1.0
    for s, f in cfg.decay_milestones:
        if step >= s:
            factor = f
    return cfg.base_lr * factor


def _optimise(model: MultiExitEncoder, loss: torch.Tensor, state: dict, cfg: OptimizerConfig,
              lr: float, step: int) -> None:
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {float(loss)} at step {step}")
    params = [p for p in model.parameters()]
    for p in params:
        p.grad = None
    loss.backward()
    grads = [p.grad for p in params]
    if cfg.clip_norm is not None:
        present = [g for g in grads if g is not None]
        total = torch.sqrt(sum((g * g).sum() for g in present))
        if torch.isfinite(total) and total > cfg.clip_norm:
            scale = cfg.clip_norm / (total + 1e-6)
            for g in present:
                g.mul_(scale)
    adamw_step(params, grads, state, cfg, lr)


def _weights(plan: TrainPlan) -> Optional[dict[int, float]]:
    # a single-exit baseline trains on that exit's bare loss
    return {plan.single_exit: 1.0} if plan.single_exit is not None else plan.exit_weights


def _combine(losses: dict[int, torch.Tensor], ckpt: Checkpoint, plan: TrainPlan) -> ExitLossBreakdown:
    return multilayer_combine(losses, ckpt.config.depth, weights=_weights(plan))


def _train_exits(ckpt: Checkpoint, plan: TrainPlan) -> list[int]:
    plan.check(ckpt.config.exits)
    return [plan.single_exit] if plan.single_exit is not None else list(ckpt.config.exits)


# --- batching ----------------------------------------------------------------

@dataclass
class Batch:
    ids: torch.Tensor
    valid: torch.Tensor
    mlm_labels: torch.Tensor
    target: Optional[torch.Tensor]


def collate(examples: Sequence[PackedExample], dtype: torch.dtype = torch.float32) -> Batch:
    ids = torch.from_numpy(np.stack([e.ids for e in examples]))
    valid = torch.from_numpy(np.stack([e.valid_mask for e in examples]))
    labels = torch.full(ids.shape, IGNORE, dtype=torch.long)
    for row, e in enumerate(examples):
        for pos, orig in e.mlm_targets:
            labels[row, pos] = orig
    targets = [e.binary_target for e in examples]
    target = None if any(t is None for t in targets) else torch.tensor(targets, dtype=dtype)
    return Batch(ids, valid, labels, target)


def pretrain_batch(index: RepoIndex, vocab_size: int, plan: TrainPlan, rng: np.random.Generator) -> list[PackedExample]:
    out = []
    for _ in range(plan.batch_size):
        if plan.objective == "nsp":
            ex = pack_nsp(index, plan.max_len, 0.5, rng)
        else:
            ex = pack_icc(index, plan.max_len, plan.p_cross, rng)
        out.append(apply_mlm_mask(ex, vocab_size, plan.mlm_rate, rng))
    return out


def pretrain_step_losses(ckpt: Checkpoint, batch: Batch, exits: Sequence[int]) -> dict[int, torch.Tensor]:
    model = ckpt.model
    states = model(batch.ids, batch.valid, max(exits))
    positions = batch.mlm_labels != IGNORE
    labels = batch.mlm_labels[positions]
    out = {}
    for e in exits:
        mlm = mlm_loss(exit_mlm_logits(model, states, e, positions), labels)
        icc = icc_loss(exit_icc_logit(model, states, e), batch.target)
        out[e] = pretrain_loss_per_exit(mlm, icc)
    return out


def pretrain(ckpt: Checkpoint, corpus: Sequence[Snippet] | RepoIndex, plan: TrainPlan,
             opt_cfg: OptimizerConfig, on_log: Optional[Callable[[dict], None]] = None) -> tuple[Checkpoint, list[dict]]:
    """MLM + ICC (or NSP) at every exit, combined with depth weights, AdamW."""
    if ckpt.vocab is None:
        raise ValueError("checkpoint has no vocabulary; build one from the corpus first")
    index = corpus if isinstance(corpus, RepoIndex) else RepoIndex(corpus, ckpt.vocab)
    exits = _train_exits(ckpt, plan)
    rng = np.random.default_rng(plan.seed)
    state = adamw_state(list(ckpt.model.parameters()))
    logs = []
    ckpt.model.train()
    for step in range(plan.steps):
        batch = collate(pretrain_batch(index, ckpt.config.vocab_size, plan, rng), ckpt.dtype)
        bd = _combine(pretrain_step_losses(ckpt, batch, exits), ckpt, plan)
        lr = lr_at(ckpt.step, opt_cfg)
        _optimise(ckpt.model, bd.total, state, opt_cfg, lr, step)
        ckpt.step += 1
        if step % plan.log_every == 0 or step == plan.steps - 1:
            rec = {"step": step, "lr": lr, **bd.to_log()}
            logs.append(rec)
            if on_log:
                on_log(rec)
    ckpt.model.eval()
    return ckpt, logs


# --- retrieval fine-tuning ---------------------------------------------------

_ALNUM = string.ascii_letters + string.digits


def augment_code(code: str, rng: np.random.Generator) -> str:
    """Rename every word seen more than twice and at least 3 chars long to a fresh random string."""
    words = code.split()
    counts: dict[str, int] = {}
    for w in words:
        counts[w] = counts.get(w, 0) + 1
    targets = sorted(w for w, c in counts.items() if c > 2 and len(w) >= 3)
    if not targets:
        return code
    taken = set(words)
    mapping = {}
    for w in targets:
        while True:
            n = int(rng.integers(3, 9))
            cand = string.ascii_letters[int(rng.integers(52))] + "".join(
                _ALNUM[int(i)] for i in rng.integers(len(_ALNUM), size=n - 1))
            if cand not in taken and cand not in code:
                break
        taken.add(cand)
        mapping[w] = cand
    return re.sub(r"\S+", lambda m: mapping.get(m.group(0), m.group(0)), code)


@dataclass
class RetrievalExample:
    kind: str  # "t2c" | "c2c"
    triplet_id: str
    query: str
    doc: str
    augmented: bool


def retrieval_batch(triplets: Sequence[Triplet], batch_size: int, rng: np.random.Generator,
                    aug_rate: float = 0.30) -> list[RetrievalExample]:
    """Half text-to-code, half code-to-code, all from distinct triplets."""
    if batch_size < 2:
        raise ValueError("retrieval batches need at least 2 examples")
    b = min(batch_size, len(triplets))
    if b < 2:
        raise ValueError("need at least 2 triplets")
    picks = rng.choice(len(triplets), size=b, replace=False)
    n_t2c = b // 2 + (int(rng.integers(2)) if b % 2 else 0)
    out = []
    for slot, idx in enumerate(picks):
        t = triplets[int(idx)]
        aug = bool(rng.random() < aug_rate)
        if slot < n_t2c:
            doc = augment_code(t.code_a.text, rng) if aug else t.code_a.text
            out.append(RetrievalExample("t2c", t.id, f"{T2C_PREFIX} {t.nl}", doc, aug))
        else:
            qa = augment_code(t.code_a.text, rng) if aug else t.code_a.text
            doc = augment_code(t.code_b.text, rng) if aug else t.code_b.text
            out.append(RetrievalExample("c2c", t.id, f"{C2C_PREFIX} {qa}", doc, aug))
    return out


def t2c_query(t: Triplet) -> str:
    return f"{T2C_PREFIX} {t.nl}"


def c2c_query(t: Triplet) -> str:
    return f"{C2C_PREFIX} {t.code_a.text}"


def encode_texts(ckpt: Checkpoint, texts: Sequence[str], max_len: int) -> Batch:
    exs = [pack_single(encode(ckpt.vocab, t), max_len) for t in texts]
    return collate(exs, ckpt.dtype)


def embed_batch(ckpt: Checkpoint, batch: Batch, exits: Sequence[int]) -> dict[int, torch.Tensor]:
    states = ckpt.model(batch.ids, batch.valid, max(exits))
    return {e: project(ckpt.model, states[e].pooled, e) for e in exits}


@torch.no_grad()
def embed_texts(ckpt: Checkpoint, texts: Sequence[str], exits: Sequence[int], max_len: int = 128,
                batch_size: int = 256) -> dict[int, torch.Tensor]:
    outs: dict[int, list[torch.Tensor]] = {e: [] for e in exits}
    for i in range(0, len(texts), batch_size):
        emb = embed_batch(ckpt, encode_texts(ckpt, texts[i:i + batch_size], max_len), exits)
        for e in exits:
            outs[e].append(emb[e])
    return {e: torch.cat(v) if v else torch.empty(0, ckpt.config.proj_dim) for e, v in outs.items()}


def finetune_retrieval(ckpt: Checkpoint, triplets: Sequence[Triplet], plan: TrainPlan,
                       opt_cfg: OptimizerConfig,
                       on_log: Optional[Callable[[dict], None]] = None) -> tuple[Checkpoint, list[dict]]:
    if not triplets:
        raise ValueError("no triplets to fine-tune on")
    if plan.batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    exits = _train_exits(ckpt, plan)
    rng = np.random.default_rng(plan.seed)
    state = adamw_state(list(ckpt.model.parameters()))
    logs = []
    ckpt.model.train()
    for step in range(plan.steps):
        exs = retrieval_batch(triplets, plan.batch_size, rng, plan.augmentation_rate)
        n = len(exs)
        both = encode_texts(ckpt, [e.query for e in exs] + [e.doc for e in exs], plan.max_len)
        emb = embed_batch(ckpt, both, exits)
        bd = finetune_loss({e: emb[e][:n] for e in exits}, {e: emb[e][n:] for e in exits},
                           ckpt.config.depth, plan.temperature, weights=_weights(plan))
        lr = lr_at(step, opt_cfg)
        _optimise(ckpt.model, bd.total, state, opt_cfg, lr, step)
        ckpt.step += 1
        if step % plan.log_every == 0 or step == plan.steps - 1:
            rec = {"step": step, "lr": lr, **bd.to_log()}
            logs.append(rec)
            if on_log:
                on_log(rec)
    ckpt.model.eval()
    return ckpt, logs


# --- clone fine-tuning -------------------------------------------------------

@dataclass(frozen=True)
class ClonePair:
    a: str
    b: str
    label: Optional[int]


def make_clone_pairs(triplets: Sequence[Triplet], seed: int = 0) -> list[ClonePair]:
    """One positive (code_a, code_b) and one shuffled negative per triplet."""
    rng = np.random.default_rng(seed)
    out = []
    n = len(triplets)
    for i, t in enumerate(triplets):
        out.append(ClonePair(t.code_a.text, t.code_b.text, 1))
        if n > 1:
            j = (i + 1 + int(rng.integers(n - 1))) % n
            out.append(ClonePair(t.code_a.text, triplets[j].code_b.text, 0))
    return out


def pack_clone_pairs(ckpt: Checkpoint, pairs: Sequence[ClonePair], max_len: int) -> Batch:
    exs = []
    for p in pairs:
        if p.label is None:
            raise ValueError("unlabelled clone pair")
        exs.append(pack_pair(encode(ckpt.vocab, p.a), encode(ckpt.vocab, p.b), max_len, p.label))
    return collate(exs, ckpt.dtype)


def clone_logits(ckpt: Checkpoint, batch: Batch, exits: Sequence[int]) -> dict[int, torch.Tensor]:
    states = ckpt.model(batch.ids, batch.valid, max(exits))
    return {e: exit_clone_logit(ckpt.model, states, e) for e in exits}


def finetune_clone(ckpt: Checkpoint, pairs: Sequence[ClonePair], plan: TrainPlan, opt_cfg: OptimizerConfig,
                   on_log: Optional[Callable[[dict], None]] = None) -> tuple[Checkpoint, list[dict]]:
    if not pairs:
        raise ValueError("no clone pairs")
    if any(p.label is None for p in pairs):
        raise ValueError("every clone pair needs a label")
    exits = _train_exits(ckpt, plan)
    rng = np.random.default_rng(plan.seed)
    state = adamw_state(list(ckpt.model.parameters()))
    logs = []
    ckpt.model.train()
    for step in range(plan.steps):
        picks = rng.choice(len(pairs), size=min(plan.batch_size, len(pairs)), replace=False)
        batch = pack_clone_pairs(ckpt, [pairs[int(i)] for i in picks], plan.max_len)
        bd = clone_loss(clone_logits(ckpt, batch, exits), batch.target, ckpt.config.depth,
                        weights=_weights(plan))
        lr = lr_at(step, opt_cfg)
        _optimise(ckpt.model, bd.total, state, opt_cfg, lr, step)
        ckpt.step += 1
        if step % plan.log_every == 0 or step == plan.steps - 1:
            rec = {"step": step, "lr": lr, **bd.to_log()}
            logs.append(rec)
            if on_log:
                on_log(rec)
    ckpt.model.eval()
    return ckpt, logs


def plan_to_dict(plan: TrainPlan) -> dict:
    return asdict(plan)
