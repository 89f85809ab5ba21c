"""Two-stage training: cross-entropy warm-up, then the joint objective.

Both stages use AdamW with two parameter groups (encoder body and
classification head, each with its own rate) and cosine decay to zero.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .corpus import CorpusRecord
from .encoder import (ENCODER_KEYS, HEAD_KEYS, PARAM_KEYS, EncoderParams, Vocabulary,
                      encode_texts, init_params, params_from_dict, params_to_dict)
from .errors import ContractViolation, DataContractError, NumericFault
from .losses import (ArclConfig, GcConfig, TokenPartition, arcl_loss, joint_loss, pgr_loss, ppt_loss,
                     ppt_thresholds)
from .saliency import embedding_gradients, gradient_norms

log = logging.getLogger(__name__)

WARMUP, JOINT = "warmup", "joint"


@dataclass
class TrainConfig:
    warmup_epochs: int = 3
    joint_epochs: int = 4
    batch_size: int = 8
    encoder_lr_warmup: float = 3e-3
    head_lr_warmup: float = 1e-2
    encoder_lr_joint: float = 1e-3
    head_lr_joint: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 7
    dim: int = 32
    gc: GcConfig = field(default_factory=GcConfig)
    arcl: ArclConfig = field(default_factory=ArclConfig)

    def __post_init__(self):
        rates = (self.encoder_lr_warmup, self.head_lr_warmup, self.encoder_lr_joint, self.head_lr_joint)
        if min(rates) <= 0:
            raise ContractViolation("learning rates must be positive")
        if self.batch_size < 1 or self.dim < 1:
            raise ContractViolation("batch_size and dim must be positive")
        if isinstance(self.gc, dict):
            self.gc = GcConfig(**self.gc)
        if isinstance(self.arcl, dict):
            self.arcl = ArclConfig(**self.arcl)
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractViolation(f"unknown config fields {sorted(unknown)}")
        return cls(**doc)


@dataclass
class Checkpoint:
    params: EncoderParams
    vocab: Vocabulary
    config: TrainConfig
    stage: str
    step: int
    history: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        doc = params_to_dict(self.params, self.vocab)
        doc.update(stage=self.stage, step=self.step, train_config=self.config.to_dict())
        return doc

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Checkpoint":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        params, vocab = params_from_dict(doc)
        return cls(params, vocab, TrainConfig.from_dict(doc["train_config"]), doc["stage"], doc["step"])


def cosine_lr(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


def adamw_update(theta, grad, m, v, t: int, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
    """One decoupled-weight-decay Adam update; returns (theta, m, v)."""
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    theta = theta - lr * weight_decay * theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta, m, v


class AdamW:
    def __init__(self, params: EncoderParams, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.betas, self.eps, self.weight_decay = tuple(betas), eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lrs: dict[str, float]) -> None:
        self.t += 1
        for k, g in grads.items():
            self.params.arrays[k], self.m[k], self.v[k] = adamw_update(
                self.params.arrays[k], g, self.m[k], self.v[k], self.t, lrs[k],
                self.betas, self.eps, self.weight_decay)


def optimizer_step(params: EncoderParams, grads: dict[str, np.ndarray], lr: float,
                   betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01,
                   state: AdamW | None = None) -> AdamW:
    """Apply one AdamW step at a single rate; returns the optimizer state."""
    state = state or AdamW(params, betas, eps, weight_decay)
    state.step(grads, {k: lr for k in grads})
    return state


def _group_rates(encoder_lr: float, head_lr: float, step: int, total: int) -> dict[str, float]:
    enc, head = cosine_lr(encoder_lr, step, total), cosine_lr(head_lr, step, total)
    return {**{k: enc for k in ENCODER_KEYS}, **{k: head for k in HEAD_KEYS}}


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _cross_entropy(log_probs, labels) -> ag.Node:
    onehot = np.zeros(log_probs.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return ag.scale(ag.sum(log_probs * ag.constant(onehot)), -1.0 / len(labels))


def _check_finite(value: float, stage: str, step: int) -> None:
    if not math.isfinite(value):
        raise NumericFault(f"{stage} loss diverged at step {step}", op=stage)


def warmup(config: TrainConfig, records: list[CorpusRecord], vocab: Vocabulary | None = None,
           on_step: Callable[[dict], None] | None = None) -> Checkpoint:
    """Train from scratch with cross-entropy only."""
    if config.warmup_epochs < 1:
        raise ContractViolation("warm-up needs at least one epoch")
    if not records:
        raise ContractViolation("empty training corpus")
    vocab = vocab or Vocabulary.from_texts(r.text for r in records)
    params = init_params(vocab.size, config.dim, seed=config.seed)
    opt = AdamW(params, config.betas, config.eps, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    texts = [r.text for r in records]
    labels = np.array([r.label for r in records])
    per_epoch = math.ceil(len(records) / config.batch_size)
    total = config.warmup_epochs * per_epoch
    history, step = [], 0
    for epoch in range(config.warmup_epochs):
        for idx in _batches(len(records), config.batch_size, rng):
            nodes = params.nodes(requires_grad=True)
            enc = encode_texts(params, vocab, [texts[i] for i in idx], nodes=nodes)
            ce = _cross_entropy(enc.log_probs, labels[idx])
            _check_finite(ce.item(), WARMUP, step)
            grads = ag.gradient(ce, [nodes[k] for k in PARAM_KEYS])
            lrs = _group_rates(config.encoder_lr_warmup, config.head_lr_warmup, step, total)
            opt.step({k: g.value for k, g in zip(PARAM_KEYS, grads)}, lrs)
            entry = {"stage": WARMUP, "epoch": epoch, "step": step, "lr": lrs["tok"],
                     "ce": ce.item(), "total": ce.item()}
            history.append(entry)
            if on_step:
                on_step(entry)
            step += 1
    return Checkpoint(params, vocab, config, WARMUP, step, history)


@dataclass
class JointBatch:
    texts: list[str]
    labels: np.ndarray
    partitions: list[TokenPartition | None]
    reasonings: list[tuple[str, str] | None]


def _prepare(records: list[CorpusRecord], need_reasonings: bool) -> JointBatch:
    partitions, reasonings = [], []
    for r in records:
        if r.label == 1:
            if r.weak_spans is None:
                raise DataContractError("toxic sample has no weak spans", r.id)
            if need_reasonings and r.reasonings is None:
                raise DataContractError("toxic sample has no stance reasonings", r.id)
            part = TokenPartition.from_char_spans(r.weak_spans, len(r.text))
            partitions.append(part if part.eligible else None)
        else:
            partitions.append(None)
        reasonings.append((r.reasonings["toxic"], r.reasonings["normal"]) if r.reasonings else None)
    return JointBatch([r.text for r in records], np.array([r.label for r in records]),
                      partitions, reasonings)


def joint_objective(params: EncoderParams, vocab: Vocabulary, batch: JointBatch, config: TrainConfig,
                    nodes: dict[str, ag.Node] | None = None, frozen: dict | None = None):
    """Build the joint loss for one batch.

    Returns ``(total, parts)`` where ``parts`` holds component values and the
    per-sample percentile/target thresholds used (pass them back as
    ``frozen`` to evaluate the same surrogate elsewhere, e.g. in gradient
    checks).
    """
    gc, ac = config.gc, config.arcl
    nodes = nodes if nodes is not None else params.nodes(requires_grad=True)
    enc = encode_texts(params, vocab, batch.texts, nodes=nodes)
    ce = _cross_entropy(enc.log_probs, batch.labels)

    eligible = np.array([p is not None for p in batch.partitions])
    pgr = ppt = ag.constant(0.0)
    thresholds, g_tox, g_non = {}, [], []
    if gc is not None and config.arcl.lambda_grad > 0 and eligible.any():
        grad = embedding_gradients(enc, 1, select=eligible, record_backward=True)
        norms = gradient_norms(grad)
        pgr_terms, ppt_terms = [], []
        for b in np.flatnonzero(eligible):
            part = batch.partitions[b]
            g = norms[b, 1:1 + len(batch.texts[b])]
            th = frozen[b] if frozen is not None else None
            if th is None:
                th = ppt_thresholds(g.value, gc)
            thresholds[int(b)] = th
            pgr_terms.append(pgr_loss(g, part, gc.margin))
            ppt_terms.append(ppt_loss(g, part, gc, thresholds=th))
            g_tox.append(g.value[part.toxic].mean())
            g_non.append(g.value[part.nontoxic].mean())
        pgr = ag.mean(ag.stack(pgr_terms))
        ppt = ag.mean(ag.stack(ppt_terms))

    arcl = ag.constant(0.0)
    with_r = [b for b, r in enumerate(batch.reasonings) if r is not None]
    if ac.lambda_sem > 0 and len(with_r) > 0:
        h_p = encode_texts(params, vocab, [batch.reasonings[b][0] for b in with_r], nodes=nodes).cls
        h_n = encode_texts(params, vocab, [batch.reasonings[b][1] for b in with_r], nodes=nodes).cls
        h_t = enc.cls[np.array(with_r)]
        arcl = arcl_loss(h_t, h_p, h_n, ac.temperature, ac.normalize)

    total = joint_loss(ce, pgr, ppt, arcl, ac.lambda_grad, ac.lambda_sem)
    parts = {"ce": ce.item(), "pgr": pgr.item(), "ppt": ppt.item(), "arcl": arcl.item(),
             "total": total.item(), "thresholds": thresholds,
             "g_toxic": float(np.mean(g_tox)) if g_tox else None,
             "g_nontoxic": float(np.mean(g_non)) if g_non else None}
    return total, parts


SELF_TEST_TOLERANCE = 1e-4
_SELF_TEST_RECORDS = (
    ("self-0", "abcdeab", [(2, 4)], "xcd", "ycd"),
    ("self-1", "fadbe", [(1, 3)], "xad", "yad"),
)


def _kink_distance(params: EncoderParams, vocab: Vocabulary, batch: JointBatch, frozen: dict,
                   margin: float) -> float:
    enc = encode_texts(params, vocab, batch.texts, requires_grad=True)
    norms = gradient_norms(embedding_gradients(enc, 1)).value
    args = []
    for b, part in enumerate(batch.partitions):
        g = norms[b, 1:1 + len(batch.texts[b])]
        floor, target = frozen[b]
        gp, gn = g[part.toxic], g[part.nontoxic]
        args += [(gn[None, :] - gp[:, None] + margin).ravel(), gn - floor, target - gp, g]
    return float(np.min(np.abs(np.concatenate(args))))


def gradient_self_test(config: TrainConfig | None = None, step: float = 1e-5) -> float:
    """Max relative error between the joint-objective gradient and central differences.

    Runs on a frozen two-sample toy batch (dimension 4, ten positions) with
    the loss settings of ``config``. The first initialisation seed whose
    hinge arguments all sit at least 1e-3 from their kinks is used, and the
    percentile/target thresholds are frozen at that point.
    """
    cfg = replace(config or TrainConfig(), dim=4)
    records = [CorpusRecord(i, t, 1, spans, spans, {"toxic": tox, "normal": nor})
               for i, t, spans, tox, nor in _SELF_TEST_RECORDS]
    vocab = Vocabulary.from_texts([r.text for r in records] + [x for *_, a, b in _SELF_TEST_RECORDS for x in (a, b)])
    batch = _prepare(records, need_reasonings=True)
    for seed in range(200):
        params = init_params(vocab.size, cfg.dim, 10, seed=seed)
        _, parts = joint_objective(params, vocab, batch, cfg)
        frozen = parts["thresholds"]
        if _kink_distance(params, vocab, batch, frozen, cfg.gc.margin) > 1e-3:
            break
    else:
        raise ContractViolation("no kink-free self-test point found")
    shapes = [(k, params.arrays[k].shape, params.arrays[k].size) for k in PARAM_KEYS]

    def objective(theta):
        nodes, lo = {}, 0
        for k, shape, size in shapes:
            nodes[k] = ag.reshape(theta[lo:lo + size], shape)
            lo += size
        return joint_objective(params, vocab, batch, cfg, nodes=nodes, frozen=frozen)[0]

    point = np.concatenate([params.arrays[k].ravel() for k in PARAM_KEYS])
    return ag.finite_difference_check(objective, point, step)


def joint_train(config: TrainConfig, records: list[CorpusRecord], checkpoint: Checkpoint,
                on_step: Callable[[dict], None] | None = None) -> Checkpoint:
    """Optimize CE + gradient constraints + reasoning contrast from a warm-up checkpoint."""
    if checkpoint.stage != WARMUP:
        raise ContractViolation(f"joint training starts from a warm-up checkpoint, got {checkpoint.stage!r}")
    if config.joint_epochs < 1:
        raise ContractViolation("joint training needs at least one epoch")
    data = _prepare(records, need_reasonings=config.arcl.lambda_sem > 0)
    params, vocab = checkpoint.params.copy(), checkpoint.vocab
    opt = AdamW(params, config.betas, config.eps, config.weight_decay)
    rng = np.random.default_rng(config.seed + 1)
    per_epoch = math.ceil(len(records) / config.batch_size)
    total_steps = config.joint_epochs * per_epoch
    history, step = [], 0
    for epoch in range(config.joint_epochs):
        for idx in _batches(len(records), config.batch_size, rng):
            batch = JointBatch([data.texts[i] for i in idx], data.labels[idx],
                               [data.partitions[i] for i in idx], [data.reasonings[i] for i in idx])
            nodes = params.nodes(requires_grad=True)
            total, parts = joint_objective(params, vocab, batch, config, nodes=nodes)
            _check_finite(parts["total"], JOINT, step)
            grads = ag.gradient(total, [nodes[k] for k in PARAM_KEYS])
            lrs = _group_rates(config.encoder_lr_joint, config.head_lr_joint, step, total_steps)
            opt.step({k: g.value for k, g in zip(PARAM_KEYS, grads)}, lrs)
            entry = {"stage": JOINT, "epoch": epoch, "step": step, "lr": lrs["tok"],
                     **{k: v for k, v in parts.items() if k != "thresholds"}}
            history.append(entry)
            if on_step:
                on_step(entry)
            step += 1
    return Checkpoint(params, vocab, config, JOINT, checkpoint.step + step, history)
