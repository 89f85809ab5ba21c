"""Training objectives built on autograd Nodes.

Gradient-constraint terms take a vector of per-token gradient norms (as
differentiable Nodes) and a partition of token positions into toxic and
non-toxic sets. Percentile and target thresholds are computed from the
current values and held constant while differentiating.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Node
from .errors import ContractViolation


@dataclass
class GcConfig:
    margin: float = 1.0
    percentile: float = 0.15
    alpha: float = 1.1
    cap: float = 10.0

    def __post_init__(self):
        if self.margin <= 0 or not 0 < self.percentile < 1 or self.alpha <= 1 or self.cap <= 0:
            raise ContractViolation(f"invalid gradient-constraint config {self}")


@dataclass
class ArclConfig:
    temperature: float = 0.05
    lambda_grad: float = 0.8
    lambda_sem: float = 0.5
    normalize: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractViolation("temperature must be positive")


@dataclass
class TokenPartition:
    """0-based positions among a sample's scored tokens."""

    toxic: np.ndarray
    nontoxic: np.ndarray = field(default=None)

    def __post_init__(self):
        self.toxic = np.asarray(self.toxic, dtype=np.intp)
        self.nontoxic = np.asarray(self.nontoxic if self.nontoxic is not None else [], dtype=np.intp)
        if np.intersect1d(self.toxic, self.nontoxic).size:
            raise ContractViolation("toxic and non-toxic positions overlap")

    @classmethod
    def from_char_spans(cls, spans, length: int) -> "TokenPartition":
        flags = np.zeros(length, dtype=bool)
        for s, e in spans:
            flags[s:e] = True
        return cls(np.flatnonzero(flags), np.flatnonzero(~flags))

    @property
    def eligible(self) -> bool:
        return self.toxic.size > 0 and self.nontoxic.size > 0


def ce_loss(log_probs, label: int) -> Node:
    return -ag.as_node(log_probs)[..., label]


def pgr_loss(g: Node, part: TokenPartition, margin: float = 1.0) -> Node:
    """Mean pairwise hinge pushing every toxic norm ``margin`` above every non-toxic one."""
    if not part.eligible:
        return ag.constant(0.0)
    gp = ag.reshape(g[part.toxic], (-1, 1))
    gn = ag.reshape(g[part.nontoxic], (1, -1))
    return ag.mean(ag.relu(gn - gp + margin))


def percentile(values, level: float) -> float:
    """Linear interpolation at zero-based rank ``level * (n - 1)``."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    rank = level * (v.size - 1)
    lo = int(np.floor(rank))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (rank - lo) * (v[hi] - v[lo]))


def ppt_thresholds(g_values, cfg: GcConfig) -> tuple[float, float]:
    """(percentile floor for non-toxic norms, target for toxic norms)."""
    g_values = np.asarray(g_values)
    return percentile(g_values, cfg.percentile), min(cfg.alpha * float(g_values.max()), cfg.cap)


def ppt_loss(g: Node, part: TokenPartition, cfg: GcConfig | None = None,
             thresholds: tuple[float, float] | None = None) -> Node:
    """Push toxic norms up to the capped target, pull non-toxic norms under the percentile.

    ``thresholds`` overrides the (floor, target) pair; gradient checks use
    this to freeze them at a reference point.
    """
    cfg = cfg or GcConfig()
    if not part.eligible:
        return ag.constant(0.0)
    floor, target = thresholds if thresholds is not None else ppt_thresholds(g.value, cfg)
    l_neg = ag.mean(ag.relu(g[part.nontoxic] - floor))
    l_pos = ag.mean(ag.relu(target - g[part.toxic]))
    return ag.scale(l_pos + l_neg, 0.5)


def contrastive_term(h_t: Node, h_pos: Node, h_neg: Node, temperature: float) -> Node:
    """Per-sample InfoNCE: own ``h_pos`` against other samples' ``h_neg``.

    Returns a ``(B,)`` Node. The candidate set for row t is its positive plus
    ``h_neg[k]`` for every k != t.
    """
    B = h_t.shape[0]
    eye = np.eye(B)
    pos = ag.scale(h_t @ ag.transpose(h_pos), 1.0 / temperature)
    neg = ag.scale(h_t @ ag.transpose(h_neg), 1.0 / temperature)
    logits = pos * ag.constant(eye) + neg * ag.constant(1.0 - eye)
    return ag.logsumexp(logits, axis=-1) - ag.sum(pos * ag.constant(eye), axis=-1)


def _unit(h: Node) -> Node:
    return h / ag.reshape(ag.norm(h, axis=-1), (-1, 1))


def arcl_loss(h_t: Node, h_p: Node, h_n: Node, temperature: float = 0.05,
              normalize: bool = False) -> Node:
    """Average of the toxic-stance and normal-stance InfoNCE terms over the batch."""
    if normalize:
        h_t, h_p, h_n = _unit(h_t), _unit(h_p), _unit(h_n)
    tox = contrastive_term(h_t, h_p, h_n, temperature)
    nor = contrastive_term(h_t, h_n, h_p, temperature)
    return ag.mean(ag.scale(tox + nor, 0.5))


def joint_loss(ce, pgr, ppt, arcl, lambda_grad: float = 0.8, lambda_sem: float = 0.5) -> Node:
    ce, pgr, ppt, arcl = (ag.as_node(x) for x in (ce, pgr, ppt, arcl))
    return ce + ag.scale(pgr + ppt, lambda_grad) + ag.scale(arcl, lambda_sem)
