"""Bidirectional cliff-based span extraction over a score sequence.

Positions are 1-indexed and spans inclusive inside this module, so the scan
logic can be read side by side with its pseudocode. Use
:func:`to_char_spans` to convert to 0-indexed half-open character offsets.

A span opens on a steep ascent above the mean (``g[i] > mu`` and
``g[i] - g[i-1] > tau``) and closes at the first cliff edge, where one big
drop is followed by a small one. Without a cliff, the span ends at the last
position above the mean seen before the scores fall to the mean or the
sequence runs out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation, NumericFault, UndefinedThresholds


@dataclass(frozen=True, order=True)
class TokenSpan:
    start: int
    end: int
    provenance: str = "forward"

    def __post_init__(self):
        if self.start < 1 or self.end < self.start:
            raise ContractViolation(f"invalid span ({self.start}, {self.end})")

    def as_tuple(self) -> tuple[int, int]:
        return (self.start, self.end)


@dataclass(frozen=True)
class ScanThresholds:
    mu: float
    tau_d: float


def _as_scores(scores) -> np.ndarray:
    g = np.asarray(scores, dtype=np.float64).ravel()
    if np.isnan(g).any():
        raise NumericFault("NaN in score sequence", op="bicse")
    if not np.all(np.isfinite(g)):
        raise NumericFault("non-finite score", op="bicse")
    return g


def thresholds(scores) -> ScanThresholds:
    g = _as_scores(scores)
    if g.size < 2:
        raise UndefinedThresholds(f"thresholds need at least 2 scores, got {g.size}")
    return ScanThresholds(float(np.mean(g)), float(np.median(np.abs(np.diff(g)))))


def find_cliff_end(scores, start: int, th: ScanThresholds) -> int:
    g = _as_scores(scores)
    n = g.size
    if not 1 <= start <= n:
        raise ContractViolation(f"start {start} outside [1, {n}]")
    G = np.concatenate(([math.nan], g))  # 1-indexed view
    mu, tau = th.mu, th.tau_d
    p = start
    for i in range(start, n + 1):
        if G[i] > mu:
            p = i
        if i <= n - 2 and G[i] - G[i + 1] > tau:
            if G[i + 1] - G[i + 2] <= tau:
                return i
        if G[i] <= mu:
            return p
    return p


def forward_scan(scores, th: ScanThresholds, provenance: str = "forward") -> list[TokenSpan]:
    g = _as_scores(scores)
    n = g.size
    G = np.concatenate(([math.nan], g))
    spans = []
    i = 2
    while i <= n:
        if G[i] > th.mu and G[i] - G[i - 1] > th.tau_d:
            e = find_cliff_end(g, i, th)
            spans.append(TokenSpan(i, e, provenance))
            i = e + 1
        else:
            i += 1
    return spans


def merge(spans: Sequence[TokenSpan], adjacent: bool = False) -> list[TokenSpan]:
    """Coalesce intersecting spans; with ``adjacent`` also touching ones."""
    out: list[TokenSpan] = []
    gap = 1 if adjacent else 0
    for sp in sorted(spans, key=lambda s: (s.start, s.end)):
        if out and sp.start <= out[-1].end + gap:
            last = out[-1]
            prov = last.provenance if last.provenance == sp.provenance else "merged"
            out[-1] = TokenSpan(last.start, max(last.end, sp.end), prov)
        else:
            out.append(sp)
    return out


def extract(scores, adjacent: bool = False) -> list[TokenSpan]:
    g = _as_scores(scores)
    n = g.size
    if n < 3:
        return []
    th = thresholds(g)
    fwd = forward_scan(g, th, "forward")
    bwd = [TokenSpan(n + 1 - s.end, n + 1 - s.start, "backward")
           for s in forward_scan(g[::-1], th, "backward")]
    return merge(fwd + bwd, adjacent=adjacent)


def to_char_spans(spans: Sequence[TokenSpan], offsets: Sequence[int] | None = None) -> list[tuple[int, int]]:
    """Map 1-indexed inclusive token spans to 0-indexed half-open char spans.

    ``offsets[k]`` is the character index of the k-th scored token (0-based);
    identity when omitted.
    """
    if offsets is None:
        return [(s.start - 1, s.end) for s in spans]
    return [(int(offsets[s.start - 1]), int(offsets[s.end - 1]) + 1) for s in spans]
