"""Per-token attribution scores from embedding-level gradients.

Two scores share one gradient ``d log P(y|X) / d e_i``:

* ``gradnorm``: its L2 norm, the quantity the gradient-constraint losses shape;
* ``saliency``: the L2 norm of ``e_i * gradient`` (gradient times input),
  which is what span extraction scans.

Only non-special tokens are scored; cls/sep/pad positions are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Node
from .encoder import EncoderParams, Encoding, Vocabulary, encode_texts
from .errors import NumericFault

SALIENCY = "saliency_eq1"
GRADNORM = "gradnorm_eq2"
TOXIC = 1


@dataclass
class SaliencySequence:
    scores: np.ndarray
    kind: str
    offsets: tuple[int, ...]
    cls: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.scores)):
            raise NumericFault("non-finite attribution score", op=self.kind)
        if len(self.scores) != len(self.offsets):
            raise ValueError("scores and offsets differ in length")

    def to_json(self) -> dict:
        return {"kind": self.kind, "class": self.cls, "scores": [float(s) for s in self.scores],
                "offsets": list(self.offsets)}


def embedding_gradients(enc: Encoding, classes, select=None, record_backward: bool = False) -> Node:
    """d log P(classes[b] | X_b) / d E for every sample in the batch.

    Samples never interact inside the encoder, so one backward pass of the
    summed log-probabilities yields every per-sample gradient. ``select`` is
    an optional boolean mask of samples to include.
    """
    B = enc.log_probs.shape[0]
    classes = np.broadcast_to(np.asarray(classes, dtype=np.intp), (B,))
    pick = np.zeros((B, 2))
    pick[np.arange(B), classes] = 1.0
    if select is not None:
        pick *= np.asarray(select, dtype=np.float64)[:, None]
    target = ag.sum(enc.log_probs * ag.constant(pick))
    (grad,) = ag.gradient(target, [enc.embeddings], record_backward=record_backward)
    return grad


def gradient_norms(grad: Node) -> Node:
    return ag.norm(grad, axis=-1)


def saliency_norms(embeddings: Node, grad: Node) -> Node:
    return ag.norm(embeddings * grad, axis=-1)


def _texts(samples) -> list[str]:
    return [s if isinstance(s, str) else s.text for s in samples]


def attribution_batch(params: EncoderParams, vocab: Vocabulary, samples, cls: int = TOXIC,
                      kind: str = SALIENCY, batch_size: int = 64) -> list[SaliencySequence]:
    texts = _texts(samples)
    out = []
    nodes = params.nodes()
    nodes["tok"].requires_grad = True  # only to keep E on the tape
    for lo in range(0, len(texts), batch_size):
        chunk = texts[lo:lo + batch_size]
        enc = encode_texts(params, vocab, chunk, nodes=nodes)
        grad = embedding_gradients(enc, cls)
        if kind == SALIENCY:
            with ag.no_grad():
                scores = saliency_norms(ag.stop_gradient(enc.embeddings), grad).value
        elif kind == GRADNORM:
            scores = np.sqrt(np.sum(grad.value ** 2, axis=-1))
        else:
            raise ValueError(f"unknown attribution kind {kind!r}")
        for b, text in enumerate(chunk):
            out.append(SaliencySequence(scores[b, 1:1 + len(text)].copy(), kind,
                                        tuple(range(len(text))), cls))
    return out


def saliency_sequence(params: EncoderParams, vocab: Vocabulary, sample, cls: int = TOXIC) -> SaliencySequence:
    return attribution_batch(params, vocab, [sample], cls, SALIENCY)[0]


def gradnorm_sequence(params: EncoderParams, vocab: Vocabulary, sample, cls: int = TOXIC) -> SaliencySequence:
    return attribution_batch(params, vocab, [sample], cls, GRADNORM)[0]
