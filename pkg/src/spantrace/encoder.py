"""Character-level single-head attention encoder with a binary head.

Layout of one forward pass over a padded batch of token ids ``(B, n)``::

    E = tok[ids] + pos[:n]                      # embedding layer output
    A = softmax(E Wq (E Wk)^T / sqrt(d) + mask)
    R = E + A (E Wv) Wo
    H = R + tanh(R W1) W2                       # contextual states
    log P(y|X) = log_softmax(H[:, 0] Wc + bc)   # head on the cls state
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Node
from .errors import ContractViolation, TruncationError, ValidationError

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
N_SPECIAL = 5
SPECIAL_NAMES = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")
MAX_POSITIONS = 512

ENCODER_KEYS = ("tok", "pos", "wq", "wk", "wv", "wo", "w1", "w2")
HEAD_KEYS = ("wc", "bc")
PARAM_KEYS = ENCODER_KEYS + HEAD_KEYS

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class Vocabulary:
    chars: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise ContractViolation("duplicate characters in vocabulary")
        if any(len(c) != 1 for c in self.chars):
            raise ContractViolation("vocabulary entries must be single characters")
        object.__setattr__(self, "index", {c: i + N_SPECIAL for i, c in enumerate(self.chars)})

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        return cls(tuple(sorted({c for t in texts for c in t})))

    @property
    def size(self) -> int:
        return N_SPECIAL + len(self.chars)

    def id_of(self, char: str) -> int:
        return self.index.get(char, UNK)

    def token_of(self, idx: int) -> str:
        if idx < N_SPECIAL:
            return SPECIAL_NAMES[idx]
        return self.chars[idx - N_SPECIAL]

    def encode(self, text: str, max_positions: int = MAX_POSITIONS) -> np.ndarray:
        """Token ids ``[cls] + chars + [sep]``; token ``i + 1`` is character ``i``."""
        if len(text) + 2 > max_positions:
            raise TruncationError(
                f"text of {len(text)} characters exceeds the {max_positions - 2}-character limit")
        return np.array([CLS] + [self.id_of(c) for c in text] + [SEP], dtype=np.intp)

    def decode(self, ids) -> str:
        return "".join(self.chars[i - N_SPECIAL] if i >= N_SPECIAL else "�"
                       for i in ids if i not in (PAD, CLS, SEP))


@dataclass
class EncoderParams:
    arrays: dict[str, np.ndarray]

    @property
    def dim(self) -> int:
        return self.arrays["tok"].shape[1]

    @property
    def vocab_size(self) -> int:
        return self.arrays["tok"].shape[0]

    @property
    def max_positions(self) -> int:
        return self.arrays["pos"].shape[0]

    def census(self) -> dict[str, int]:
        counts = {k: int(self.arrays[k].size) for k in PARAM_KEYS}
        counts["total"] = sum(counts.values())
        return counts

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.arrays.items()})

    def nodes(self, requires_grad: bool = False) -> dict[str, Node]:
        return {k: Node(v, requires_grad=requires_grad) for k, v in self.arrays.items()}


def declared_shapes(vocab_size: int, dim: int, max_positions: int = MAX_POSITIONS) -> dict:
    return {
        "tok": (vocab_size, dim), "pos": (max_positions, dim),
        "wq": (dim, dim), "wk": (dim, dim), "wv": (dim, dim), "wo": (dim, dim),
        "w1": (dim, 4 * dim), "w2": (4 * dim, dim),
        "wc": (dim, 2), "bc": (2,),
    }


def init_params(vocab_size: int, dim: int = 32, max_positions: int = MAX_POSITIONS,
                seed: int = 0) -> EncoderParams:
    rng = np.random.default_rng(seed)
    shapes = declared_shapes(vocab_size, dim, max_positions)
    stds = {"tok": 0.5, "pos": 0.1, "wq": dim ** -0.5, "wk": dim ** -0.5,
            "wv": dim ** -0.5, "wo": dim ** -0.5, "w1": dim ** -0.5,
            "w2": (4 * dim) ** -0.5, "wc": dim ** -0.5, "bc": 0.0}
    return EncoderParams({k: rng.normal(0.0, stds[k], size=shapes[k]) for k in PARAM_KEYS})


def zero_params(vocab_size: int, dim: int = 32, max_positions: int = MAX_POSITIONS) -> EncoderParams:
    return EncoderParams({k: np.zeros(s) for k, s in declared_shapes(vocab_size, dim, max_positions).items()})


@dataclass
class Encoding:
    """Forward-pass products for a padded batch."""

    ids: np.ndarray           # (B, n) token ids, PAD-filled
    lengths: np.ndarray       # (B,) non-special token counts
    embeddings: Node          # (B, n, d)
    states: Node              # (B, n, d); states[:, 0] is the cls state
    cls: Node                 # (B, d)
    log_probs: Node           # (B, 2)


def pad_batch(sequences) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in sequences)
    ids = np.full((len(sequences), width), PAD, dtype=np.intp)
    for b, s in enumerate(sequences):
        ids[b, :len(s)] = s
    lengths = np.array([len(s) - 2 for s in sequences], dtype=np.intp)
    return ids, lengths


def forward(params: dict[str, Node], ids: np.ndarray, lengths: np.ndarray | None = None) -> Encoding:
    ids = np.atleast_2d(np.asarray(ids, dtype=np.intp))
    B, n = ids.shape
    V, d = params["tok"].shape
    if n > params["pos"].shape[0]:
        raise TruncationError(f"sequence of {n} tokens exceeds {params['pos'].shape[0]} positions")
    if ids.min() < 0 or ids.max() >= V:
        raise ContractViolation(f"token id out of range [0, {V})")
    if lengths is None:
        lengths = (ids != PAD).sum(axis=1) - 2

    E = ag.gather_rows(params["tok"], ids) + params["pos"][:n]
    key_mask = ag.constant(np.where(ids == PAD, -1e9, 0.0)[:, None, :])
    scores = ag.scale(E @ params["wq"] @ ag.transpose(E @ params["wk"]), d ** -0.5)
    attn = ag.softmax(scores + key_mask)
    R = E + attn @ (E @ params["wv"]) @ params["wo"]
    H = R + ag.tanh(R @ params["w1"]) @ params["w2"]
    h_cls = H[:, 0, :]
    logits = h_cls @ params["wc"] + params["bc"]
    return Encoding(ids, np.asarray(lengths), E, H, h_cls, ag.log_softmax(logits))


def encode(params: EncoderParams, token_ids, requires_grad: bool = False) -> Encoding:
    """Encode one token-id sequence; the result has batch size 1.

    The embedding Node is always part of the recorded graph so callers can
    take gradients of the log-probabilities with respect to it.
    """
    token_ids = np.asarray(token_ids, dtype=np.intp)
    if token_ids.ndim != 1 or len(token_ids) < 1:
        raise ContractViolation("encode expects a non-empty 1-D id sequence")
    nodes = params.nodes(requires_grad=requires_grad)
    if not requires_grad:
        nodes["tok"].requires_grad = True  # keeps E differentiable; params untouched
    return forward(nodes, token_ids[None, :], np.array([max(len(token_ids) - 2, 0)]))


def encode_texts(params: EncoderParams, vocab: Vocabulary, texts, requires_grad: bool = False,
                 nodes: dict[str, Node] | None = None) -> Encoding:
    seqs = [vocab.encode(t, params.max_positions) for t in texts]
    ids, lengths = pad_batch(seqs)
    if nodes is None:
        nodes = params.nodes(requires_grad=requires_grad)
    return forward(nodes, ids, lengths)


def toxic_probabilities(params: EncoderParams, vocab: Vocabulary, texts, batch_size: int = 64) -> np.ndarray:
    out = []
    with ag.no_grad():
        nodes = params.nodes()
        for lo in range(0, len(texts), batch_size):
            enc = encode_texts(params, vocab, texts[lo:lo + batch_size], nodes=nodes)
            out.append(np.exp(enc.log_probs.value[:, 1]))
    return np.concatenate(out) if out else np.zeros(0)


def probabilities_for_ids(params: EncoderParams, sequences, batch_size: int = 64) -> np.ndarray:
    """P(toxic) for pre-tokenised sequences (used by masking experiments)."""
    out = []
    with ag.no_grad():
        nodes = params.nodes()
        for lo in range(0, len(sequences), batch_size):
            ids, lengths = pad_batch(sequences[lo:lo + batch_size])
            out.append(np.exp(forward(nodes, ids, lengths).log_probs.value[:, 1]))
    return np.concatenate(out) if out else np.zeros(0)


def label_from_log_probs(log_probs: np.ndarray) -> np.ndarray:
    """Argmax over the two classes; ties go to non-toxic."""
    log_probs = np.atleast_2d(log_probs)
    return (log_probs[:, 1] > log_probs[:, 0]).astype(int)


def predict(params: EncoderParams, text: str, vocab: Vocabulary) -> tuple[int, float]:
    if not text:
        raise ContractViolation("cannot classify empty text")
    with ag.no_grad():
        enc = encode_texts(params, vocab, [text])
    lp = enc.log_probs.value
    return int(label_from_log_probs(lp)[0]), float(np.exp(lp[0, 1]))


def predict_many(params: EncoderParams, vocab: Vocabulary, texts, batch_size: int = 64):
    labels, probs = [], []
    with ag.no_grad():
        nodes = params.nodes()
        for lo in range(0, len(texts), batch_size):
            lp = encode_texts(params, vocab, texts[lo:lo + batch_size], nodes=nodes).log_probs.value
            labels.append(label_from_log_probs(lp))
            probs.append(np.exp(lp[:, 1]))
    if not labels:
        return np.zeros(0, dtype=int), np.zeros(0)
    return np.concatenate(labels), np.concatenate(probs)


# --- serialization --------------------------------------------------------

def _pack(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _unpack(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)


def params_to_dict(params: EncoderParams, vocab: Vocabulary) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT,
        "vocabulary": list(vocab.chars),
        "dim": params.dim,
        "max_positions": params.max_positions,
        "params": {k: _pack(params.arrays[k]) for k in PARAM_KEYS},
    }


def params_from_dict(doc: dict) -> tuple[EncoderParams, Vocabulary]:
    if doc.get("format_version") != CHECKPOINT_FORMAT:
        raise ValidationError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    vocab = Vocabulary(tuple(doc["vocabulary"]))
    arrays = {k: _unpack(doc["params"][k]) for k in PARAM_KEYS}
    expected = declared_shapes(vocab.size, doc["dim"], doc["max_positions"])
    for k, shape in expected.items():
        if arrays[k].shape != shape:
            raise ValidationError(f"parameter {k} has shape {arrays[k].shape}, expected {shape}")
    return EncoderParams(arrays), vocab
