"""Corpus records, JSON-lines I/O, and a planted-span synthetic generator.

Character offsets everywhere are 0-indexed, half-open, and count unicode
code points (Python ``str`` indices), never bytes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

SCHEMA_VERSION = 1
Span = tuple[int, int]


@dataclass
class CorpusRecord:
    id: str
    text: str
    label: int
    gold_spans: list[Span] | None = None
    weak_spans: list[Span] | None = None
    reasonings: dict[str, str] | None = None

    def to_json(self) -> dict:
        out = {"id": self.id, "text": self.text, "label": self.label}
        for key in ("gold_spans", "weak_spans"):
            spans = getattr(self, key)
            if spans is not None:
                out[key] = [list(s) for s in spans]
        if self.reasonings is not None:
            out["reasonings"] = dict(self.reasonings)
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "CorpusRecord":
        if not isinstance(doc, dict):
            raise ValidationError("record must be a JSON object")
        missing = {"id", "text", "label"} - doc.keys()
        if missing:
            raise ValidationError(f"record missing fields {sorted(missing)}")
        unknown = doc.keys() - {"id", "text", "label", "gold_spans", "weak_spans", "reasonings"}
        if unknown:
            raise ValidationError(f"record has unknown fields {sorted(unknown)}")

        def spans(key):
            raw = doc.get(key)
            if raw is None:
                return None
            try:
                return [(int(s), int(e)) for s, e in raw]
            except (TypeError, ValueError):
                raise ValidationError(f"{key} must be a list of [start, end] pairs") from None

        rec = cls(str(doc["id"]), doc["text"], doc["label"], spans("gold_spans"),
                  spans("weak_spans"), doc.get("reasonings"))
        validate(rec)
        return rec


def validate_spans(spans, length: int, what: str = "spans") -> None:
    prev_end = None
    for s, e in sorted(spans):
        if not (0 <= s < e <= length):
            raise ValidationError(f"{what} [{s},{e}) out of bounds for text of length {length}")
        if prev_end is not None and s < prev_end:
            raise ValidationError(f"{what} overlap at [{s},{e})")
        prev_end = e


def validate(rec: CorpusRecord) -> None:
    if not isinstance(rec.text, str):
        raise ValidationError(f"{rec.id}: text must be a string")
    if rec.label not in (0, 1) or isinstance(rec.label, bool):
        raise ValidationError(f"{rec.id}: label must be 0 or 1")
    for key in ("gold_spans", "weak_spans"):
        spans = getattr(rec, key)
        if spans is not None:
            validate_spans(spans, len(rec.text), f"{rec.id}: {key}")
    if rec.gold_spans and rec.label != 1:
        raise ValidationError(f"{rec.id}: gold spans on a non-toxic record")
    if rec.reasonings is not None:
        if set(rec.reasonings) != {"toxic", "normal"} or not all(
                isinstance(v, str) for v in rec.reasonings.values()):
            raise ValidationError(f"{rec.id}: reasonings must map 'toxic' and 'normal' to strings")


def load(path) -> list[CorpusRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"malformed JSON: {exc.msg}", line=lineno) from None
            try:
                records.append(CorpusRecord.from_json(doc))
            except ValidationError as exc:
                raise ValidationError(str(exc), line=lineno) from None
    return records


def dumps_record(rec: CorpusRecord) -> str:
    return json.dumps(rec.to_json(), ensure_ascii=False, sort_keys=True)


def save(records, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps_record(rec) + "\n")


def schema_path() -> Path:
    return Path(__file__).parent / "assets" / "corpus.schema.json"


# --- synthetic planted-span corpus ---------------------------------------

@dataclass
class SynthConfig:
    alphabet_size: int = 200
    lexicon_size: int = 20
    lexicon_alphabet: int = 40
    phrase_length: tuple[int, int] = (2, 4)
    per_class: int = 1000
    length: tuple[int, int] = (8, 40)
    phrases_per_toxic: tuple[int, int] = (1, 2)
    decoy_rate: float = 0.01
    weak_fraction: float = 0.0
    weak_rate: float = 0.0
    seed: int = 7

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
        return cls(**kw)


@dataclass
class SyntheticCorpus:
    records: list[CorpusRecord]
    alphabet: list[str]
    lexicon: list[str]
    frame_chars: list[str] = field(default_factory=list)


_CJK_LO, _CJK_HI = 0x4E00, 0x9FA5
_FRAME_CHARS = 16


def _occurrences(text: str, phrases) -> list[tuple[int, int, str]]:
    found = []
    for p in phrases:
        start = text.find(p)
        while start != -1:
            found.append((start, start + len(p), p))
            start = text.find(p, start + 1)
    return sorted(found)


def generate(config: SynthConfig | None = None) -> SyntheticCorpus:
    """Class-balanced corpus; toxic texts carry lexicon phrases at gold offsets.

    Lexicon characters also occur in filler text at ``decoy_rate`` total
    probability, so single characters are not sufficient evidence. Filler
    is rejection-sampled so that no lexicon phrase appears outside its
    planted position.
    """
    cfg = config or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    codes = rng.choice(np.arange(_CJK_LO, _CJK_HI), size=cfg.alphabet_size + _FRAME_CHARS, replace=False)
    chars = [chr(int(c)) for c in codes]
    alphabet, frame = chars[:cfg.alphabet_size], chars[cfg.alphabet_size:]
    lex_chars = alphabet[:cfg.lexicon_alphabet]
    n_weak = int(round(cfg.weak_fraction * cfg.lexicon_alphabet))
    strong = set(lex_chars[n_weak:])

    lexicon: list[str] = []
    while len(lexicon) < cfg.lexicon_size:
        n = int(rng.integers(cfg.phrase_length[0], cfg.phrase_length[1] + 1))
        p = "".join(rng.choice(lex_chars, size=n))
        if (len(set(p)) == n and strong & set(p)
                and all(p not in q and q not in p for q in lexicon)):
            lexicon.append(p)

    n_strong = cfg.lexicon_alphabet - n_weak
    weights = np.full(cfg.alphabet_size, (1.0 - cfg.decoy_rate - cfg.weak_rate)
                      / (cfg.alphabet_size - cfg.lexicon_alphabet))
    weights[:n_weak] = cfg.weak_rate / n_weak if n_weak else 0.0
    weights[n_weak:cfg.lexicon_alphabet] = cfg.decoy_rate / n_strong

    def filler(n: int) -> list[str]:
        return list(rng.choice(alphabet, size=n, p=weights)) if n else []

    def toxic() -> tuple[str, list[Span]]:
        while True:
            length = int(rng.integers(cfg.length[0], cfg.length[1] + 1))
            k = int(rng.integers(cfg.phrases_per_toxic[0], cfg.phrases_per_toxic[1] + 1))
            picks = [lexicon[i] for i in rng.choice(len(lexicon), size=k, replace=False)]
            n_fill = length - sum(len(p) for p in picks)
            if n_fill + 1 < k:
                continue
            fill = filler(n_fill)
            slots = sorted(int(x) for x in rng.choice(len(fill) + 1, size=k, replace=False))
            parts, spans, cursor, pos = [], [], 0, 0
            for slot, phrase in zip(slots, picks):
                parts.append("".join(fill[cursor:slot]))
                pos += slot - cursor
                spans.append((pos, pos + len(phrase)))
                parts.append(phrase)
                pos += len(phrase)
                cursor = slot
            parts.append("".join(fill[cursor:]))
            text = "".join(parts)
            if [(s, e) for s, e, _ in _occurrences(text, lexicon)] == spans:
                return text, spans

    def clean() -> str:
        while True:
            length = int(rng.integers(cfg.length[0], cfg.length[1] + 1))
            text = "".join(filler(length))
            if not _occurrences(text, lexicon):
                return text

    rows = [(1,) + toxic() for _ in range(cfg.per_class)]
    rows += [(0, clean(), []) for _ in range(cfg.per_class)]
    order = rng.permutation(len(rows))
    records = [CorpusRecord(f"syn-{i:05d}", rows[j][1], rows[j][0], list(rows[j][2]))
               for i, j in enumerate(order)]
    return SyntheticCorpus(records, alphabet, lexicon, frame)


def stratified_split(records, test_fraction: float = 0.25, seed: int = 7):
    """Deterministic per-class split into (train, test), preserving input order."""
    rng = np.random.default_rng(seed)
    test_ids: set[str] = set()
    for label in (0, 1):
        ids = [r.id for r in records if r.label == label]
        k = int(round(len(ids) * test_fraction))
        test_ids.update(ids[i] for i in rng.permutation(len(ids))[:k])
    train = [r for r in records if r.id not in test_ids]
    test = [r for r in records if r.id in test_ids]
    return train, test


def span_texts(rec: CorpusRecord, spans=None) -> list[str]:
    spans = rec.gold_spans if spans is None else spans
    return [rec.text[s:e] for s, e in spans or []]


def refiner_fixture(records) -> dict[str, str]:
    """Mock refiner answers: each toxic record's gold phrases joined by '、'."""
    return {r.id: "、".join(span_texts(r)) for r in records if r.label == 1}


def reasoning_fixture(corpus: SyntheticCorpus, records, seed: int = 7) -> dict[str, str]:
    """Mock stance reasonings keyed ``<id>/toxic`` and ``<id>/normal``.

    Both stances open with a fixed stance frame and then quote the same
    evidence from the record, the way the reasoning prompts ask the model to
    cite the words it is judging: the planted phrases of a toxic record, or a
    short excerpt of a clean one.
    """
    rng = np.random.default_rng(seed)
    tox_frame = "".join(corpus.frame_chars[:8])
    nor_frame = "".join(corpus.frame_chars[8:16])
    out = {}
    for r in records:
        lo = int(rng.integers(0, max(len(r.text) - 3, 0) + 1))
        evidence = "".join(span_texts(r)) if r.label == 1 and r.gold_spans else r.text[lo:lo + 3]
        out[f"{r.id}/toxic"] = tox_frame + evidence
        out[f"{r.id}/normal"] = nor_frame + evidence
    return out
