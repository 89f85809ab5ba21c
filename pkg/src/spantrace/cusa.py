"""Cue-guided weak span annotation.

Saliency cues from a warmed-up classifier are rendered into the span
refining prompt; a refiner client answers with a list of phrases, which are
parsed and aligned back to character offsets. The same clients also produce
the two stance reasonings used by the contrastive objective.

Clients receive a :class:`Prompt` plus a lookup key (the sample id, or
``<id>/toxic`` / ``<id>/normal`` for reasonings). Remote clients ignore the
key; the deterministic mock answers from a fixture keyed by it.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Protocol

import numpy as np

from . import bicse
from .corpus import CorpusRecord
from .encoder import EncoderParams, Vocabulary
from .errors import ContractViolation, ParseEmptyError, RefinerError
from .saliency import saliency_sequence

log = logging.getLogger(__name__)

ASSETS = Path(__file__).parent / "assets"
HINT_SEPARATOR = "、"
CUE_QUANTILE = 0.15
CUE_ONLY, REFINED = "cue_only", "refined"


@lru_cache(maxsize=None)
def template(name: str) -> str:
    return (ASSETS / f"{name}.txt").read_text(encoding="utf-8")


@dataclass(frozen=True)
class Prompt:
    system: str
    user: str

    def as_text(self) -> str:
        if not self.system:
            return self.user
        return f"System:\n{self.system}\nUser:\n{self.user}"


def _fill(tmpl: str, **slots: str) -> str:
    # Plain replacement: sentences may contain braces that str.format would choke on.
    for key, value in slots.items():
        tmpl = tmpl.replace("{" + key + "}", value)
    return tmpl


def render_refine_prompt(text: str, cues: list[str]) -> Prompt:
    return Prompt(template("refine_system"),
                  _fill(template("refine_user"), sentence=text, hint_text=HINT_SEPARATOR.join(cues)))


def render_reasoning_prompts(text: str) -> tuple[Prompt, Prompt]:
    return (Prompt("", _fill(template("reasoning_toxic"), sentence=text)),
            Prompt("", _fill(template("reasoning_normal"), sentence=text)))


_FENCE = re.compile(r"^```[^\n]*\n?|\n?```$")


def parse_refiner_output(raw: str) -> list[str]:
    """Phrases from a one-line enumeration; tolerant of fences and ASCII commas."""
    text = raw.strip()
    text = _FENCE.sub("", text).strip()
    text = text.strip("`").strip()
    items = re.split(r"[、,，\n]", text)
    phrases = []
    for item in items:
        item = item.strip().strip("*").strip()
        if item and item not in phrases:
            phrases.append(item)
    if not phrases:
        raise ParseEmptyError("refiner output contains no phrases")
    return phrases


def merge_char_spans(spans) -> list[tuple[int, int]]:
    out: list[list[int]] = []
    for s, e in sorted(spans):
        if out and s < out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return [(s, e) for s, e in out]


def align_phrases(text: str, phrases: list[str]) -> tuple[list[tuple[int, int]], list[str]]:
    """Every non-overlapping occurrence of every phrase, merged; plus warnings."""
    spans, warnings = [], []
    for phrase in phrases:
        start, found = text.find(phrase), False
        while start != -1:
            spans.append((start, start + len(phrase)))
            found = True
            start = text.find(phrase, start + len(phrase))
        if not found:
            warnings.append(f"phrase not found in text: {phrase!r}")
    return merge_char_spans(spans), warnings


@dataclass
class Cues:
    spans: list[tuple[int, int]]
    top_quantile: list[int] = field(default_factory=list)

    def substrings(self, text: str) -> list[str]:
        return [text[s:e] for s, e in self.spans]


def extract_cues(params: EncoderParams, vocab: Vocabulary, text: str) -> Cues:
    """BiCSE spans over toxic-class saliency, in character offsets.

    ``top_quantile`` lists cue characters whose saliency is within the top
    15% of the sentence; it is reported for inspection only.
    """
    if not text:
        raise ContractViolation("cannot extract cues from empty text")
    seq = saliency_sequence(params, vocab, text)
    spans = bicse.to_char_spans(bicse.extract(seq.scores), seq.offsets)
    cut = np.quantile(seq.scores, 1.0 - CUE_QUANTILE)
    top = [i for s, e in spans for i in range(s, e) if seq.scores[i] >= cut]
    return Cues(spans, top)


# --- clients ---------------------------------------------------------------

class RefinerClient(Protocol):
    def complete(self, prompt: Prompt, key: str | None = None) -> str: ...


class DeterministicMock:
    """Answers from a fixture map; unknown keys fail like a broken endpoint."""

    def __init__(self, answers: dict[str, str]):
        self.answers = dict(answers)

    @classmethod
    def from_file(cls, path) -> "DeterministicMock":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def complete(self, prompt: Prompt, key: str | None = None) -> str:
        if key not in self.answers:
            raise RefinerError(f"no fixture answer for {key!r}")
        return self.answers[key]


@dataclass
class HttpClient:
    """Generic JSON-over-HTTP chat client.

    ``body`` is a JSON-compatible template whose strings may contain
    ``{prompt}``, ``{system}`` and ``{user}``; ``response_path`` is a
    dot-separated path into the response document (integers index lists).
    The bearer token is read from ``token_env`` at call time.
    """

    url: str
    body: dict
    response_path: str
    token_env: str | None = None
    timeout: float = 60.0
    retries: int = 3
    backoff: float = 1.0

    @classmethod
    def from_config(cls, doc: dict) -> "HttpClient":
        return cls(**doc)

    def _payload(self, prompt: Prompt) -> bytes:
        slots = {"prompt": prompt.as_text(), "system": prompt.system, "user": prompt.user}

        def walk(node):
            if isinstance(node, str):
                return _fill(node, **slots)
            if isinstance(node, list):
                return [walk(x) for x in node]
            if isinstance(node, dict):
                return {k: walk(v) for k, v in node.items()}
            return node

        return json.dumps(walk(self.body), ensure_ascii=False).encode("utf-8")

    def _select(self, doc):
        node = doc
        for part in self.response_path.split("."):
            node = node[int(part)] if isinstance(node, list) else node[part]
        if not isinstance(node, str):
            raise RefinerError(f"response path {self.response_path!r} is not a string")
        return node

    def complete(self, prompt: Prompt, key: str | None = None) -> str:
        headers = {"Content-Type": "application/json"}
        if self.token_env:
            token = os.environ.get(self.token_env)
            if not token:
                raise RefinerError(f"environment variable {self.token_env} is not set")
            headers["Authorization"] = f"Bearer {token}"
        data = self._payload(prompt)
        last = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.url, data=data, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return self._select(json.loads(resp.read().decode("utf-8")))
            except (urllib.error.URLError, TimeoutError, json.JSONDecodeError, KeyError,
                    IndexError, ValueError) as exc:
                last = exc
                log.warning("refiner request %s failed (attempt %d/%d): %s", key, attempt + 1,
                            self.retries + 1, type(exc).__name__)
                if attempt < self.retries:
                    time.sleep(self.backoff * 2 ** attempt)
        raise RefinerError(f"refiner request failed after {self.retries + 1} attempts: "
                           f"{type(last).__name__}")


# --- pipeline --------------------------------------------------------------

@dataclass
class WeakAnnotation:
    id: str
    spans: list[tuple[int, int]]
    source: str
    warnings: list[str] = field(default_factory=list)
    raw_output: str | None = None
    error: str | None = None

    def to_json(self) -> dict:
        doc = {"id": self.id, "spans": [list(s) for s in self.spans], "source": self.source,
               "warnings": list(self.warnings), "raw_output": self.raw_output}
        if self.error is not None:
            doc["error"] = self.error
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "WeakAnnotation":
        return cls(doc["id"], [tuple(s) for s in doc["spans"]], doc["source"],
                   list(doc.get("warnings", [])), doc.get("raw_output"), doc.get("error"))


def refine(client: RefinerClient, sample_id: str, text: str, cues: Cues) -> WeakAnnotation:
    prompt = render_refine_prompt(text, cues.substrings(text))
    try:
        raw = client.complete(prompt, key=sample_id)
    except RefinerError as exc:
        return WeakAnnotation(sample_id, list(cues.spans), CUE_ONLY, error=str(exc))
    try:
        phrases = parse_refiner_output(raw)
    except ParseEmptyError as exc:
        return WeakAnnotation(sample_id, list(cues.spans), CUE_ONLY, raw_output=raw, error=str(exc))
    spans, warnings = align_phrases(text, phrases)
    if not spans:
        return WeakAnnotation(sample_id, list(cues.spans), CUE_ONLY, warnings, raw,
                              "no refined phrase aligns to the text")
    return WeakAnnotation(sample_id, spans, REFINED, warnings, raw)


def _ordered_map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def annotate(client: RefinerClient, params: EncoderParams, vocab: Vocabulary,
             records: list[CorpusRecord], workers: int = 4) -> list[WeakAnnotation]:
    """Weak spans for every toxic-labelled record, ordered by record id."""
    toxic = sorted((r for r in records if r.label == 1), key=lambda r: r.id)
    cues = [extract_cues(params, vocab, r.text) for r in toxic]
    return _ordered_map(lambda pair: refine(client, pair[0].id, pair[0].text, pair[1]),
                        list(zip(toxic, cues)), workers)


def apply_annotations(records: list[CorpusRecord], annotations) -> list[CorpusRecord]:
    by_id = {a.id: a for a in annotations}
    for r in records:
        if r.id in by_id:
            r.weak_spans = list(by_id[r.id].spans)
    return records


def generate_reasonings(client: RefinerClient, records: list[CorpusRecord],
                        workers: int = 4) -> dict[str, dict[str, str]]:
    """Both stance reasonings for every record; raises on client failure."""
    ordered = sorted(records, key=lambda r: r.id)

    def one(rec: CorpusRecord) -> dict[str, str]:
        tox, nor = render_reasoning_prompts(rec.text)
        return {"toxic": client.complete(tox, key=f"{rec.id}/toxic").strip(),
                "normal": client.complete(nor, key=f"{rec.id}/normal").strip()}

    return dict(zip((r.id for r in ordered), _ordered_map(one, ordered, workers)))
