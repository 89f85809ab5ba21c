"""Shared fixtures: random differentiable graphs and a tiny frozen joint batch."""

from __future__ import annotations

import numpy as np

from spantrace import autograd as ag
from spantrace import encoder, training
from spantrace.corpus import CorpusRecord
from spantrace.encoder import PARAM_KEYS, EncoderParams, Vocabulary
from spantrace.losses import ArclConfig, GcConfig, TokenPartition

KINK_MARGIN = 1e-3


# --- random graphs ---------------------------------------------------------

def _unary_ops(rng, n):
    M = ag.constant(rng.normal(size=(n, n)) / np.sqrt(n))
    c = ag.constant(rng.uniform(0.5, 1.5, size=n))
    k = int(rng.integers(1, n))
    return [
        ("tanh", ag.tanh),
        ("mul", lambda v: v * (c + v)),
        ("exp", lambda v: ag.exp(ag.scale(v, 0.3))),
        ("log", lambda v: ag.log(v * v + 1.0)),
        ("sqrt", lambda v: ag.sqrt(v * v + 1.0)),
        ("div", lambda v: v / (v * v + 1.0)),
        ("matmul", lambda v: ag.reshape(ag.reshape(v, (1, n)) @ M, (n,))),
        ("softmax", lambda v: ag.scale(ag.softmax(v), float(n))),
        ("log_softmax", ag.log_softmax),
        ("norm", lambda v: v * ag.norm(v) * 0.5),
        ("concat", lambda v: ag.concat([v[:k], ag.tanh(v[k:])])),
        ("transpose", lambda v: ag.reshape(ag.transpose(ag.reshape(v, (1, n))), (n,))),
        ("stack", lambda v: ag.mean(ag.stack([v, ag.tanh(v)]), axis=0)),
        ("logsumexp", lambda v: v - ag.logsumexp(v) * 0.5),
        ("sub", lambda v: c - v),
    ]


def _squash(v):
    return v / ag.sqrt(ag.mean(v * v) + 1.0)


def random_graph(seed: int, min_grad: float = 1e-3, attempts: int = 50):
    """A seeded, well-conditioned random graph: see :func:`_random_graph`.

    The per-coordinate relative error cannot resolve agreement where a true
    derivative is near zero (central differences carry ~1e-10 absolute
    noise), so, like kinks, such points are avoided: candidates are redrawn
    until every gradient coordinate has magnitude at least ``min_grad``.
    """
    rng = np.random.default_rng(seed)
    for _ in range(attempts):
        f, x0 = _random_graph(rng)
        leaf = ag.Node(x0.copy(), requires_grad=True)
        (g,) = ag.gradient(f(leaf), [leaf])
        if np.min(np.abs(g.value)) >= min_grad:
            return f, x0
    raise RuntimeError(f"no well-conditioned graph for seed {seed}")


def _random_graph(rng: np.random.Generator):
    """A seeded scalar function of a small vector built from random op chains.

    Each op enters as a residual update ``v + op(v) / 2`` so gradients stay of
    order one instead of vanishing through saturated chains, which would make
    the relative error meaningless, and a smooth rescaling keeps values
    bounded. Returns ``(f, x0)``. Hinge ops are only placed where every argument sits at
    least ``KINK_MARGIN`` from the kink at ``x0``, and earlier intermediate
    values are reused so the graph is a DAG rather than a chain.
    """
    n = int(rng.integers(3, 6))
    x0 = rng.normal(size=n)
    ops = _unary_ops(rng, n)
    plan = []
    v = ag.constant(x0)
    saved = v
    for _ in range(int(rng.integers(4, 11))):
        roll = rng.random()
        if roll < 0.1:
            shift = float(rng.normal())
            if np.min(np.abs(v.value - shift)) > 10 * KINK_MARGIN:
                plan.append(("relu", shift))
                v = ag.relu(v - shift) + v * 0.1
                continue
        if roll < 0.25:
            plan.append(("reuse", None))
            v = v * 0.7 + saved * saved * 0.3
            continue
        name, fn = ops[int(rng.integers(len(ops)))]
        plan.append((name, fn))
        saved = v
        v = _squash(v + ag.scale(fn(v), 0.5))
    w = ag.constant(rng.uniform(0.5, 1.5, size=n))

    def f(x):
        v = saved_ = x
        for name, arg in plan:
            if name == "relu":
                v = ag.relu(v - arg) + v * 0.1
            elif name == "reuse":
                v = v * 0.7 + saved_ * saved_ * 0.3
            else:
                saved_ = v
                v = _squash(v + ag.scale(arg(v), 0.5))
        return ag.sum(v * w) + ag.scale(ag.sum(v * v), 0.1)

    return f, x0


# --- tiny joint batch ------------------------------------------------------

TOY_RECORDS = [
    CorpusRecord("t0", "abcdeab", 1, [(2, 4)], [(2, 4)], {"toxic": "xcd", "normal": "ycd"}),
    CorpusRecord("t1", "fadbe", 1, [(1, 3)], [(1, 3)], {"toxic": "xad", "normal": "yad"}),
]
TOY_DIM = 4
TOY_POSITIONS = 10


def toy_config() -> training.TrainConfig:
    return training.TrainConfig(dim=TOY_DIM, gc=GcConfig(), arcl=ArclConfig())


def flat_layout(params: EncoderParams):
    layout, lo = {}, 0
    for k in PARAM_KEYS:
        size = params.arrays[k].size
        layout[k] = (lo, lo + size, params.arrays[k].shape)
        lo += size
    return layout, lo


def flatten(params: EncoderParams) -> np.ndarray:
    return np.concatenate([params.arrays[k].ravel() for k in PARAM_KEYS])


def unflatten_nodes(theta, layout) -> dict:
    return {k: ag.reshape(theta[lo:hi], shape) for k, (lo, hi, shape) in layout.items()}


def hinge_arguments(params: EncoderParams, vocab: Vocabulary, batch, frozen) -> np.ndarray:
    """Every PGR and PPT hinge argument, plus every gradient norm, at ``params``."""
    enc = encoder.encode_texts(params, vocab, batch.texts, requires_grad=True)
    from spantrace.saliency import embedding_gradients, gradient_norms
    norms = gradient_norms(embedding_gradients(enc, 1)).value
    out = []
    for b, part in enumerate(batch.partitions):
        if part is None:
            continue
        g = norms[b, 1:1 + len(batch.texts[b])]
        floor, target = frozen[b]
        gp, gn = g[part.toxic], g[part.nontoxic]
        out += list((gn[None, :] - gp[:, None] + 1.0).ravel())
        out += list(gn - floor) + list(target - gp) + list(g)
    return np.asarray(out)


def toy_joint_fixture(max_seed: int = 200):
    """First seed whose frozen batch keeps every hinge ``KINK_MARGIN`` off its kink.

    Returns ``(params, vocab, batch, config, frozen)``.
    """
    config = toy_config()
    texts = [r.text for r in TOY_RECORDS] + [t for r in TOY_RECORDS for t in r.reasonings.values()]
    vocab = Vocabulary.from_texts(texts)
    batch = training._prepare(TOY_RECORDS, need_reasonings=True)
    for seed in range(max_seed):
        params = encoder.init_params(vocab.size, TOY_DIM, TOY_POSITIONS, seed=seed)
        _, parts = training.joint_objective(params, vocab, batch, config)
        frozen = parts["thresholds"]
        if np.min(np.abs(hinge_arguments(params, vocab, batch, frozen))) > KINK_MARGIN:
            return params, vocab, batch, config, frozen
    raise RuntimeError("no kink-free toy fixture found")


def joint_fd_error(step: float = 1e-5) -> float:
    params, vocab, batch, config, frozen = toy_joint_fixture()
    layout, _ = flat_layout(params)

    def f(theta):
        nodes = unflatten_nodes(theta, layout)
        total, _ = training.joint_objective(params, vocab, batch, config, nodes=nodes, frozen=frozen)
        return total

    return ag.finite_difference_check(f, flatten(params), step)


def partition(toxic, nontoxic) -> TokenPartition:
    return TokenPartition(np.asarray(toxic), np.asarray(nontoxic))


# --- span extraction properties -------------------------------------------

def random_score_sequence(rng: np.random.Generator) -> np.ndarray:
    """Continuous scores, or small integers so that ties and plateaus occur."""
    n = int(rng.integers(3, 41))
    if rng.random() < 0.5:
        return rng.gamma(1.0, 1.0, size=n)
    return rng.integers(0, 6, size=n).astype(np.float64)


def bicse_violations(g: np.ndarray, rng: np.random.Generator) -> list[str]:
    """Names of the span-extraction properties that ``g`` violates.

    Integer sequences are transformed by a power-of-two scale and an integer
    shift, which are exact in floating point; continuous ones by arbitrary
    positive scales and shifts.
    """
    from spantrace import bicse
    n = g.size
    base = [s.as_tuple() for s in bicse.extract(g)]
    integral = np.all(g == np.round(g))
    scale = float(2.0 ** rng.integers(-3, 4)) if integral else float(rng.uniform(0.1, 10.0))
    shift = float(rng.integers(-5, 6)) if integral else float(rng.uniform(-5.0, 5.0))
    out = []
    mirrored = sorted((n + 1 - e, n + 1 - s) for s, e in base)
    if [s.as_tuple() for s in bicse.extract(g[::-1])] != mirrored:
        out.append("reversal symmetry")
    if [s.as_tuple() for s in bicse.extract(g * scale)] != base:
        out.append("positive-scale invariance")
    if [s.as_tuple() for s in bicse.extract(g + shift)] != base:
        out.append("shift invariance")
    if any(b[0] <= a[1] for a, b in zip(base, base[1:])) or any(
            not 1 <= s <= e <= n for s, e in base):
        out.append("disjointness")
    mu = float(np.mean(g))
    if any(not np.any(g[s - 1:e] > mu) for s, e in base):
        out.append("evidence containment")
    return out


def ppt_oracle(g, toxic, nontoxic, level=0.15, alpha=1.1, cap=10.0) -> float:
    """Push/pull threshold loss written directly from its definition with numpy."""
    g = np.asarray(g, dtype=np.float64)
    tau = float(np.percentile(g, 100 * level, method="linear"))
    target = min(alpha * g.max(), cap)
    l_neg = np.mean(np.maximum(0.0, g[nontoxic] - tau))
    l_pos = np.mean(np.maximum(0.0, target - g[toxic]))
    return float((l_pos + l_neg) / 2)


# --- end-to-end pipeline ---------------------------------------------------

PIPELINE = ("synth", "train-warmup", "annotate", "reasonings", "train-joint", "extract", "eval-spans")


def run_pipeline(out, seed: int = 7, extras: bool = True) -> dict:
    """Run the documented CLI pipeline into ``out``; returns timings and artifacts.

    With ``extras`` the warm-up checkpoint is also evaluated (into
    ``out/warmup``) and classification and faithfulness reports are written,
    which the acceptance criteria compare against.
    """
    import json
    import time
    from pathlib import Path

    from spantrace import cli

    out = Path(out)
    d = str(out)
    steps = [
        ["synth", "--seed", str(seed), "--out", d],
        ["train-warmup", "--corpus", f"{d}/train.jsonl", "--seed", str(seed), "--out", d],
        ["annotate", "--corpus", f"{d}/train.jsonl", "--checkpoint", f"{d}/warmup.ckpt.json",
         "--mock-refiner", f"{d}/refiner_fixture.json", "--out", d],
        ["reasonings", "--corpus", f"{d}/annotated.jsonl", "--mock-refiner", f"{d}/reasoning_fixture.json",
         "--out", d],
        ["train-joint", "--corpus", f"{d}/reasoned.jsonl", "--checkpoint", f"{d}/warmup.ckpt.json",
         "--seed", str(seed), "--out", d],
        ["extract", "--corpus", f"{d}/test.jsonl", "--checkpoint", f"{d}/joint.ckpt.json", "--out", d],
        ["eval-spans", "--corpus", f"{d}/test.jsonl", "--predictions", f"{d}/predictions.jsonl", "--out", d],
    ]
    if extras:
        w = f"{d}/warmup"
        steps += [
            ["eval-classify", "--corpus", f"{d}/test.jsonl", "--predictions", f"{d}/predictions.jsonl",
             "--out", d],
            ["faithfulness", "--corpus", f"{d}/test.jsonl", "--predictions", f"{d}/predictions.jsonl",
             "--checkpoint", f"{d}/joint.ckpt.json", "--seed", str(seed), "--out", d],
            ["extract", "--corpus", f"{d}/test.jsonl", "--checkpoint", f"{d}/warmup.ckpt.json", "--out", w],
            ["eval-spans", "--corpus", f"{d}/test.jsonl", "--predictions", f"{w}/predictions.jsonl",
             "--out", w],
            ["eval-classify", "--corpus", f"{d}/test.jsonl", "--predictions", f"{w}/predictions.jsonl",
             "--out", w],
        ]
    timings = {}
    t_start = time.perf_counter()
    for argv in steps:
        t0 = time.perf_counter()
        code = cli.run(argv)
        if code != 0:
            raise RuntimeError(f"pipeline step {argv[0]} exited with {code}")
        timings[argv[0]] = timings.get(argv[0], 0.0) + time.perf_counter() - t0
        if len(timings) == len(PIPELINE) and "core" not in timings:
            timings["core"] = time.perf_counter() - t_start
    hashes = {}
    for manifest in sorted(out.rglob("manifest-*.json")):
        doc = json.loads(manifest.read_text(encoding="utf-8"))
        rel = manifest.parent.relative_to(out)
        hashes.update({f"{rel}/{k}": v for k, v in doc["outputs"].items()})
    return {"dir": out, "timings": timings, "hashes": hashes}
