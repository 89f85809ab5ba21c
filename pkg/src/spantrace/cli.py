"""Command-line entry point: ``spantrace <command> ...``.

Every command writes machine-readable outputs plus a ``manifest-<command>.json``
run manifest into ``--out``. Failures print one JSON object on stderr and
exit nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bicse, corpus, cusa, evalkit
from .corpus import CorpusRecord, SynthConfig
from .encoder import predict_many
from .errors import (ContractViolation, DataContractError, NumericFault, ParseEmptyError,
                     RefinerError, ValidationError)
from .saliency import attribution_batch
from .training import (SELF_TEST_TOLERANCE, Checkpoint, TrainConfig, gradient_self_test, joint_train,
                       warmup)

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_REFINER, EXIT_INTERNAL = 2, 3, 4, 5, 1


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_DATA, **extra):
        super().__init__(message)
        self.kind, self.code, self.extra = kind, code, extra


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_config(path, section: str) -> dict:
    if not path:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return doc.get(section, {})


def _train_config(args) -> TrainConfig:
    doc = _read_config(args.config, "train")
    if args.seed is not None:
        doc["seed"] = args.seed
    return TrainConfig.from_dict(doc)


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_input", f"{what} not found: {path}")
    return p


def _load_corpus(path) -> list[CorpusRecord]:
    return corpus.load(_require(path, "corpus"))


def _load_checkpoint(path) -> Checkpoint:
    return Checkpoint.load(_require(path, "checkpoint"))


def _write_jsonl(path: Path, docs) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc in docs:
            fh.write(json.dumps(doc, ensure_ascii=False, sort_keys=True) + "\n")


def _read_jsonl(path) -> list[dict]:
    out = []
    with open(_require(path, "input"), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ValidationError(f"malformed JSON: {exc.msg}", line=lineno) from None
    return out


def _client(args):
    if args.mock_refiner:
        return cusa.DeterministicMock.from_file(_require(args.mock_refiner, "mock fixture"))
    if args.endpoint:
        doc = _read_config(args.config, "refiner")
        doc.setdefault("body", {"messages": [{"role": "system", "content": "{system}"},
                                             {"role": "user", "content": "{user}"}]})
        doc.setdefault("response_path", "choices.0.message.content")
        doc["url"] = args.endpoint
        return cusa.HttpClient.from_config(doc)
    raise CliError("usage", "one of --mock-refiner or --endpoint is required", EXIT_USAGE)


# --- commands --------------------------------------------------------------

def cmd_synth(args, out: Path) -> tuple[dict, list[str]]:
    doc = _read_config(args.config, "synth")
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = SynthConfig.from_dict(doc)
    syn = corpus.generate(cfg)
    train, test = corpus.stratified_split(syn.records, args.test_fraction, cfg.seed)
    corpus.save(syn.records, out / "corpus.jsonl")
    corpus.save(train, out / "train.jsonl")
    corpus.save(test, out / "test.jsonl")
    fixtures = {"refiner_fixture.json": corpus.refiner_fixture(syn.records),
                "reasoning_fixture.json": corpus.reasoning_fixture(syn, syn.records, cfg.seed)}
    for name, fx in fixtures.items():
        (out / name).write_text(json.dumps(fx, ensure_ascii=False, sort_keys=True, indent=1) + "\n",
                                encoding="utf-8")
    print(f"synth: {len(train)} train / {len(test)} test records, lexicon of {len(syn.lexicon)}")
    return {"synth": cfg.to_dict(), "test_fraction": args.test_fraction}, [
        "corpus.jsonl", "train.jsonl", "test.jsonl", *fixtures]


def _history_writer(path: Path):
    fh = open(path, "w", encoding="utf-8", newline="\n")

    def on_step(entry):
        fh.write(json.dumps(entry, sort_keys=True) + "\n")

    return fh, on_step


def cmd_train_warmup(args, out: Path) -> tuple[dict, list[str]]:
    cfg = _train_config(args)
    records = _load_corpus(args.corpus)
    fh, on_step = _history_writer(out / "warmup_history.jsonl")
    with fh:
        ck = warmup(cfg, records, on_step=on_step)
    ck.save(out / "warmup.ckpt.json")
    print(f"train-warmup: {ck.step} steps, final ce {ck.history[-1]['ce']:.4f}")
    return {"train": cfg.to_dict()}, ["warmup.ckpt.json", "warmup_history.jsonl"]


def cmd_train_joint(args, out: Path) -> tuple[dict, list[str]]:
    cfg = _train_config(args)
    records = _load_corpus(args.corpus)
    ck = _load_checkpoint(args.checkpoint)
    fd_error = gradient_self_test(cfg)
    if not fd_error < SELF_TEST_TOLERANCE:
        raise NumericFault(f"joint gradient self-test failed: relative error {fd_error:.3e}",
                           op="gradient_self_test")
    fh, on_step = _history_writer(out / "joint_history.jsonl")
    with fh:
        ck2 = joint_train(cfg, records, ck, on_step=on_step)
    ck2.save(out / "joint.ckpt.json")
    print(f"train-joint: {len(ck2.history)} steps, final total {ck2.history[-1]['total']:.4f}")
    return ({"train": cfg.to_dict(), "gradient_self_test": fd_error},
            ["joint.ckpt.json", "joint_history.jsonl"])


def cmd_annotate(args, out: Path) -> tuple[dict, list[str]]:
    records = _load_corpus(args.corpus)
    ck = _load_checkpoint(args.checkpoint)
    anns = cusa.annotate(_client(args), ck.params, ck.vocab, records, workers=args.workers)
    _write_jsonl(out / "annotations.jsonl", (a.to_json() for a in anns))
    corpus.save(cusa.apply_annotations(records, anns), out / "annotated.jsonl")
    refined = sum(a.source == cusa.REFINED for a in anns)
    for a in anns:
        if a.error:
            print(json.dumps({"warning": "refiner_fallback", "id": a.id, "message": a.error},
                             ensure_ascii=False), file=sys.stderr)
    print(f"annotate: {refined}/{len(anns)} refined, {len(anns) - refined} cue-only fallbacks")
    return ({"workers": args.workers, "client": "mock" if args.mock_refiner else "http"},
            ["annotations.jsonl", "annotated.jsonl"])


def cmd_reasonings(args, out: Path) -> tuple[dict, list[str]]:
    records = _load_corpus(args.corpus)
    try:
        reasons = cusa.generate_reasonings(_client(args), records, workers=args.workers)
    except RefinerError as exc:
        raise CliError("refiner", str(exc), EXIT_REFINER) from None
    for r in records:
        r.reasonings = reasons[r.id]
    corpus.save(records, out / "reasoned.jsonl")
    print(f"reasonings: {len(records)} records")
    return {"workers": args.workers, "client": "mock" if args.mock_refiner else "http"}, ["reasoned.jsonl"]


def cmd_extract(args, out: Path) -> tuple[dict, list[str]]:
    records = _load_corpus(args.corpus)
    ck = _load_checkpoint(args.checkpoint)
    texts = [r.text for r in records]
    labels, probs = predict_many(ck.params, ck.vocab, texts)
    seqs = attribution_batch(ck.params, ck.vocab, texts)
    docs = []
    for r, lab, p, seq in zip(records, labels, probs, seqs):
        spans = bicse.to_char_spans(bicse.extract(seq.scores), seq.offsets) if lab == 1 else []
        doc = {"id": r.id, "label": int(lab), "prob_toxic": float(p), "spans": [list(s) for s in spans]}
        if args.dump_saliency:
            doc["saliency"] = {"text": r.text, **seq.to_json()}
        docs.append(doc)
    _write_jsonl(out / "predictions.jsonl", docs)
    print(f"extract: {int(labels.sum())}/{len(records)} predicted toxic")
    return {"dump_saliency": args.dump_saliency}, ["predictions.jsonl"]


def _predictions(path) -> dict[str, dict]:
    return {d["id"]: d for d in _read_jsonl(path)}


def _joined(records, preds):
    missing = [r.id for r in records if r.id not in preds]
    if missing:
        raise CliError("missing_prediction", f"no prediction for {len(missing)} records",
                       record_id=missing[0])
    return [(r, preds[r.id]) for r in records]


def _emit(report: evalkit.MetricsReport, out: Path, csv: bool) -> list[str]:
    names = [f"metrics_{report.kind}.json"]
    report.write(out / names[0])
    if csv:
        names.append(f"metrics_{report.kind}.csv")
        (out / names[1]).write_text(report.to_csv(), encoding="utf-8")
    print(json.dumps(report.metrics, sort_keys=True))
    return names


def cmd_eval_classify(args, out: Path) -> tuple[dict, list[str]]:
    pairs = _joined(_load_corpus(args.corpus), _predictions(args.predictions))
    report = evalkit.classification_report([r.label for r, _ in pairs], [p["label"] for _, p in pairs])
    return {}, _emit(report, out, args.csv)


def cmd_eval_spans(args, out: Path) -> tuple[dict, list[str]]:
    pairs = _joined([r for r in _load_corpus(args.corpus) if r.label == 1], _predictions(args.predictions))
    preds = [evalkit.SpanPrediction(r.id, [tuple(s) for s in p["spans"]], r.gold_spans or [], len(r.text))
             for r, p in pairs]
    return {}, _emit(evalkit.span_report(preds), out, args.csv)


def cmd_faithfulness(args, out: Path) -> tuple[dict, list[str]]:
    ck = _load_checkpoint(args.checkpoint)
    pairs = _joined([r for r in _load_corpus(args.corpus) if r.label == 1], _predictions(args.predictions))
    seed = 7 if args.seed is None else args.seed
    samples = [(r.id, r.text, [tuple(s) for s in p["spans"]]) for r, p in pairs if p["label"] == 1]
    records = evalkit.faithfulness(ck.params, ck.vocab, samples, seed=seed)
    _write_jsonl(out / "faithfulness.jsonl", (f.to_json() for f in records))
    names = _emit(evalkit.faithfulness_report(records, {"seed": seed}), out, args.csv)
    return {"seed": seed}, ["faithfulness.jsonl", *names]


def _score_lines(spec: str) -> list[np.ndarray]:
    """One sequence per non-empty line of a file, or the inline argument itself."""
    path = Path(spec)
    lines = path.read_text(encoding="utf-8").splitlines() if path.is_file() else [spec]
    out = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            values = json.loads(line) if line.startswith("[") else [float(x) for x in line.replace(",", " ").split()]
        except ValueError:
            raise CliError("usage", f"cannot parse scores on line {lineno}", EXIT_USAGE, line=lineno) from None
        out.append(np.asarray(values, dtype=np.float64))
    return out


def cmd_bicse(args, out: Path | None) -> tuple[dict, list[str]]:
    for scores in _score_lines(args.scores):
        spans = bicse.to_char_spans(bicse.extract(scores, adjacent=args.merge_adjacent))
        print(json.dumps([list(s) for s in spans]))
    return {}, []


COMMANDS = {
    "synth": cmd_synth, "train-warmup": cmd_train_warmup, "annotate": cmd_annotate,
    "reasonings": cmd_reasonings, "train-joint": cmd_train_joint, "extract": cmd_extract,
    "eval-classify": cmd_eval_classify, "eval-spans": cmd_eval_spans,
    "faithfulness": cmd_faithfulness, "bicse": cmd_bicse,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with synth/train/refiner sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")

    parser = _Parser(prog="spantrace", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus and mock fixtures")
    p.add_argument("--test-fraction", type=float, default=0.25)

    for name in ("train-warmup", "train-joint"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--corpus", required=True)
        if name == "train-joint":
            p.add_argument("--checkpoint", required=True)

    for name in ("annotate", "reasonings"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--corpus", required=True)
        if name == "annotate":
            p.add_argument("--checkpoint", required=True)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--mock-refiner", metavar="FIXTURE")
        src.add_argument("--endpoint", metavar="URL")
        p.add_argument("--workers", type=int, default=4)

    p = sub.add_parser("extract", parents=[common])
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dump-saliency", action="store_true")

    for name in ("eval-classify", "eval-spans", "faithfulness"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--corpus", required=True)
        p.add_argument("--predictions", required=True)
        p.add_argument("--csv", action="store_true")
        if name == "faithfulness":
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("bicse", help="span oracle over raw scores")
    p.add_argument("--scores", required=True, help="comma/space separated numbers, JSON list, or a file")
    p.add_argument("--merge-adjacent", action="store_true")
    return parser


def _inputs(args) -> dict[str, str]:
    out = {}
    for key in ("config", "corpus", "checkpoint", "predictions", "mock_refiner"):
        path = getattr(args, key, None)
        if path and Path(path).is_file():
            out[str(path)] = sha256_file(path)
    return out


def run(argv=None) -> int:
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    t0 = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        out = None
        if args.command != "bicse":
            out = Path(args.out or ".")
            out.mkdir(parents=True, exist_ok=True)
        inputs = _inputs(args)
        resolved, written = COMMANDS[args.command](args, out)
        if out is not None:
            outputs = {name: sha256_file(out / name) for name in sorted(written)}
            manifest = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv),
                        "config": resolved, "seed": args.seed, "inputs": inputs, "outputs": outputs,
                        "duration_s": round(time.perf_counter() - t0, 3)}
            (out / f"manifest-{args.command}.json").write_text(
                json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
        return 0
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code, **exc.extra)
    except ValidationError as exc:
        return _fail("validation", str(exc), EXIT_DATA, line=exc.line)
    except DataContractError as exc:
        return _fail("data_contract", str(exc), EXIT_DATA, record_id=exc.record_id)
    except NumericFault as exc:
        return _fail("numeric_fault", str(exc), EXIT_NUMERIC, op=exc.op)
    except (RefinerError, ParseEmptyError) as exc:
        return _fail("refiner", str(exc), EXIT_REFINER)
    except (ContractViolation, FileNotFoundError, json.JSONDecodeError, TypeError, KeyError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_DATA)


def _fail(kind: str, message: str, code: int, **extra) -> int:
    doc = {"error": kind, "message": message}
    doc.update({k: v for k, v in extra.items() if v is not None})
    print(json.dumps(doc, ensure_ascii=False), file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
