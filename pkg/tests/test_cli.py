import json
from pathlib import Path

import pytest

from spantrace import cli, corpus

GOLDEN = Path(__file__).parent / "golden"


def run(argv, capsys):
    code = cli.run(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_bicse_inline_scores(capsys):
    code, out, _ = run(["bicse", "--scores", "0.1,0.1,0.9,0.95,0.2,0.1"], capsys)
    assert code == 0 and json.loads(out) == [[2, 4]]


def test_bicse_file_has_one_line_per_sequence(tmp_path, capsys):
    path = tmp_path / "scores.txt"
    path.write_text("[0.2,0.9,0.8,0.7,0.6,0.2]\n\n[1,1,1,1]\n", encoding="utf-8")
    code, out, _ = run(["bicse", "--scores", str(path)], capsys)
    assert code == 0 and [json.loads(x) for x in out.splitlines()] == [[[1, 5]], []]


def test_unknown_flag_gives_structured_error(capsys):
    code, _, err = run(["bicse", "--scores", "1,2,3", "--bogus"], capsys)
    assert code == cli.EXIT_USAGE and json.loads(err)["error"] == "usage"


def test_missing_input_gives_structured_error(tmp_path, capsys):
    code, _, err = run(["train-warmup", "--corpus", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_DATA and json.loads(err)["error"] == "missing_input"


def test_schema_violation_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a", "text": "ab", "label": 1, "gold_spans": [[1, 5]]}\n', encoding="utf-8")
    code, _, err = run(["train-warmup", "--corpus", str(bad), "--out", str(tmp_path)], capsys)
    doc = json.loads(err)
    assert code == cli.EXIT_DATA and doc["error"] == "validation" and doc["line"] == 1


def test_eval_spans_reproduces_golden_report(tmp_path, capsys):
    code, _, _ = run(["eval-spans", "--corpus", str(GOLDEN / "eval_corpus.jsonl"),
                      "--predictions", str(GOLDEN / "eval_predictions.jsonl"), "--out", str(tmp_path)], capsys)
    assert code == 0
    assert (tmp_path / "metrics_spans.json").read_bytes() == (GOLDEN / "metrics_spans.json").read_bytes()
    manifest = json.loads((tmp_path / "manifest-eval-spans.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "eval-spans" and set(manifest["outputs"]) == {"metrics_spans.json"}
    assert len(manifest["inputs"]) == 2


def test_eval_reports_missing_predictions(tmp_path, capsys):
    preds = tmp_path / "p.jsonl"
    preds.write_text('{"id": "r1", "label": 1, "spans": []}\n', encoding="utf-8")
    code, _, err = run(["eval-spans", "--corpus", str(GOLDEN / "eval_corpus.jsonl"),
                        "--predictions", str(preds), "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_DATA and json.loads(err)["record_id"] == "r2"


def test_extract_gates_spans_on_predicted_label(pipeline):
    preds = [json.loads(x) for x in (pipeline["dir"] / "predictions.jsonl").read_text().splitlines()]
    clean = [p for p in preds if p["label"] == 0]
    assert clean and all(p["spans"] == [] for p in clean)
    assert any(p["spans"] for p in preds if p["label"] == 1)


def test_extract_dumps_saliency(pipeline, tmp_path, capsys):
    d = pipeline["dir"]
    one = tmp_path / "one.jsonl"
    corpus.save(corpus.load(d / "test.jsonl")[:3], one)
    code, _, _ = run(["extract", "--corpus", str(one), "--checkpoint", str(d / "joint.ckpt.json"),
                      "--dump-saliency", "--out", str(tmp_path)], capsys)
    assert code == 0
    docs = [json.loads(x) for x in (tmp_path / "predictions.jsonl").read_text().splitlines()]
    for doc, r in zip(docs, corpus.load(one)):
        dump = doc["saliency"]
        assert dump["text"] == r.text and dump["class"] == 1
        assert len(dump["scores"]) == len(dump["offsets"]) == len(r.text)


def test_annotate_reports_fallbacks(pipeline, tmp_path, capsys):
    d = pipeline["dir"]
    small = tmp_path / "small.jsonl"
    corpus.save([r for r in corpus.load(d / "train.jsonl") if r.label == 1][:2], small)
    empty = tmp_path / "empty.json"
    empty.write_text("{}", encoding="utf-8")
    code, out, err = run(["annotate", "--corpus", str(small), "--checkpoint", str(d / "warmup.ckpt.json"),
                          "--mock-refiner", str(empty), "--out", str(tmp_path)], capsys)
    assert code == 0 and "0/2 refined" in out
    assert all(json.loads(x)["warning"] == "refiner_fallback" for x in err.splitlines())


def test_pipeline_runs_within_budget(pipeline):
    assert pipeline["timings"]["core"] < 300
    for step in ("synth", "train-warmup", "annotate", "reasonings", "train-joint", "extract", "eval-spans"):
        assert (pipeline["dir"] / f"manifest-{step}.json").is_file()
