import json

import pytest

from emqap.cli import main


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["toy", "--out", str(root / "data"), "--records", "24", "--seed", "1"]) == 0
    return root


def run(capsys, *argv):
    assert main(list(argv)) == 0
    return capsys.readouterr().out


@pytest.fixture(scope="module")
def pipeline(toy):
    """Ingest, index, pretrain and train once for the commands that need a model."""
    d = toy / "data"
    main(["ingest", "--corpus", str(d / "corpus.jsonl"), "--out", str(toy / "manuals.jsonl")])
    main(["index", "--manuals", str(toy / "manuals.jsonl"), "--out", str(toy / "idx")])
    main(["pretrain", "--corpus", str(toy / "manuals.jsonl"), "--out", str(toy / "enc"), "--d-model", "8",
          "--layers", "1", "--max-len", "64", "--batch-size", "16", "--strategy", "LRD"])
    main(["train", "--manuals", str(toy / "manuals.jsonl"), "--qa", str(d / "qa.jsonl"), "--pretrained", str(toy / "enc"),
          "--index-dir", str(toy / "idx"), "--out", str(toy / "model"), "--epochs", "2", "--batch", "8", "--k", "3"])
    return toy


def test_toy_writes_inputs(toy):
    assert {p.name for p in (toy / "data").iterdir()} == {"corpus.jsonl", "qa.jsonl", "embeddings.txt"}


def test_ingest_and_stats(pipeline, capsys):
    out = run(capsys, "stats", "--manuals", str(pipeline / "manuals.jsonl"))
    assert out.splitlines()[0] == "property,value"
    assert "No. of E-Manuals,3" in out
    out = run(capsys, "stats", "--qa", str(pipeline / "data" / "qa.jsonl"))
    assert "qa_pairs,24" in out.splitlines()


def test_retrieve(pipeline, capsys):
    ranked = json.loads(run(capsys, "retrieve", "--question", "how do i enable bluetooth?",
                            "--index-path", str(pipeline / "idx" / "manual0"), "--k", "2"))
    assert len(ranked) == 2 and ranked[0]["score"] >= ranked[1]["score"]
    on_the_fly = json.loads(run(capsys, "retrieve", "--question", "how do i enable bluetooth?",
                                "--manuals", str(pipeline / "manuals.jsonl"), "--k", "2"))
    assert len(on_the_fly) == 2


def test_infer_outputs_json(pipeline, capsys):
    res = json.loads(run(capsys, "infer", "--question", "how do i enable bluetooth?", "--manual", "manual0",
                         "--manuals", str(pipeline / "manuals.jsonl"), "--model", str(pipeline / "model"),
                         "--index-dir", str(pipeline / "idx"), "--k", "3"))
    assert res["predicted_section_id"].startswith("manual0-") and res["mode"] == "sentence"
    assert res["answer_text"]


def test_infer_unknown_manual(pipeline):
    with pytest.raises(SystemExit):
        main(["infer", "--question", "x", "--manual", "nope", "--manuals", str(pipeline / "manuals.jsonl"),
              "--model", str(pipeline / "model")])


def test_eval_and_report(pipeline, capsys, tmp_path):
    qa = [json.loads(line) for line in (pipeline / "data" / "qa.jsonl").read_text().splitlines()]
    preds = tmp_path / "preds.jsonl"
    preds.write_text("".join(json.dumps({"qid": r["qid"], "answer": r["answer_text"]}) + "\n" for r in qa[:4]))
    out = run(capsys, "eval", "--predictions", str(preds), "--qa", str(pipeline / "data" / "qa.jsonl"),
              "--embeddings", str(pipeline / "data" / "embeddings.txt"), "--label", "GOLD", "--out", str(tmp_path / "rep"))
    assert out.splitlines()[-1] == "| GOLD | 1.000 | 1.000 | 1.000 | 1.000 | 1.000 |"
    table = run(capsys, "report", "--table", "3", "--row", "GOLD", str(tmp_path / "rep.csv"))
    assert table.splitlines()[-1] == "| GOLD | 1.000 | 1.000 | 1.000 | 1.000 | 1.000 |"
    ablation = run(capsys, "report", "--table", "4", "--row", "GOLD", str(tmp_path / "rep.csv"))
    assert ablation.splitlines()[-1].endswith("| - | - | - | - | - |")
    with pytest.raises(SystemExit):
        main(["report", "--table", "3"])


def test_report_property_table(pipeline, capsys, tmp_path):
    csv_path = tmp_path / "stats.csv"
    csv_path.write_text(run(capsys, "stats", "--manuals", str(pipeline / "manuals.jsonl")))
    out = run(capsys, "report", "--table", "1", "--input", str(csv_path))
    assert "| No. of E-Manuals | 3 |" in out


def test_neighbors(pipeline, capsys, tmp_path):
    words = tmp_path / "words.txt"
    words.write_text("bluetooth wifi enable disable settings status tap")
    out = run(capsys, "neighbors", "--words", str(words), "--checkpoint", str(pipeline / "enc"), "--k", "5")
    lines = out.splitlines()
    assert lines[0] == "| Word | Nearest neighbours |" and len(lines) == 2 + 7
    assert all(len(line.split("|")[2].split(",")) == 5 for line in lines[2:])


def test_run_command(toy, capsys):
    d = toy / "data"
    out = run(capsys, "run", "--corpus", str(d / "corpus.jsonl"), "--qa", str(d / "qa.jsonl"), "--out", str(toy / "runs"),
              "--name", "cli", "--epochs", "1", "--k", "3", "--batch", "8",
              "--set", "encoder.d_model=8", "--set", "encoder.n_layers=1", "--set", "encoder.max_len=64")
    assert out.splitlines()[0] == "| MODEL | EM | P | R | F1 | S+WMS |"
    assert out.splitlines()[-1].startswith("| MTL-S |")
    hits = run(capsys, "report", "--table", "hits", "--input", str(toy / "runs" / "cli" / "hits.csv"))
    assert hits.splitlines()[0] == "|  | Hits@1 | Hits@5 | Hits@10 |"
