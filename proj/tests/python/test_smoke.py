import json
import math

import pytest

mtst = pytest.importorskip("mtst")


def test_label_budget():
    assert mtst.label_pair_budget(1006, mtst.UNCAPPED) == 1006 * 1005
    assert mtst.label_pair_budget(1006, 3.0) == 3018


def test_mine_and_stats(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    rows = [{"id": f"s{s}i{i}", "set_id": f"set{s}", "labels": []} for s in range(3) for i in range(6)]
    corpus.write_text("".join(json.dumps(r) + "\n" for r in rows))
    pairs = mtst.mine_pairs(corpus, "set")
    assert len(pairs) == 3 * 6 * 5
    assert all(origin == "set" and ref != tgt for ref, tgt, origin in pairs)

    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert mtst.corpus_stats(empty)["n_triplets"] == 0


def test_template_oracle():
    text = mtst.template_oracle(["red", "short"], ["blue", "short"])
    assert "blue" in text and "red" in text


def test_gradcheck_small():
    report = mtst.gradcheck(seed=3, instances=2)
    assert report["max_rel_error"] < 1e-4


def test_pretrain_and_files(tmp_path):
    mtst.write_planted(tmp_path / "data", groups=3, variants=4, val_queries=4, test_queries=4, seed=1)
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "corpus = data/corpus.jsonl\ntriplets = data/triplets.jsonl\nval_queries = data/val.jsonl\n"
        "test_queries = data/test.jsonl\nsteps = 4\nbatch_size = 4\ntokens = 2\nwidth = 6\nimage_width = 6\n"
        "eval_every = 2\noptimizer = adam\n"
    )
    summary = mtst.run_stage(cfg, tmp_path / "pre", "pretrain")
    assert summary["stage"] == "pretrain"
    assert 0.0 <= summary["test"]["recall@1"] <= 1.0
    losses = (tmp_path / "pre" / "losses.jsonl").read_text().splitlines()
    assert len(losses) == 4
    assert all(math.isfinite(json.loads(line)["total"]) for line in losses)

    ck = mtst.load_checkpoint(tmp_path / "pre" / "checkpoint.bin")
    assert "retrieval.token_table" in ck["params"]
    shape, values = ck["params"]["retrieval.token_table"]
    assert math.prod(shape) == len(values)

    code, out, _ = mtst.cli("eval", "--config", cfg, "--checkpoint", tmp_path / "pre" / "checkpoint.bin",
                            "--out", tmp_path / "eval")
    assert code == 0
    gallery = mtst.load_gallery(tmp_path / "eval" / "gallery.bin")
    assert len(gallery) == 12
    assert json.loads(out)["n_queries"] == 4


def test_errors(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX")
    with pytest.raises(mtst.FormatError, match="@ byte 0"):
        mtst.load_checkpoint(bad)
    with pytest.raises(mtst.IoError):
        mtst.corpus_stats(tmp_path / "missing.jsonl")
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("lr = fast\n")
    with pytest.raises(mtst.MtstError):
        mtst.run_stage(cfg, tmp_path / "out")
    assert mtst.cli("nope")[0] == 1
