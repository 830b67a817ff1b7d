import json
import math
import os
import signal
import subprocess
import sys
import time

import pytest

from ragcap.archive import load_checkpoint
from ragcap.cli import main

CONFIG = """\
model.D_a = 4
model.T = 6
lm.pretrain_epochs = 2
similarity.threshold = 0.7
triplet.epochs = 2
triplet.batch = 8
triplet.lr = 1e-3
embed.heads = 2
embed.ff = 8
retrieval.K = 2
decoder.epochs = 2
decoder.batch = 8
decoder.lr_max = 1e-3
decoder.lr_period = 2
decoder.D_r = 4
decoder.heads = 2
decoder.max_len = 8
"""

SPEC = '{"clusters": 2, "items_per_cluster": 10, "seed": 1}'


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Full pipeline run in a temp workspace; artifacts shared by tests."""
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(CONFIG)
    (root / "spec.json").write_text(SPEC)
    cfg = str(root / "tiny.cfg")
    data = str(root / "data")
    sim = str(root / "sim")
    ret = str(root / "ret")
    dec = str(root / "dec")

    assert main(["make-dataset", "--config", cfg,
                 "--spec", str(root / "spec.json"), "--out", data]) == 0
    manifest = os.path.join(data, "manifest.jsonl")
    assert main(["prepare-similarity", "--config", cfg,
                 "--manifest", manifest, "--out", sim]) == 0
    labels = os.path.join(sim, "similarity.ract")
    assert main(["train-retrieval", "--config", cfg, "--manifest", manifest,
                 "--labels", labels, "--seed", "0", "--out", ret]) == 0
    assert main(["train-decoder", "--config", cfg, "--manifest", manifest,
                 "--labels", labels, "--seed", "0", "--out", dec]) == 0
    return {"root": root, "cfg": cfg, "data": data, "manifest": manifest,
            "labels": labels, "ret": ret, "dec": dec}


def test_pipeline_artifacts_exist(ws):
    for path in ("ret/retrieval.ckpt", "ret/retrieval_curve.tsv",
                 "ret/negatives.tsv", "ret/index.ract",
                 "dec/decoder.ckpt", "dec/decoder_curve.tsv",
                 "data/manifest.jsonl", "sim/similarity.ract"):
        assert (ws["root"] / path).exists(), path


def test_retrieve_command(ws, capsys):
    feats = os.path.join(ws["data"], "features", "c00i000.ract")
    code = main(["retrieve", "--config", ws["cfg"],
                 "--checkpoint", os.path.join(ws["ret"], "retrieval.ckpt"),
                 "--index", os.path.join(ws["ret"], "index.ract"),
                 "--query-features", feats, "-K", "3"])
    assert code == 0
    hits = json.loads(capsys.readouterr().out)
    assert len(hits) == 3
    dists = [h["distance"] for h in hits]
    assert dists == sorted(dists)
    assert all(set(h) == {"id", "distance", "caption"} for h in hits)


def test_retrieve_excludes_query_item(ws, capsys):
    feats = os.path.join(ws["data"], "features", "c00i000.ract")
    code = main(["retrieve", "--config", ws["cfg"],
                 "--checkpoint", os.path.join(ws["ret"], "retrieval.ckpt"),
                 "--index", os.path.join(ws["ret"], "index.ract"),
                 "--query-features", feats, "-K", "5",
                 "--exclude", "c00i000"])
    assert code == 0
    hits = json.loads(capsys.readouterr().out)
    assert "c00i000" not in [h["id"] for h in hits]


def test_generate_command(ws, capsys):
    feats = os.path.join(ws["data"], "features", "c01i008.ract")
    code = main(["generate", "--config", ws["cfg"],
                 "--checkpoint", os.path.join(ws["dec"], "decoder.ckpt"),
                 "--index", os.path.join(ws["ret"], "index.ract"),
                 "--features", feats,
                 "--retrieval-checkpoint",
                 os.path.join(ws["ret"], "retrieval.ckpt"),
                 "--beam", "2"])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert isinstance(out["caption"], str)
    assert len(out["guidance"]) == 2


def test_generate_oracle_guidance(ws, capsys):
    feats = os.path.join(ws["data"], "features", "c00i005.ract")
    code = main(["generate", "--config", ws["cfg"],
                 "--checkpoint", os.path.join(ws["dec"], "decoder.ckpt"),
                 "--index", os.path.join(ws["ret"], "index.ract"),
                 "--features", feats,
                 "--oracle-guidance", ws["labels"],
                 "--manifest", ws["manifest"], "--query-id", "c00i005",
                 "--beam", "2"])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["guidance"]) == 2


def test_evaluate_scope(ws, capsys, tmp_path):
    out = str(tmp_path / "eval")
    code = main(["evaluate", "--config", ws["cfg"], "--scope", "i",
                 "--manifest", ws["manifest"], "--labels", ws["labels"],
                 "--retrieval-checkpoint",
                 os.path.join(ws["ret"], "retrieval.ckpt"),
                 "--index", os.path.join(ws["ret"], "index.ract"),
                 "--decoder-checkpoint",
                 os.path.join(ws["dec"], "decoder.ckpt"),
                 "--split", "test", "--out", out])
    assert code == 0
    table = capsys.readouterr().out
    assert table.split("\n")[0].startswith("B-1")
    assert os.path.exists(os.path.join(out, "scope_i_candidates.jsonl"))
    assert os.path.exists(os.path.join(out, "scope_i_report.json"))


def test_evaluate_candidate_files(ws, capsys, tmp_path):
    cands = tmp_path / "c.jsonl"
    refs = tmp_path / "r.jsonl"
    cands.write_text('{"id": "a", "text": "a dog barks"}\n'
                     '{"id": "b", "text": "rain falls"}\n')
    refs.write_text('{"id": "a", "texts": ["a dog barks"]}\n'
                    '{"id": "b", "texts": ["rain falls hard"]}\n')
    code = main(["evaluate", "--candidates", str(cands),
                 "--references", str(refs), "--out", str(tmp_path / "o")])
    assert code == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    # unigram precision 1 with brevity penalty e^(1 - 6/5)
    assert report["bleu"][0] == pytest.approx(math.exp(1 - 6 / 5), abs=1e-6)
    assert "B-1" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------

def test_exit_2_unknown_config_key(ws, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("triplet.momentum = 0.9\n")
    assert main(["make-dataset", "--config", str(bad),
                 "--out", str(tmp_path / "d")]) == 2


def test_exit_2_scope_without_inputs(ws):
    assert main(["evaluate", "--scope", "i"]) == 2
    assert main(["evaluate"]) == 2
    assert main(["evaluate", "--candidates", "x.jsonl"]) == 2


def test_exit_3_missing_manifest(ws, tmp_path):
    assert main(["prepare-similarity", "--config", ws["cfg"],
                 "--manifest", str(tmp_path / "nope.jsonl"),
                 "--out", str(tmp_path / "s")]) == 3


def test_exit_3_corrupt_index(ws, tmp_path):
    bad = tmp_path / "bad.ract"
    bad.write_bytes(b"not an archive at all")
    feats = os.path.join(ws["data"], "features", "c00i000.ract")
    assert main(["retrieve", "--config", ws["cfg"],
                 "--checkpoint", os.path.join(ws["ret"], "retrieval.ckpt"),
                 "--index", str(bad), "--query-features", feats]) == 3


def test_exit_4_nonfinite_training(ws, tmp_path):
    cfg = tmp_path / "nan.cfg"
    cfg.write_text(CONFIG + "triplet.lr = nan\n")
    assert main(["train-retrieval", "--config", str(cfg),
                 "--manifest", ws["manifest"], "--labels", ws["labels"],
                 "--seed", "0", "--out", str(tmp_path / "r")]) == 4


# ---------------------------------------------------------------------------
# determinism and atomicity
# ---------------------------------------------------------------------------

def test_double_run_bitwise_identical(ws, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert main(["train-retrieval", "--config", ws["cfg"],
                     "--manifest", ws["manifest"], "--labels", ws["labels"],
                     "--seed", "0", "--out", out]) == 0
        outs.append(out)
    for fname in ("retrieval.ckpt", "retrieval_curve.tsv", "negatives.tsv",
                  "index.ract"):
        a = open(os.path.join(outs[0], fname), "rb").read()
        b = open(os.path.join(outs[1], fname), "rb").read()
        assert a == b, fname
    # and identical to the fixture run from a different directory
    first = open(os.path.join(ws["ret"], "retrieval.ckpt"), "rb").read()
    assert first == open(os.path.join(outs[0], "retrieval.ckpt"), "rb").read()


def test_generate_deterministic_output(ws, capsys):
    feats = os.path.join(ws["data"], "features", "c00i003.ract")
    args = ["generate", "--config", ws["cfg"],
            "--checkpoint", os.path.join(ws["dec"], "decoder.ckpt"),
            "--index", os.path.join(ws["ret"], "index.ract"),
            "--features", feats, "--retrieval-checkpoint",
            os.path.join(ws["ret"], "retrieval.ckpt")]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first


def test_kill_midrun_leaves_no_partial_checkpoint(ws, tmp_path):
    out = str(tmp_path / "killed")
    slow = tmp_path / "slow.cfg"
    slow.write_text(CONFIG.replace("triplet.epochs = 2",
                                   "triplet.epochs = 5000"))
    proc = subprocess.Popen(
        [sys.executable, "-m", "ragcap.cli", "train-retrieval",
         "--config", str(slow), "--manifest", ws["manifest"],
         "--labels", ws["labels"], "--seed", "0", "--out", out],
        stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    time.sleep(2.0)
    proc.send_signal(signal.SIGKILL)
    proc.wait()
    ckpt = os.path.join(out, "retrieval.ckpt")
    if os.path.exists(ckpt):
        load_checkpoint(ckpt)  # whatever exists must parse cleanly
    # no temp files left behind by atomic writes
    if os.path.isdir(out):
        leftovers = [f for f in os.listdir(out) if f.endswith(".tmp")]
        assert not any(".tmp" in f for f in leftovers)
