import json
import subprocess
import sys

import pytest

from sglayout.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from sglayout.composition import read_ppm
from sglayout.dataset import read_dataset
from sglayout.scenegraph import serialize_scene_graph

TINY = {"model": {"d_in": 8, "d_out": 8, "hidden": 12, "layers": 2, "ep_hidden": 12,
                  "mask_dim": 6, "layout_size": 32},
        "train": {"steps": 4, "batch_size": 4}}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert run("build-dataset", "--synthetic", "--seed", 5, "--scenes", 12,
               "--patches-per-category", 6, "--augment", "--out", root / "data") == EXIT_OK
    assert run("train", "--dataset", root / "data", "--out", root / "m" / "model.ckpt",
               "--config", root / "tiny.json") == EXIT_OK
    graph = read_dataset(root / "data").samples[0].graph
    (root / "g.json").write_text(serialize_scene_graph(graph))
    return root


def test_build_dataset_outputs(work):
    ds = read_dataset(work / "data")
    assert len(ds.samples) == 12 and len(ds.patches) > 0
    manifest = json.loads((work / "data" / "manifest.json").read_text())
    assert manifest["n_samples"] == 12


def test_train_outputs(work):
    assert (work / "m" / "model.ckpt").exists()
    meta = json.loads((work / "m" / "model.ckpt.json").read_text())
    assert meta["layers"] == 2 and meta["mask_k"] == 16
    lines = (work / "m" / "model.ckpt.curve.csv").read_text().splitlines()
    assert lines[0] == "step,loss_ep,loss_mask,loss_total" and len(lines) == 5


def test_train_is_byte_deterministic(work, tmp_path):
    assert run("train", "--dataset", work / "data", "--out", tmp_path / "again.ckpt",
               "--config", work / "tiny.json") == EXIT_OK
    assert (tmp_path / "again.ckpt").read_bytes() == (work / "m" / "model.ckpt").read_bytes()
    assert ((tmp_path / "again.ckpt.curve.csv").read_bytes()
            == (work / "m" / "model.ckpt.curve.csv").read_bytes())


def test_eval_oracle_scores_one(work):
    assert run("eval", "--dataset", work / "data", "--oracle", "--report", work / "oracle.json") == 0
    rep = json.loads((work / "oracle.json").read_text())
    assert rep["relation_score"] == 1.0 and rep["avg_iou"] == 1.0
    assert rep["n_graphs"] == 12


def test_eval_model_is_deterministic(work):
    for name in ("e1.json", "e2.json"):
        assert run("eval", "--dataset", work / "data", "--model", work / "m" / "model.ckpt",
                   "--report", work / name) == EXIT_OK
    assert (work / "e1.json").read_bytes() == (work / "e2.json").read_bytes()
    rep = json.loads((work / "e1.json").read_text())
    assert 0.0 <= rep["relation_score"] <= 1.0


def test_predict_writes_stable_ppm(work):
    for name in ("a.ppm", "b.ppm"):
        assert run("predict", "--graph", work / "g.json", "--model", work / "m" / "model.ckpt",
                   "--out", work / "out" / name, "--octagons") == EXIT_OK
    assert read_ppm(work / "out" / "a.ppm").shape == (32, 32, 3)
    assert (work / "out" / "a.ppm").read_bytes() == (work / "out" / "b.ppm").read_bytes()
    assert run("predict", "--graph", work / "g.json", "--model", work / "m" / "model.ckpt",
               "--out", work / "out" / "c.ppm", "--size", 20) == EXIT_OK
    assert read_ppm(work / "out" / "c.ppm").shape == (20, 20, 3)


def test_index_and_retrieve(work):
    assert run("index", "--dataset", work / "data", "--out", work / "idx" / "i.jsonl") == EXIT_OK
    assert run("index", "--dataset", work / "data", "--out", work / "idx" / "j.jsonl") == EXIT_OK
    assert (work / "idx" / "i.jsonl").read_bytes() == (work / "idx" / "j.jsonl").read_bytes()
    graph = read_dataset(work / "data").samples[0].graph
    indexed = {json.loads(line)["cat"] for line in (work / "idx" / "i.jsonl").read_text().splitlines()[1:]}
    obj = next(o.index for o in graph.objects if o.category in indexed)
    assert run("retrieve", "--index", work / "idx" / "i.jsonl", "--graph", work / "g.json",
               "--model", work / "m" / "model.ckpt", "--object", obj, "--k", 5,
               "--out", work / "ret") == EXIT_OK
    ranking = json.loads((work / "ret" / "ranking.json").read_text())
    assert len(ranking["results"]) == 5
    assert [r["rank"] for r in ranking["results"]] == [1, 2, 3, 4, 5]
    dists = [r["distance"] for r in ranking["results"]]
    assert dists == sorted(dists)
    for r in ranking["results"]:
        assert (work / "ret" / r["mask"]).exists()


def test_grad_check_exit_codes(tmp_path):
    quick = {"shapes": 1, "model_entries": 1}
    (tmp_path / "ok.json").write_text(json.dumps(quick))
    assert run("grad-check", "--config", tmp_path / "ok.json") == EXIT_OK
    (tmp_path / "strict.json").write_text(json.dumps(dict(quick, tolerance=1e-300)))
    assert run("grad-check", "--config", tmp_path / "strict.json") == EXIT_NUMERIC
    (tmp_path / "bad.json").write_text(json.dumps({"nope": 1}))
    assert run("grad-check", "--config", tmp_path / "bad.json") == EXIT_USAGE


def test_usage_errors(work, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        run("train", "--dataset", work / "data")
    assert exc.value.code == EXIT_USAGE
    assert run("build-dataset", "--out", tmp_path / "x") == EXIT_USAGE
    assert run("eval", "--dataset", work / "data", "--report", tmp_path / "r.json") == EXIT_USAGE
    assert run("retrieve", "--index", "i", "--graph", "g", "--model", "m", "--object", 0,
               "--k", 0, "--out", tmp_path) == EXIT_USAGE
    (tmp_path / "cfg.json").write_text(json.dumps({"model": {"depth": 3}}))
    assert run("train", "--dataset", work / "data", "--out", tmp_path / "m.ckpt",
               "--config", tmp_path / "cfg.json") == EXIT_USAGE


def test_data_errors(work, tmp_path):
    assert run("eval", "--dataset", tmp_path / "missing", "--oracle",
               "--report", tmp_path / "r.json") == EXIT_DATA
    (tmp_path / "bad.json").write_text("{ not json")
    assert run("build-dataset", "--annotations", tmp_path / "bad.json", "--out", tmp_path / "d") == EXIT_DATA
    (tmp_path / "g.json").write_text('{"image_size": [10, 10], "objects": [{"category": "unicorn"}]}')
    assert run("predict", "--graph", tmp_path / "g.json", "--model", work / "m" / "model.ckpt",
               "--out", tmp_path / "p.ppm") == EXIT_DATA


def test_bad_thread_setting(work, tmp_path, monkeypatch):
    monkeypatch.setenv("SGL_THREADS", "zero")
    assert run("eval", "--dataset", work / "data", "--oracle",
               "--report", tmp_path / "r.json") == EXIT_USAGE


def test_console_entry_point(work, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sglayout.cli", "eval", "--dataset",
                           str(work / "data"), "--oracle", "--report", str(tmp_path / "r.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "relation score 1.0000" in proc.stdout
