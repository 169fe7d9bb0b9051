"""End-to-end CLI runs on a small synthetic corpus."""

import json
from pathlib import Path

import numpy as np
import pytest

from locus.cli import dispatch


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> split -> train once; several subcommands reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert dispatch(["synth", "--models", "6", "--queries", "240", "--dphi", "8",
                     "--latent", "5", "--tasks", "3", "--seed", "3",
                     "--out", str(data)]) == 0
    split = root / "split"
    assert dispatch(["split", "--encodings", str(data / "encodings"),
                     "--evals", str(data / "evaluations.csv"),
                     "--fraction", "0.25", "--seed", "3",
                     "--out", str(split)]) == 0
    ckpt = root / "ckpt.locus"
    assert dispatch(["train", "--encodings", str(data / "encodings"),
                     "--evals", str(split / "train.csv"),
                     "--out", str(ckpt), "--d", "16", "--L", "1", "--r", "4",
                     "--heads", "2", "--steps", "30", "--enc-min", "8",
                     "--enc-max", "32", "--dec-queries", "16",
                     "--models-per-batch", "4", "--seed", "3"]) == 0
    return root, data, split, ckpt


def test_synth_outputs_and_manifest(workspace):
    root, data, split, ckpt = workspace
    assert (data / "encodings" / "matrix.f32").exists()
    assert (data / "evaluations.csv").exists()
    assert (data / "costs.csv").exists()
    assert (data / "oracle.json").exists()
    manifest = json.loads((data / "run_manifest.json").read_text())
    assert manifest["subcommand"] == "synth"
    assert manifest["seed"] == 3
    assert manifest["tool_version"]


def test_ingest_report(workspace, tmp_path):
    root, data, split, ckpt = workspace
    out = tmp_path / "ingest"
    assert dispatch(["ingest", "--encodings", str(data / "encodings"),
                     "--evals", str(data / "evaluations.csv"),
                     "--costs", str(data / "costs.csv"),
                     "--out", str(out)]) == 0
    report = json.loads((out / "ingest_report.json").read_text())
    assert report["n_models"] == 6
    assert report["has_costs"] is True


def test_embed_predict_route_eval(workspace, tmp_path):
    root, data, split, ckpt = workspace
    emb = tmp_path / "emb"
    assert dispatch(["embed", "--ckpt", str(ckpt),
                     "--encodings", str(data / "encodings"),
                     "--evals", str(split / "train.csv"),
                     "--out", str(emb)]) == 0
    assert (emb / "embeddings.csv").exists()
    assert (emb / "embeddings.bin" / "matrix.f32").exists()

    pred = tmp_path / "pred"
    assert dispatch(["predict", "--ckpt", str(ckpt),
                     "--encodings", str(data / "encodings"),
                     "--embeddings", str(emb / "embeddings.csv"),
                     "--out", str(pred)]) == 0
    routes = tmp_path / "routes"
    assert dispatch(["route", "--predictions", str(pred / "predictions.csv"),
                     "--out", str(routes)]) == 0
    lines = (routes / "routes.csv").read_text().strip().splitlines()
    assert lines[0] == "query_id,model_id"
    assert len(lines) == 241

    ev = tmp_path / "eval"
    assert dispatch(["eval", "--ckpt", str(ckpt),
                     "--encodings", str(data / "encodings"),
                     "--train-evals", str(split / "train.csv"),
                     "--test-evals", str(split / "test.csv"),
                     "--out", str(ev)]) == 0
    report = json.loads((ev / "eval_report.json").read_text())
    assert 0.0 <= report["overall"]["routing"] <= 1.0
    assert report["checkpoint_digest"]


def test_eval_reports_byte_identical(workspace, tmp_path):
    root, data, split, ckpt = workspace
    outs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        assert dispatch(["eval", "--ckpt", str(ckpt),
                         "--encodings", str(data / "encodings"),
                         "--train-evals", str(split / "train.csv"),
                         "--test-evals", str(split / "test.csv"),
                         "--seed", "11", "--out", str(out)]) == 0
        outs.append((out / "eval_report.json").read_bytes())
    assert outs[0] == outs[1]


def test_onboard(workspace, tmp_path):
    root, data, split, ckpt = workspace
    out = tmp_path / "onboard"
    assert dispatch(["onboard", "--ckpt", str(ckpt),
                     "--encodings", str(data / "encodings"),
                     "--evals", str(split / "train.csv"),
                     "--model", "m00", "--out", str(out)]) == 0
    blob = json.loads((out / "m00.embedding.json").read_text())
    assert blob["model_id"] == "m00" and len(blob["z"]) == 16


def test_geometry_subcommands(workspace, tmp_path):
    root, data, split, ckpt = workspace
    emb = tmp_path / "emb"
    dispatch(["embed", "--ckpt", str(ckpt), "--encodings", str(data / "encodings"),
              "--evals", str(split / "train.csv"), "--out", str(emb)])
    emb_csv = str(emb / "embeddings.csv")

    corr = tmp_path / "corr"
    assert dispatch(["correlate", "--embeddings", emb_csv,
                     "--encodings", str(data / "encodings"),
                     "--test-evals", str(split / "test.csv"),
                     "--out", str(corr)]) == 0
    report = json.loads((corr / "correlations.json").read_text())
    assert set(report["metrics"]) == {"cosine", "euclidean"}

    clu = tmp_path / "cluster"
    assert dispatch(["cluster", "--embeddings", emb_csv, "--out", str(clu)]) == 0
    merges = json.loads((clu / "dendrogram.json").read_text())["merges"]
    assert len(merges) == 5
    assert (clu / "dendrogram.newick").read_text().endswith(";\n")

    nb = tmp_path / "neighbors"
    assert dispatch(["neighbors", "--embeddings", emb_csv,
                     "--encodings", str(data / "encodings"),
                     "--test-evals", str(split / "test.csv"),
                     "--k-max", "3", "--out", str(nb)]) == 0

    fb = tmp_path / "fallback"
    assert dispatch(["fallback", "--ckpt", str(ckpt), "--embeddings", emb_csv,
                     "--encodings", str(data / "encodings"),
                     "--test-evals", str(split / "test.csv"),
                     "--k", "0,1", "--out", str(fb)]) == 0
    report = json.loads((fb / "fallback.json").read_text())
    assert set(report) == {"0", "1"}

    fp = tmp_path / "fp"
    assert dispatch(["fingerprint", "--references", emb_csv,
                     "--candidates", emb_csv, "--out", str(fp)]) == 0
    results = json.loads((fp / "fingerprint.json").read_text())
    assert all(v["distances"][k] == 0.0 for k, v in results.items())


def test_portfolio_subcommand(workspace, tmp_path):
    root, data, split, ckpt = workspace
    emb = tmp_path / "emb"
    dispatch(["embed", "--ckpt", str(ckpt), "--encodings", str(data / "encodings"),
              "--evals", str(split / "train.csv"), "--out", str(emb)])
    out = tmp_path / "pf"
    assert dispatch(["portfolio", "--embeddings", str(emb / "embeddings.csv"),
                     "--mode", "kmedoids", "--k", "2", "--out", str(out)]) == 0
    report = json.loads((out / "portfolio.json").read_text())
    assert len(report["selection_order"]) == 2

    out2 = tmp_path / "pfb"
    assert dispatch(["portfolio", "--embeddings", str(emb / "embeddings.csv"),
                     "--mode", "budget", "--budget", "25",
                     "--costs", str(data / "costs.csv"), "--out", str(out2)]) == 0
    report = json.loads((out2 / "portfolio.json").read_text())
    assert report["constraint"]["consumed"] <= 25

    pred = tmp_path / "pfpred"
    dispatch(["predict", "--ckpt", str(ckpt), "--encodings", str(data / "encodings"),
              "--embeddings", str(emb / "embeddings.csv"), "--out", str(pred)])
    out3 = tmp_path / "pfacc"
    assert dispatch(["portfolio", "--embeddings", str(emb / "embeddings.csv"),
                     "--mode", "kcenter", "--k", "3",
                     "--predictions", str(pred / "predictions.csv"),
                     "--encodings", str(data / "encodings"),
                     "--test-evals", str(split / "test.csv"),
                     "--baseline-trials", "5", "--seed", "2",
                     "--out", str(out3)]) == 0
    report = json.loads((out3 / "portfolio.json").read_text())
    assert "routing_accuracy" in report and "random_baseline" in report


def test_baseline_subcommands(workspace, tmp_path):
    root, data, split, ckpt = workspace
    for variant, extra in (("knn", ["--k", "5"]),
                           ("kmeans", ["--clusters", "3"]),
                           ("embedllm", ["--steps", "20"]),
                           ("regen", ["--steps", "20"])):
        out = tmp_path / variant
        assert dispatch(["baseline", variant,
                         "--encodings", str(data / "encodings"),
                         "--train-evals", str(split / "train.csv"),
                         "--test-evals", str(split / "test.csv"),
                         "--seed", "1", "--out", str(out)] + extra) == 0
        report = json.loads((out / "baseline_report.json").read_text())
        assert 0.0 <= report["overall"]["routing"] <= 1.0
    regen_report = json.loads((tmp_path / "regen" / "baseline_report.json").read_text())
    assert "disagreement_rate" in regen_report["regeneration"]


def test_robustness_subcommand(workspace, tmp_path):
    root, data, split, ckpt = workspace
    out = tmp_path / "rb"
    assert dispatch(["robustness", "--ckpt", str(ckpt),
                     "--encodings", str(data / "encodings"),
                     "--train-evals", str(split / "train.csv"),
                     "--test-evals", str(split / "test.csv"),
                     "--n-ref", "64", "--alphas", "0,1", "--subsamples", "16,64",
                     "--trials", "2", "--out", str(out)]) == 0
    report = json.loads((out / "robustness.json").read_text())
    # alpha=1 resamples are the reference itself: drift exactly zero
    for row in report["overlap"]:
        if row["alpha"] == 1.0:
            assert row["max_drift"] == 0.0
    for row in report["subsample"]:
        if row["size"] == 64:
            assert row["max_drift"] == 0.0


def test_hypothetical_subcommand(workspace, tmp_path):
    root, data, split, ckpt = workspace
    out = tmp_path / "hypo"
    assert dispatch(["hypothetical", "--ckpt", str(ckpt),
                     "--encodings", str(data / "encodings"),
                     "--evals", str(split / "train.csv"),
                     "--n-queries", "64", "--ks", "1,3",
                     "--seed", "5", "--out", str(out)]) == 0
    report = json.loads((out / "hypothetical_recall.json").read_text())
    assert set(report) == {"1", "3"}


def test_unknown_flag_exits_1(capsys):
    assert dispatch(["synth", "--frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_validation_error_exits_1(tmp_path):
    assert dispatch(["split", "--encodings", str(tmp_path / "nope"),
                     "--evals", str(tmp_path / "nope.csv"),
                     "--out", str(tmp_path / "o")]) == 1


def test_config_file_overrides_flags(workspace, tmp_path):
    root, data, split, ckpt = workspace
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"fraction": 0.5}))
    out = tmp_path / "sp"
    assert dispatch(["split", "--encodings", str(data / "encodings"),
                     "--evals", str(data / "evaluations.csv"),
                     "--fraction", "0.1", "--config", str(cfg),
                     "--seed", "0", "--out", str(out)]) == 0
    test_rows = (out / "test.csv").read_text().strip().splitlines()
    # 240 queries x 6 models at fraction 0.5 -> 720 data rows, not 144
    assert len(test_rows) - 1 == 720


def test_env_seed_fallback(workspace, tmp_path, monkeypatch):
    root, data, split, ckpt = workspace
    monkeypatch.setenv("LOCUS_SEED", "99")
    out = tmp_path / "seeded"
    assert dispatch(["split", "--encodings", str(data / "encodings"),
                     "--evals", str(data / "evaluations.csv"),
                     "--out", str(out)]) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["seed"] == 99


def test_threads_do_not_change_results(workspace, tmp_path):
    root, data, split, ckpt = workspace
    outs = []
    for name, threads in (("t1", "1"), ("t4", "4")):
        out = tmp_path / name
        assert dispatch(["embed", "--ckpt", str(ckpt),
                         "--encodings", str(data / "encodings"),
                         "--evals", str(split / "train.csv"),
                         "--threads", threads, "--out", str(out)]) == 0
        outs.append((out / "embeddings.csv").read_bytes())
    assert outs[0] == outs[1]
