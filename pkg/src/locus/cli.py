"""Command-line entry point.

Every pipeline stage is a subcommand producing machine-readable JSON
(plus CSV mirrors for plotting) and a run manifest recording the
resolved configuration, input digests, seed, and output paths. Outputs
are deterministic given the seed; nothing mutates its inputs. Exit
codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import baselines, geometry, portfolio as portfolio_mod
from .data import (
    SyntheticSpec,
    ValidationError,
    generate_synthetic_corpus,
    load_costs,
    load_encodings,
    load_evaluations,
    save_encodings,
    save_evaluations,
    sha256_file,
    split_corpus,
)
from .encoder import (
    EncoderConfig,
    embed_corpus,
    load_embeddings_csv,
    save_embeddings_binary,
    save_embeddings_csv,
)
from .predictor import PredictionMatrix, correctness_metrics, predict_matrix, route_matrix
from .training import Checkpoint, TrainConfig, onboard, train


class CliError(ValidationError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def _resolve_seed(args):
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(os.environ.get("LOCUS_SEED", "0"))


def _apply_config_file(args):
    """Values from --config JSON override command-line flags."""
    path = getattr(args, "config", None)
    if not path:
        return
    with open(path) as f:
        overrides = json.load(f)
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise CliError(f"config key {key!r} is not a flag of this subcommand")
        setattr(args, attr, value)


def write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def write_manifest(out_dir, subcommand, args, inputs, outputs, seed, wall_time):
    config = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func",):
            continue
        config[key] = value if isinstance(value, (int, float, str, bool, list, tuple, type(None))) else str(value)
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "input_digests": {str(p): sha256_file(p) for p in inputs if Path(p).is_file()},
        "output_paths": [str(p) for p in outputs],
        "seed": seed,
        "tool_version": __version__,
        "wall_time_s": wall_time,
    }
    path = Path(out_dir) / "run_manifest.json"
    write_json(path, manifest)
    return path


def _load_table(encodings_dir):
    d = Path(encodings_dir)
    return load_encodings(d / "meta.json", d / "ids.txt", d / "matrix.f32")


def _load_corpus(encodings_dir, evals_csv, costs_csv=None):
    table = _load_table(encodings_dir)
    costs = load_costs(costs_csv) if costs_csv else None
    return load_evaluations(evals_csv, table, costs=costs)


def _encoding_inputs(encodings_dir):
    d = Path(encodings_dir)
    return [d / "meta.json", d / "ids.txt", d / "matrix.f32"]


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def save_prediction_matrix(pm: PredictionMatrix, path):
    rows = []
    for i, m in enumerate(pm.model_ids):
        for j, q in enumerate(pm.query_ids):
            rows.append([m, q, repr(float(pm.probabilities[i, j]))])
    write_csv(path, ["model_id", "query_id", "probability"], rows)


def load_prediction_matrix(path) -> PredictionMatrix:
    cells = {}
    models = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            m, q = row["model_id"], row["query_id"]
            if m not in cells:
                cells[m] = {}
                models.append(m)
            cells[m][q] = float(row["probability"])
    queries = sorted({q for qs in cells.values() for q in qs})
    probs = np.array([[cells[m][q] for q in queries] for m in models])
    return PredictionMatrix(model_ids=models, query_ids=queries, probabilities=probs)


# --- subcommand handlers ---------------------------------------------------

def cmd_ingest(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    corpus = _load_corpus(args.encodings, args.evals, args.costs)
    out = _out_dir(args)
    report = {
        "n_queries": len(corpus.table),
        "dphi": corpus.table.dim,
        "n_models": len(corpus.model_ids),
        "n_evaluations": {m: corpus.n_evaluations(m) for m in corpus.model_ids},
        "dataset_tags": sorted(set(corpus.table.dataset_tags)),
        "has_costs": corpus.costs is not None,
    }
    path = out / "ingest_report.json"
    write_json(path, report)
    inputs = _encoding_inputs(args.encodings) + [args.evals]
    if args.costs:
        inputs.append(args.costs)
    write_manifest(out, "ingest", args, inputs, [path], seed, time.time() - t0)
    return 0


def cmd_synth(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    spec = SyntheticSpec(n_models=args.models, n_queries=args.queries,
                         dphi=args.dphi, latent_dim=args.latent,
                         task_count=args.tasks, label_noise=args.noise, seed=seed)
    table, corpus, oracle = generate_synthetic_corpus(spec)
    out = _out_dir(args)
    enc_dir = out / "encodings"
    paths = list(save_encodings(table, enc_dir))
    evals_path = out / "evaluations.csv"
    save_evaluations(corpus, evals_path)
    paths.append(evals_path)

    rng = np.random.default_rng(seed + 1)
    costs = {m: float(round(np.exp(rng.normal(2.5, 1.0)), 3)) for m in corpus.model_ids}
    costs_path = out / "costs.csv"
    write_csv(costs_path, ["model_id", "params"],
              [[m, costs[m]] for m in corpus.model_ids])
    paths.append(costs_path)

    oracle_path = out / "oracle.json"
    write_json(oracle_path, {
        "projection": oracle.projection.tolist(),
        "weights": oracle.weights.tolist(),
        "biases": oracle.biases.tolist(),
        "label_noise": oracle.label_noise,
        "model_ids": oracle.model_ids,
        "family": oracle.family,
    })
    paths.append(oracle_path)
    write_manifest(out, "synth", args, [], paths, seed, time.time() - t0)
    return 0


def cmd_split(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    corpus = _load_corpus(args.encodings, args.evals)
    train_c, test_c = split_corpus(corpus, args.fraction, seed)
    out = _out_dir(args)
    train_path, test_path = out / "train.csv", out / "test.csv"
    save_evaluations(train_c, train_path)
    save_evaluations(test_c, test_path)
    write_manifest(out, "split", args,
                   _encoding_inputs(args.encodings) + [args.evals],
                   [train_path, test_path], seed, time.time() - t0)
    return 0


def cmd_train(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    corpus = _load_corpus(args.encodings, args.evals)
    enc_cfg = EncoderConfig(dphi=corpus.table.dim, d=args.d, L=args.L, r=args.r,
                            h=args.heads, activation=args.activation)
    train_cfg = TrainConfig(
        steps=args.steps, models_per_batch=args.models_per_batch,
        enc_subset_min=args.enc_min, enc_subset_max=args.enc_max,
        dec_queries_per_model=args.dec_queries, lr=args.lr,
        lr_schedule=args.lr_schedule, seed=seed,
        train_samples_per_model=args.train_samples,
        predictor_hidden=args.predictor_hidden)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    log_path = out_path.with_suffix(out_path.suffix + ".log.jsonl")
    with open(log_path, "w") as log:
        checkpoint = train(corpus, enc_cfg, train_cfg, log_stream=log)
    checkpoint.save(out_path)
    write_manifest(out_path.parent, "train", args,
                   _encoding_inputs(args.encodings) + [args.evals],
                   [out_path, log_path], seed, time.time() - t0)
    return 0


def cmd_embed(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    checkpoint = Checkpoint.load(args.ckpt)
    corpus = _load_corpus(args.encodings, args.evals)
    embeddings = embed_corpus(corpus, checkpoint.encoder,
                              checkpoint_digest=checkpoint.digest,
                              subset_size=args.subset_size, seed=seed,
                              threads=args.threads)
    out = _out_dir(args)
    csv_path = out / "embeddings.csv"
    save_embeddings_csv(embeddings, csv_path)
    bin_paths = save_embeddings_binary(embeddings, out / "embeddings.bin")
    write_manifest(out, "embed", args,
                   _encoding_inputs(args.encodings) + [args.evals, args.ckpt],
                   [csv_path, *bin_paths], seed, time.time() - t0)
    return 0


def cmd_onboard(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    checkpoint = Checkpoint.load(args.ckpt)
    corpus = _load_corpus(args.encodings, args.evals)
    if args.model not in corpus.models:
        raise ValidationError(f"model {args.model!r} not present in evaluations")
    emb = onboard(checkpoint, corpus.models[args.model], corpus.table,
                  model_id=args.model)
    out = _out_dir(args)
    path = out / f"{args.model}.embedding.json"
    write_json(path, {
        "model_id": emb.model_id,
        "z": [repr(float(v)) for v in emb.z],
        "checkpoint_digest": emb.checkpoint_digest,
        "evalset_digest": emb.evalset_digest,
        "n_used": emb.n_used,
    })
    write_manifest(out, "onboard", args,
                   _encoding_inputs(args.encodings) + [args.evals, args.ckpt],
                   [path], seed, time.time() - t0)
    return 0


def cmd_predict(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    checkpoint = Checkpoint.load(args.ckpt)
    table = _load_table(args.encodings)
    embeddings = load_embeddings_csv(args.embeddings)
    for e in embeddings:
        e.checkpoint_digest = checkpoint.digest
    qids = sorted(table.query_ids) if args.queries is None else \
        Path(args.queries).read_text().split()
    pm = predict_matrix(embeddings, table, checkpoint.predictor, query_ids=qids)
    out = _out_dir(args)
    path = out / "predictions.csv"
    save_prediction_matrix(pm, path)
    write_manifest(out, "predict", args,
                   _encoding_inputs(args.encodings) + [args.embeddings, args.ckpt],
                   [path], seed, time.time() - t0)
    return 0


def cmd_route(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    pm = load_prediction_matrix(args.predictions)
    routed = route_matrix(pm)
    out = _out_dir(args)
    path = out / "routes.csv"
    write_csv(path, ["query_id", "model_id"], list(zip(pm.query_ids, routed)))
    write_manifest(out, "route", args, [args.predictions], [path],
                   seed, time.time() - t0)
    return 0


def cmd_eval(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    checkpoint = Checkpoint.load(args.ckpt)
    train_corpus = _load_corpus(args.encodings, args.train_evals)
    test_corpus = _load_corpus(args.encodings, args.test_evals)
    embeddings = embed_corpus(train_corpus, checkpoint.encoder,
                              checkpoint_digest=checkpoint.digest,
                              subset_size=args.subset_size, seed=seed,
                              threads=args.threads)
    qids = sorted(test_corpus.query_ids())
    pm = predict_matrix(embeddings, test_corpus.table, checkpoint.predictor,
                        query_ids=qids)
    metrics = correctness_metrics(pm, test_corpus, threshold=args.threshold)
    out = _out_dir(args)
    report_path = out / "eval_report.json"
    write_json(report_path, metrics.to_dict(checkpoint_digest=checkpoint.digest))
    csv_path = out / "eval_report.csv"
    rows = [["overall", metrics.routing_accuracy, metrics.correctness_accuracy]]
    rows += [[tag, v["routing"], v["correctness"]]
             for tag, v in metrics.per_dataset.items()]
    write_csv(csv_path, ["dataset", "routing", "correctness"], rows)
    write_manifest(out, "eval", args,
                   _encoding_inputs(args.encodings)
                   + [args.train_evals, args.test_evals, args.ckpt],
                   [report_path, csv_path], seed, time.time() - t0)
    return 0


def cmd_robustness(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    checkpoint = Checkpoint.load(args.ckpt)
    train_corpus = _load_corpus(args.encodings, args.train_evals)
    test_corpus = _load_corpus(args.encodings, args.test_evals)
    spec = geometry.RobustnessSpec(
        n_ref=args.n_ref,
        alpha_grid=tuple(float(a) for a in args.alphas.split(",")),
        subsample_grid=tuple(int(s) for s in args.subsamples.split(",")),
        trials=args.trials, seed=seed)
    report = geometry.robustness_suite(checkpoint, train_corpus, test_corpus, spec)
    out = _out_dir(args)
    json_path = out / "robustness.json"
    write_json(json_path, report)
    csv_path = out / "robustness.csv"
    rows = [["overlap", r["alpha"], r["trial"], r["routing"], r["correctness"],
             r["mean_drift"], r["max_drift"]] for r in report["overlap"]]
    rows += [["subsample", r["size"], r["trial"], r["routing"], r["correctness"],
              r["mean_drift"], r["max_drift"]] for r in report["subsample"]]
    write_csv(csv_path,
              ["kind", "alpha_or_size", "trial", "routing", "correctness",
               "mean_drift", "max_drift"], rows)
    write_manifest(out, "robustness", args,
                   _encoding_inputs(args.encodings)
                   + [args.train_evals, args.test_evals, args.ckpt],
                   [json_path, csv_path], seed, time.time() - t0)
    return 0


def cmd_correlate(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    embeddings = load_embeddings_csv(args.embeddings)
    test_corpus = _load_corpus(args.encodings, args.test_evals)
    shared = [e for e in embeddings if e.model_id in test_corpus.models]
    dis = geometry.disagreement(test_corpus, model_ids=[e.model_id for e in shared])
    report = {"n_common_queries": dis.n_common, "metrics": {}}
    pair_rows = []
    for metric in ("cosine", "euclidean"):
        dist = geometry.pairwise_distances(shared, metric=metric)
        report["metrics"][metric] = geometry.correlations(
            dist.upper_triangle(), dis.upper_triangle())
        iu = np.triu_indices(len(dist.model_ids), k=1)
        for a, b in zip(*iu):
            pair_rows.append([metric, dist.model_ids[a], dist.model_ids[b],
                              dist.values[a, b], dis.values[a, b]])
    out = _out_dir(args)
    json_path = out / "correlations.json"
    write_json(json_path, report)
    csv_path = out / "pairs.csv"
    write_csv(csv_path, ["metric", "model_a", "model_b", "distance", "disagreement"],
              pair_rows)
    write_manifest(out, "correlate", args,
                   _encoding_inputs(args.encodings)
                   + [args.test_evals, args.embeddings],
                   [json_path, csv_path], seed, time.time() - t0)
    return 0


def cmd_cluster(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    embeddings = load_embeddings_csv(args.embeddings)
    dist = geometry.pairwise_distances(embeddings, metric=args.metric)
    merges = geometry.hierarchical_cluster(dist, linkage=args.linkage)
    out = _out_dir(args)
    json_path = out / "dendrogram.json"
    write_json(json_path, {
        "model_ids": dist.model_ids,
        "linkage": args.linkage,
        "metric": args.metric,
        "merges": [[a, b, h, s] for a, b, h, s in merges],
    })
    newick_path = out / "dendrogram.newick"
    newick_path.write_text(
        geometry.dendrogram_newick(merges, dist.model_ids) + "\n")
    write_manifest(out, "cluster", args, [args.embeddings],
                   [json_path, newick_path], seed, time.time() - t0)
    return 0


def cmd_neighbors(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    embeddings = load_embeddings_csv(args.embeddings)
    test_corpus = _load_corpus(args.encodings, args.test_evals)
    shared = [e for e in embeddings if e.model_id in test_corpus.models]
    dist = geometry.pairwise_distances(shared, metric=args.metric)
    dis = geometry.disagreement(test_corpus, model_ids=[e.model_id for e in shared])
    curve = geometry.knn_proxy_curve(dist, dis, args.k_max)
    out = _out_dir(args)
    json_path = out / "neighbor_agreement.json"
    write_json(json_path, {str(k): v for k, v in curve.items()})
    csv_path = out / "neighbor_agreement.csv"
    write_csv(csv_path, ["k", "agreement"], [[k, v] for k, v in curve.items()])
    write_manifest(out, "neighbors", args,
                   _encoding_inputs(args.encodings)
                   + [args.test_evals, args.embeddings],
                   [json_path, csv_path], seed, time.time() - t0)
    return 0


def cmd_fallback(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    checkpoint = Checkpoint.load(args.ckpt)
    embeddings = load_embeddings_csv(args.embeddings)
    for e in embeddings:
        e.checkpoint_digest = checkpoint.digest
    test_corpus = _load_corpus(args.encodings, args.test_evals)
    qids = sorted(test_corpus.query_ids())
    pm = predict_matrix(embeddings, test_corpus.table, checkpoint.predictor,
                        query_ids=qids)
    ks = [int(k) for k in args.k.split(",")]
    report = {str(k): geometry.fallback_eval(pm, embeddings, test_corpus, k)
              for k in ks}
    out = _out_dir(args)
    path = out / "fallback.json"
    write_json(path, report)
    write_manifest(out, "fallback", args,
                   _encoding_inputs(args.encodings)
                   + [args.test_evals, args.embeddings, args.ckpt],
                   [path], seed, time.time() - t0)
    return 0


def cmd_fingerprint(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    references = load_embeddings_csv(args.references)
    candidates = load_embeddings_csv(args.candidates)
    results = {}
    for cand in candidates:
        results[cand.model_id] = geometry.fingerprint_check(
            cand.z, references, margin=args.margin, metric=args.metric)
    out = _out_dir(args)
    path = out / "fingerprint.json"
    write_json(path, results)
    write_manifest(out, "fingerprint", args, [args.references, args.candidates],
                   [path], seed, time.time() - t0)
    return 0


def cmd_hypothetical(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    checkpoint = Checkpoint.load(args.ckpt)
    corpus = _load_corpus(args.encodings, args.evals)
    profiles = geometry.task_profiles(corpus)
    references = embed_corpus(corpus, checkpoint.encoder,
                              checkpoint_digest=checkpoint.digest,
                              threads=args.threads)
    rng = np.random.default_rng(seed)
    hypos = [geometry.hypothetical_embed(profiles[m], corpus.table, checkpoint,
                                         args.n_queries, rng)
             for m in corpus.model_ids]
    ks = [int(k) for k in args.ks.split(",")]
    recall = geometry.recall_at_k(hypos, references, ks)
    out = _out_dir(args)
    path = out / "hypothetical_recall.json"
    write_json(path, {str(k): v for k, v in recall.items()})
    write_manifest(out, "hypothetical", args,
                   _encoding_inputs(args.encodings) + [args.evals, args.ckpt],
                   [path], seed, time.time() - t0)
    return 0


def cmd_portfolio(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    embeddings = load_embeddings_csv(args.embeddings)
    dist = geometry.pairwise_distances(embeddings, metric=args.metric)
    kernel = geometry.rbf_kernel(dist, sigma=args.sigma)
    costs = load_costs(args.costs) if args.costs else None

    if args.mode == "kcenter":
        result = portfolio_mod.kcenter_select(kernel, args.k)
    elif args.mode == "kmedoids":
        initial = portfolio_mod.kcenter_select(kernel, args.k)
        result = portfolio_mod.pam_refine(kernel, initial)
    elif args.mode == "budget":
        if costs is None:
            raise ValidationError("budget mode requires --costs")
        result = portfolio_mod.budget_greedy(kernel, costs, args.budget)
    else:
        raise ValidationError(f"unknown mode {args.mode!r}")

    report = {
        "mode": args.mode,
        "selection_order": result.model_ids,
        "objective": result.objective,
        "trajectory": result.trajectory,
        "constraint": result.constraint,
        "sigma": kernel.sigma,
    }
    if args.predictions and args.test_evals:
        pm = load_prediction_matrix(args.predictions)
        test_corpus = _load_corpus(args.encodings, args.test_evals)
        report["routing_accuracy"] = portfolio_mod.portfolio_routing_accuracy(
            result, pm, test_corpus)
        rng = np.random.default_rng(seed)
        size = args.k if args.mode in ("kcenter", "kmedoids") else None
        subsets = portfolio_mod.random_feasible_subsets(
            kernel.model_ids, costs or {}, args.budget, size, args.baseline_trials, rng)
        accs = [portfolio_mod.portfolio_routing_accuracy(
            portfolio_mod.Portfolio(model_ids=s, objective=0.0, constraint={}),
            pm, test_corpus) for s in subsets]
        report["random_baseline"] = {
            "mean": float(np.mean(accs)), "stdev": float(np.std(accs)),
            "trials": len(accs),
        }
    out = _out_dir(args)
    path = out / "portfolio.json"
    write_json(path, report)
    inputs = [args.embeddings]
    if args.costs:
        inputs.append(args.costs)
    if args.predictions:
        inputs.append(args.predictions)
    write_manifest(out, "portfolio", args, inputs, [path], seed, time.time() - t0)
    return 0


def cmd_baseline(args):
    seed = _resolve_seed(args)
    t0 = time.time()
    train_corpus = _load_corpus(args.encodings, args.train_evals)
    test_corpus = _load_corpus(args.encodings, args.test_evals)
    qids = sorted(test_corpus.query_ids())
    out = _out_dir(args)
    outputs = []

    if args.variant in ("embedllm", "regen"):
        cfg = baselines.LearnedEmbeddingConfig(
            embed_dim=args.embed_dim, hidden=args.hidden,
            n_hidden_layers=args.hidden_layers, steps=args.steps,
            lr=args.lr, seed=seed)
        model = baselines.train_learned_embeddings(train_corpus, cfg)
        pm = baselines.learned_predict_matrix(model, test_corpus.table, qids)
        metrics = correctness_metrics(pm, test_corpus)
        report = metrics.to_dict(checkpoint_digest=pm.checkpoint_digest)
        report["final_loss"] = model.final_loss
        if args.variant == "regen":
            _, regen_report = baselines.regenerate_embeddings(
                model, train_corpus, seed + 1, test_query_ids=qids)
            report["regeneration"] = regen_report
    elif args.variant == "knn":
        router = baselines.KnnRouter.fit(train_corpus, args.k)
        pm = router.predict_matrix(test_corpus.table, qids)
        metrics = correctness_metrics(pm, test_corpus)
        report = metrics.to_dict(checkpoint_digest=pm.checkpoint_digest)
    elif args.variant == "kmeans":
        router = baselines.KMeansRouter.fit(train_corpus, args.clusters, seed)
        pm = router.predict_matrix(test_corpus.table, qids)
        metrics = correctness_metrics(pm, test_corpus)
        report = metrics.to_dict(checkpoint_digest=pm.checkpoint_digest)
        report["sse_trajectory"] = router.sse_trajectory
    else:
        raise ValidationError(f"unknown baseline variant {args.variant!r}")

    pred_path = out / "predictions.csv"
    save_prediction_matrix(pm, pred_path)
    outputs.append(pred_path)
    report_path = out / "baseline_report.json"
    write_json(report_path, report)
    outputs.append(report_path)
    write_manifest(out, f"baseline-{args.variant}", args,
                   _encoding_inputs(args.encodings)
                   + [args.train_evals, args.test_evals],
                   outputs, seed, time.time() - t0)
    return 0


# --- argument wiring ----------------------------------------------------------

def _add_common(p, config=True):
    p.add_argument("--seed", type=int, default=None,
                   help="RNG seed; falls back to $LOCUS_SEED, then 0")
    p.add_argument("--threads", type=int, default=1)
    if config:
        p.add_argument("--config", default=None,
                       help="JSON file whose values override flags")


def build_parser():
    parser = Parser(prog="locus", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("ingest", help="validate an evaluation corpus")
    p.add_argument("--encodings", required=True)
    p.add_argument("--evals", required=True)
    p.add_argument("--costs", default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic oracle corpus")
    p.add_argument("--models", type=int, default=20)
    p.add_argument("--queries", type=int, default=2000)
    p.add_argument("--dphi", type=int, default=32)
    p.add_argument("--latent", type=int, default=8)
    p.add_argument("--tasks", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="train/test split by query id")
    p.add_argument("--encodings", required=True)
    p.add_argument("--evals", required=True)
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train encoder and predictor")
    p.add_argument("--encodings", required=True)
    p.add_argument("--evals", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--L", type=int, default=2)
    p.add_argument("--r", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--activation", default="gelu")
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--models-per-batch", type=int, default=8)
    p.add_argument("--enc-min", type=int, default=16)
    p.add_argument("--enc-max", type=int, default=256)
    p.add_argument("--dec-queries", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-schedule", default="constant")
    p.add_argument("--train-samples", type=int, default=0)
    p.add_argument("--predictor-hidden", type=int, default=64)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed every model in a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--encodings", required=True)
    p.add_argument("--evals", required=True)
    p.add_argument("--subset-size", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("onboard", help="embed one new model, frozen encoder")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--encodings", required=True)
    p.add_argument("--evals", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_onboard)

    p = sub.add_parser("predict", help="probability matrix for a query set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--encodings", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--queries", default=None,
                   help="file of query ids, one per line (default: all)")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("route", help="argmax routing from a prediction matrix")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("eval", help="routing/correctness metrics on a test slice")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--encodings", required=True)
    p.add_argument("--train-evals", required=True)
    p.add_argument("--test-evals", required=True)
    p.add_argument("--subset-size", type=int, default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("robustness", help="overlap/subsample robustness study")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--encodings", required=True)
    p.add_argument("--train-evals", required=True)
    p.add_argument("--test-evals", required=True)
    p.add_argument("--n-ref", type=int, default=1024)
    p.add_argument("--alphas", default="0,0.25,0.5,0.75,1")
    p.add_argument("--subsamples", default="64,256")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("correlate", help="embedding distance vs disagreement")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--encodings", required=True)
    p.add_argument("--test-evals", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("cluster", help="agglomerative clustering of embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--metric", default="euclidean", choices=["cosine", "euclidean"])
    p.add_argument("--linkage", default="average",
                   choices=["average", "single", "complete"])
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("neighbors", help="k-th neighbor agreement curve")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--encodings", required=True)
    p.add_argument("--test-evals", required=True)
    p.add_argument("--metric", default="cosine", choices=["cosine", "euclidean"])
    p.add_argument("--k-max", type=int, default=5)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_neighbors)

    p = sub.add_parser("fallback", help="k-th neighbor fallback routing accuracy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--encodings", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--test-evals", required=True)
    p.add_argument("--k", default="0,1,2")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_fallback)

    p = sub.add_parser("fingerprint", help="relative-margin embedding match")
    p.add_argument("--references", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--margin", type=float, default=0.8)
    p.add_argument("--metric", default="euclidean", choices=["cosine", "euclidean"])
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("hypothetical", help="task-profile embeddings and recall@k")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--encodings", required=True)
    p.add_argument("--evals", required=True)
    p.add_argument("--n-queries", type=int, default=1024)
    p.add_argument("--ks", default="1,2,3,5,10")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_hypothetical)

    p = sub.add_parser("portfolio", help="count- or budget-constrained selection")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--mode", required=True, choices=["kcenter", "kmedoids", "budget"])
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--budget", type=float, default=None)
    p.add_argument("--costs", default=None)
    p.add_argument("--metric", default="cosine", choices=["cosine", "euclidean"])
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--predictions", default=None)
    p.add_argument("--encodings", default=None)
    p.add_argument("--test-evals", default=None)
    p.add_argument("--baseline-trials", type=int, default=20)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_portfolio)

    p = sub.add_parser("baseline", help="comparison routers")
    p.add_argument("variant", choices=["embedllm", "regen", "knn", "kmeans"])
    p.add_argument("--encodings", required=True)
    p.add_argument("--train-evals", required=True)
    p.add_argument("--test-evals", required=True)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--hidden-layers", type=int, default=1)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_baseline)

    return parser


def dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config_file(args)
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except ValidationError as err:
        print(f"validation error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failure
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
