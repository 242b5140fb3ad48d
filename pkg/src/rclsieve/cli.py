"""Command-line entry point: ``python -m rclsieve <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error (unknown flag,
missing required input). Every run writes a JSON manifest next to its main
output (or to ``--manifest``) with input/output digests, so a run can be
replayed and checked with :func:`replay`.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from rclsieve import __version__
from rclsieve.data import Dataset
from rclsieve.gradcheck import run_gradcheck
from rclsieve.model import SIM_KINDS, featurize, identity_params, random_params
from rclsieve.noiselab import LabConfig, SyntheticSpec, simulate
from rclsieve.retrieval import evaluate
from rclsieve.sieve import refine_and_sieve
from rclsieve.storage import (
    load_checkpoint,
    load_corpus,
    load_dataset,
    save_checkpoint,
    save_corpus,
    save_dataset,
    write_manifest,
    write_records,
)
from rclsieve.trainer import TrainConfig, train

logger = logging.getLogger("rclsieve")

SEED_ENV = "RCLSIEVE_SEED"
DEFAULT_SCALE = {"cosine": 20.0, "dot": 1.0}


class UsageError(Exception):
    pass


def default_seed(fallback: int = 0) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return fallback
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _add_training_flags(p, beta_default, epochs_default, lr_default):
    p.add_argument("--beta", type=float, default=beta_default)
    p.add_argument("--epochs", type=int, default=epochs_default)
    p.add_argument("--lr", type=float, default=lr_default)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--hard-negatives", type=int, default=None, help="hard negatives per query (default: all)")
    p.add_argument("--in-batch", type=_on_off, default=True, metavar="{on|off}")
    p.add_argument("--ccr-in-batch", type=_on_off, default=True, metavar="{on|off}",
                   help="include in-batch columns in the regularizer mean")
    p.add_argument("--progress", type=Path, default=None, help="write per-epoch loss records here")


def build_parser(seed: int) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rclsieve", description="Noise-robust contrastive training for dense retrieval.")
    parser.add_argument("--version", action="version", version=f"rclsieve {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--manifest", type=Path, default=None, help="manifest path (default: next to the main output)")
        return p

    p = add("ingest", "featurize a text dataset and corpus into vector files")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--feature-dim", type=int, default=256)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out", type=Path, required=True, help="output dataset file")
    p.add_argument("--out-corpus", type=Path, required=True)

    p = add("train", "train the towers with the regularized loss")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--sim", choices=SIM_KINDS, default="cosine")
    _add_training_flags(p, None, 1, 0.1)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--init", type=Path, default=None, help="start from this checkpoint")
    p.add_argument("--embed-dim", type=int, default=None, help="random init of this width (default: identity)")
    p.add_argument("--scale", type=float, default=None, help="score scale for a fresh model")
    p.add_argument("--tied", action="store_true")
    p.add_argument("--out", type=Path, required=True, help="output checkpoint")

    p = add("sieve", "refine a checkpoint and drop likely false negatives")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_training_flags(p, 0.5, 1, 1e-7)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out", type=Path, required=True, help="sieved dataset file")
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--refined-out", type=Path, default=None, help="also save the refined checkpoint")

    p = add("simulate", "beta sweep on synthetic data with planted false negatives")
    spec_defaults = SyntheticSpec()
    p.add_argument("--num-queries", type=int, default=spec_defaults.num_queries)
    p.add_argument("--feature-dim", type=int, default=spec_defaults.feature_dim)
    p.add_argument("--relevant-per-query", type=int, default=spec_defaults.relevant_per_query)
    p.add_argument("--hard-negatives-per-query", type=int, default=spec_defaults.hard_negatives_per_query)
    p.add_argument("--cluster-noise-scale", type=float, default=spec_defaults.cluster_noise_scale)
    p.add_argument("--noise-rate", type=float, default=spec_defaults.noise_rate)
    p.add_argument("--seed", type=int, default=int(os.environ.get(SEED_ENV) or spec_defaults.seed))
    lab = LabConfig()
    p.add_argument("--scale", type=float, default=lab.scale)
    p.add_argument("--lr", type=float, default=lab.learning_rate)
    p.add_argument("--batch-size", type=int, default=lab.batch_size)
    p.add_argument("--warmup-epochs", type=int, default=lab.warmup_epochs)
    p.add_argument("--sweep-epochs", type=int, default=lab.sweep_epochs)
    p.add_argument("--betas", type=_float_list, default=[0.0, 0.05, 0.1, 0.5])
    p.add_argument("--out", type=Path, required=True, help="output directory for reports")
    p.add_argument("--dump-data", action="store_true", help="also write the generated datasets")

    p = add("eval", "recall and MRR of a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--k", type=_int_list, default=[5, 20, 100])
    p.add_argument("--mrr-k", type=_int_list, default=[10])
    p.add_argument("--out", type=Path, default=None, help="metrics file (default: stdout only)")

    p = add("gradcheck", "finite-difference check of the analytic gradients")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out", type=Path, default=None)
    return parser


def _require_files(parser, *paths):
    for path in paths:
        if path is not None and not Path(path).is_file():
            parser.error(f"input file not found: {path}")


def _sink():
    """Return (callback, records); records are written once the run finishes."""
    records: list[dict] = []
    return records.append, records


def _load_vectors(dataset_path, corpus_path) -> Dataset:
    ds = load_dataset(dataset_path, corpus_path)
    if ds.mode != "vector":
        raise ValueError(f"{dataset_path} holds text; run 'rclsieve ingest' first")
    return ds


def _train_config(args, sim_kind) -> TrainConfig:
    return TrainConfig(
        beta=args.beta, learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
        hard_negatives_per_query=args.hard_negatives, sim_kind=sim_kind, seed=args.seed,
        include_in_batch_negatives=args.in_batch, ccr_in_batch=args.ccr_in_batch,
    )


def cmd_ingest(args):
    corpus, mode = load_corpus(args.corpus)
    if mode != "text":
        raise ValueError(f"{args.corpus} is already in vector mode")
    ds = load_dataset(args.dataset, args.corpus)
    fdim, seed = args.feature_dim, args.seed
    vec_corpus = {pid: featurize(text, fdim, seed) for pid, text in corpus.items()}
    examples = [type(ex)(ex.query_id, featurize(ex.query, fdim, seed), ex.positive_id, list(ex.negative_ids),
                         ex.relevant_ids) for ex in ds.examples]
    out = Dataset(examples, vec_corpus, "vector")
    save_dataset(out, args.out)
    save_corpus(vec_corpus, "vector", args.out_corpus)
    logger.info("ingested %d queries, %d passages", len(examples), len(vec_corpus))
    return {"feature_dim": fdim}, [args.dataset, args.corpus], [args.out, args.out_corpus]


def cmd_train(args):
    ds = _load_vectors(args.dataset, args.corpus)
    if args.init is not None:
        params = load_checkpoint(args.init)
        if args.scale is not None:
            params.scale = args.scale
    else:
        scale = args.scale if args.scale is not None else DEFAULT_SCALE[args.sim]
        if args.embed_dim is None:
            params = identity_params(ds.feature_dim, args.sim, tied=args.tied, scale=scale)
        else:
            params = random_params(ds.feature_dim, args.embed_dim, seed=args.seed, sim_kind=args.sim,
                                   tied=args.tied, scale=scale)
    if params.feature_dim != ds.feature_dim:
        raise ValueError(f"checkpoint feature_dim {params.feature_dim} != dataset dim {ds.feature_dim}")
    config = _train_config(args, args.sim)
    sink, records = _sink()
    result = train(params, ds, config, sink)
    save_checkpoint(result.params, args.out)
    if args.progress is not None:
        write_records(args.progress, records)
    last = result.trace[-1]
    print(f"trained {config.epochs} epoch(s): mean_nce={last['mean_nce']:.6f} mean_rcl={last['mean_rcl']:.6f}")
    return asdict(config), [args.dataset, args.corpus, args.init], [args.out, args.progress]


def cmd_sieve(args):
    ds = _load_vectors(args.dataset, args.corpus)
    params = load_checkpoint(args.checkpoint)
    if params.feature_dim != ds.feature_dim:
        raise ValueError(f"checkpoint feature_dim {params.feature_dim} != dataset dim {ds.feature_dim}")
    config = _train_config(args, "cosine")
    sink, records = _sink()
    sieved, report, result = refine_and_sieve(params, ds, config, sink)
    save_dataset(sieved, args.out)
    write_records(args.report, report.records())
    if args.refined_out is not None:
        save_checkpoint(result.params, args.refined_out)
    if args.progress is not None:
        write_records(args.progress, records)
    print(f"kept {report.kept} negatives, dropped {report.dropped} (sieve-out rate {report.sieve_out_rate:.4f})")
    return asdict(config), [args.dataset, args.corpus, args.checkpoint], [args.out, args.report, args.refined_out,
                                                                        args.progress]


def cmd_simulate(args):
    spec = SyntheticSpec(
        num_queries=args.num_queries, feature_dim=args.feature_dim, relevant_per_query=args.relevant_per_query,
        hard_negatives_per_query=args.hard_negatives_per_query, cluster_noise_scale=args.cluster_noise_scale,
        noise_rate=args.noise_rate, seed=args.seed,
    )
    lab = LabConfig(scale=args.scale, learning_rate=args.lr, batch_size=args.batch_size,
                    warmup_epochs=args.warmup_epochs, sweep_epochs=args.sweep_epochs)
    sim = simulate(spec, args.betas, lab)
    out = args.out
    outputs = [out / "reports.jsonl", out / "histograms.jsonl", out / "planted.jsonl"]
    write_records(outputs[0], [r.summary() for r in sim.reports])
    write_records(outputs[1], [r.histogram() for r in sim.reports])
    write_records(outputs[2], [{"query_id": q, "passage_id": p} for q, p in sim.ledger.items()])
    if args.dump_data:
        extra = [out / "train_noisy.jsonl", out / "test.jsonl", out / "corpus.jsonl"]
        save_dataset(sim.noisy, extra[0], extra[2])
        save_dataset(sim.data.test, extra[1])
        outputs += extra
    for r in sim.reports:
        print(f"beta={r.beta:g} separation_auc={r.separation_auc:.4f}")
    return {"spec": asdict(spec), "lab": asdict(lab), "betas": args.betas}, [], outputs


def cmd_eval(args):
    ds = _load_vectors(args.dataset, args.corpus)
    params = load_checkpoint(args.checkpoint)
    metrics = evaluate(params, ds, ks=args.k, mrr_ks=args.mrr_k)
    records = metrics.records()
    for rec in records:
        print(json.dumps(rec, sort_keys=True))
    if args.out is not None:
        write_records(args.out, records)
    return {"k": args.k, "mrr_k": args.mrr_k}, [args.checkpoint, args.dataset, args.corpus], [args.out]


def cmd_gradcheck(args):
    result = run_gradcheck(n=args.instances, seed=args.seed)
    summary = {
        "instances": args.instances,
        "max_score_error": result.max_score_error,
        "max_param_error": result.max_param_error,
        "ok": result.ok,
    }
    print(json.dumps(summary, sort_keys=True))
    if args.out is not None:
        write_records(args.out, [summary])
    if not result.ok:
        raise RuntimeError("analytic gradients disagree with finite differences")
    return {"instances": args.instances}, [], [args.out]


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "sieve": cmd_sieve,
    "simulate": cmd_simulate,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def _manifest_path(args) -> Path:
    if args.manifest is not None:
        return args.manifest
    out = getattr(args, "out", None)
    if out is None:
        return Path(f"rclsieve-{args.command}.manifest.json")
    if args.command == "simulate":
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


def cli(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser(default_seed())
    except UsageError as e:
        print(f"rclsieve: error: {e}", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
        _require_files(parser, *(getattr(args, a, None) for a in ("dataset", "corpus", "checkpoint", "init")))
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        config, inputs, outputs = COMMANDS[args.command](args)
        write_manifest(_manifest_path(args), args.command, argv, config, getattr(args, "seed", None),
                       inputs, outputs, started)
    except Exception as e:
        logger.debug("failure", exc_info=True)
        print(f"rclsieve {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


def replay(manifest_path) -> dict[str, tuple[str, str]]:
    """Re-run the command recorded in a manifest.

    Returns the outputs whose digest changed, as ``{path: (old, new)}``;
    empty means the replay reproduced every output. The recorded seed is
    passed explicitly so an environment override cannot leak in.
    """
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    argv = list(manifest["argv"])
    if manifest.get("seed") is not None and "--seed" not in argv:
        argv += ["--seed", str(manifest["seed"])]
    if "--manifest" not in argv:
        argv += ["--manifest", str(manifest_path)]
    code = cli(argv)
    if code != 0:
        raise RuntimeError(f"replay of {manifest_path} exited with {code}")
    fresh = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    return {p: (d, fresh["outputs"].get(p)) for p, d in manifest["outputs"].items() if fresh["outputs"].get(p) != d}


def main() -> None:
    sys.exit(cli())
