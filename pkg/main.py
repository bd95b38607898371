#!/usr/bin/env python3
"""
Command-line runner: synthetic data, training, evaluation, the sample-count
ablation, the audit suite, reports and the inference server
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import softmax

from audit_checks import run_audit
from database_models import get_database_url, list_runs, record_run
from errors import ConfigError, IwslError, NumericalError
from gumbel_sampler import DensityMode, sample_gumbel
from importance_bound import estimate
from marginal_scores import compute_marginal_scores
from mlp_networks import load_checkpoint, save_checkpoint
from run_config import RunConfig, config_hash, config_snapshot, load_run_config
from scene_graph import SyntheticInstance, dataset_hash, label_counts, read_dataset, split_dataset, synth_dataset, write_dataset
from structure_learning import EvaluationReport, Metrics, evaluate, train
from variational_inference import node_rng

logger = logging.getLogger(__name__)

DATASET_FILE = "dataset.jsonl"
HELDOUT_FILE = "heldout.jsonl"
CHECKPOINT_FILE = "checkpoint.bin"


# --- OUTPUT HELPERS ---

def output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_table(out: Path, stem: str, cfg: RunConfig, rows: List[dict], extra: Optional[dict] = None) -> None:
    """<stem>.csv with a config_hash column, and <stem>.json carrying the full snapshot"""
    digest = config_hash(cfg)
    csv_rows = [{"config_hash": digest, **row} for row in rows]
    with open(out / f"{stem}.csv", "w", newline="", encoding="utf-8") as f:
        if csv_rows:
            writer = csv.DictWriter(f, fieldnames=list(csv_rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(csv_rows)
    mirror = {"config_hash": digest, "config_snapshot": config_snapshot(cfg), **(extra or {}), "rows": rows}
    (out / f"{stem}.json").write_text(json.dumps(mirror, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote {out / stem}.csv and .json ({len(rows)} rows)")


def write_snapshot(out: Path, cfg: RunConfig) -> None:
    (out / "config_snapshot.txt").write_text(config_snapshot(cfg), encoding="utf-8")


def require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        logger.error(f"Missing {what}: {path}")
        raise ConfigError(f"missing {what}: {path}")
    return path


def register(cfg: RunConfig, command: str, dataset_digest: Optional[str] = None, metrics: Optional[dict] = None) -> None:
    """Record the run when a registry is configured; failures never change the exit code"""
    url = get_database_url(cfg.registry_url)
    if url is None:
        return
    try:
        record_run(url, command, config_hash(cfg), config_snapshot(cfg), dataset_digest, metrics)
    except Exception as e:
        logger.error(f"Could not record {command} run in registry: {str(e)}")


def metrics_row(readout: str, metrics: Metrics) -> dict:
    return {
        "readout": readout,
        "object_mean_recall": metrics.object_mean_recall,
        "predicate_mean_recall": metrics.predicate_mean_recall,
        "combined_mean_recall": metrics.combined_mean_recall,
        "overall_accuracy": metrics.overall_accuracy,
        "object_topk_mean_recall": metrics.object_topk_mean_recall,
        "predicate_topk_mean_recall": metrics.predicate_topk_mean_recall,
        "predicate_head_recall": metrics.predicate_group_recall.get("head"),
        "predicate_body_recall": metrics.predicate_group_recall.get("body"),
        "predicate_tail_recall": metrics.predicate_group_recall.get("tail"),
        **{f"combined_recall_at_{k}": value for k, value in sorted(metrics.combined_recall_at.items())},
    }


def load_split(out: Path, explicit: Optional[str], default: str):
    path = require_file(Path(explicit) if explicit else out / default, "dataset file")
    return read_dataset(path)


# --- COMMANDS ---

def cmd_synth(cfg: RunConfig, args) -> int:
    out = output_dir(cfg)
    task = cfg.task_config()
    dataset = synth_dataset(task, cfg.count + cfg.heldout_count)
    train_set, heldout = split_dataset(dataset, cfg.heldout_count)
    digest = write_dataset(out / DATASET_FILE, task, train_set)
    if heldout:
        write_dataset(out / HELDOUT_FILE, task, heldout)
    write_snapshot(out, cfg)
    register(cfg, "synth", digest)
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = output_dir(cfg)
    task, dataset = load_split(out, args.dataset, DATASET_FILE)
    digest = dataset_hash(dataset)
    try:
        theta, tau, trace = train(dataset, cfg.learn_config(), cfg.inference_config(), task.v_o, task.v_p)
    except NumericalError as e:
        if e.last_theta is not None:
            save_checkpoint(out / CHECKPOINT_FILE, e.last_theta, e.tau if e.tau is not None else cfg.tau)
            logger.error(f"Kept the parameters from before iteration {e.iteration} in {out / CHECKPOINT_FILE}")
        raise

    save_checkpoint(out / CHECKPOINT_FILE, theta, tau)
    rows = [record.model_dump() for record in trace]
    write_table(out, "train_log", cfg, rows, {"dataset_hash": digest, "final_tau": tau})
    write_snapshot(out, cfg)
    register(cfg, "train", digest, {"final_loss": trace[-1].loss, "final_tau": tau})
    return 0


def _reference_counts(out: Path, task_v_o: int, task_v_p: int) -> Optional[np.ndarray]:
    """Predicate frequencies of the training split, when it is on disk"""
    path = out / DATASET_FILE
    if not path.is_file():
        return None
    _, train_set = read_dataset(path)
    return label_counts(train_set, task_v_o, task_v_p)[1]


def _loss_trace(out: Path) -> List[float]:
    path = out / "train_log.json"
    if not path.is_file():
        return []
    return [row["loss"] for row in json.loads(path.read_text(encoding="utf-8"))["rows"]]


def cmd_eval(cfg: RunConfig, args) -> int:
    out = output_dir(cfg)
    default = HELDOUT_FILE if (out / HELDOUT_FILE).is_file() else DATASET_FILE
    task, dataset = load_split(out, args.dataset, default)
    theta, tau = load_checkpoint(require_file(Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT_FILE,
                                              "checkpoint"))
    report = evaluate(dataset, theta, cfg.inference_config(tau=tau), task.v_o, task.v_p, cfg.top_k,
                      _reference_counts(out, task.v_o, task.v_p), _loss_trace(out), cfg.workers, cfg.recall_ks)
    digest = dataset_hash(dataset)
    rows = [{"dataset_hash": digest, **metrics_row("posterior", report.posterior), "mean_bound": report.mean_bound},
            {"dataset_hash": digest, **metrics_row("variational", report.variational), "mean_bound": report.mean_bound}]
    write_table(out, "metrics", cfg, rows, {"dataset_hash": digest, "tau": tau, "report": report.model_dump()})
    write_snapshot(out, cfg)
    register(cfg, "eval", digest, rows[0])
    return 0


def bound_column(theta, dataset: Sequence[SyntheticInstance], sizes: Sequence[int], tau: float,
                 density: DensityMode, seed: int) -> Dict[int, tuple]:
    """
    Mean and standard error of L_s at π = softmax(ψ) for each s, using
    nested prefixes of one noise bank per node.
    """
    largest = max(sizes)
    values = {s: [] for s in sizes}
    for k, inst in enumerate(dataset):
        for idx, psi in enumerate(compute_marginal_scores(theta, inst).ordered()):
            bank = sample_gumbel(node_rng(seed, (k, largest), idx), psi.shape[0], largest)
            pi = softmax(psi)
            for s in sizes:
                values[s].append(estimate(psi, pi, bank[:s], tau, density).value)
    summary = {}
    for s in sizes:
        v = np.array(values[s])
        se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
        summary[s] = (float(v.mean()), se)
    return summary


def cmd_ablate_samples(cfg: RunConfig, args) -> int:
    out = output_dir(cfg)
    task, train_set = load_split(out, args.dataset, DATASET_FILE)
    heldout_path = Path(args.heldout) if args.heldout else out / HELDOUT_FILE
    _, heldout = read_dataset(heldout_path) if heldout_path.is_file() else (task, train_set)
    sizes = sorted(set(cfg.sample_counts))
    digest = dataset_hash(heldout)

    # the θ trajectory does not depend on s, so one training run serves every row
    theta, tau, _ = train(train_set, cfg.learn_config(), cfg.inference_config(), task.v_o, task.v_p)
    reference = label_counts(train_set, task.v_o, task.v_p)[1]
    bounds = bound_column(theta, heldout, sizes, tau, cfg.density, cfg.seed)

    rows = []
    for s in sizes:
        inf_cfg = cfg.inference_config(tau=tau).model_copy(update={"samples_infer": s})
        report: EvaluationReport = evaluate(heldout, theta, inf_cfg, task.v_o, task.v_p, cfg.top_k,
                                            reference, workers=cfg.workers, recall_ks=cfg.recall_ks)
        posterior = metrics_row("posterior", report.posterior)
        rows.append({
            "samples": s,
            "dataset_hash": digest,
            "bound_mean": bounds[s][0],
            "bound_se": bounds[s][1],
            "mean_optimized_bound": report.mean_bound,
            **{key: value for key, value in posterior.items() if key != "readout"},
            "variational_combined_mean_recall": report.variational.combined_mean_recall,
        })
        logger.info(f"s={s}: bound {bounds[s][0]:.4f} +- {bounds[s][1]:.4f}, "
                    f"mR={report.posterior.combined_mean_recall:.4f}")
    write_table(out, "ablation", cfg, rows, {"dataset_hash": digest, "tau": tau})
    write_snapshot(out, cfg)
    register(cfg, "ablate-samples", digest, {"rows": rows})
    return 0


def cmd_audit(cfg: RunConfig, args) -> int:
    out = output_dir(cfg)
    results = run_audit(perturb_density=args.perturb_density, seed=cfg.seed)
    rows = [result.model_dump() for result in results]
    write_table(out, "audit", cfg, rows, {"passed": all(r.passed for r in results)})
    for result in results:
        print(f"{'PASS' if result.passed else 'FAIL'}  {result.name}: {result.detail}")
    failed = [r.name for r in results if not r.passed]
    register(cfg, "audit", None, {"failed": failed})
    if failed:
        logger.error(f"Audit failed: {', '.join(failed)}")
        return 1
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    printed = False
    for stem in ("train_log", "metrics", "ablation", "audit"):
        path = out / f"{stem}.json"
        if not path.is_file():
            continue
        printed = True
        payload = json.loads(path.read_text(encoding="utf-8"))
        rows = payload["rows"]
        print(f"== {stem} (config {payload['config_hash'][:12]}, {len(rows)} rows)")
        if stem == "train_log" and rows:
            print(f"   loss {rows[0]['loss']:.4f} -> {rows[-1]['loss']:.4f}, final tau {payload.get('final_tau')}")
        elif stem == "metrics":
            for row in rows:
                print(f"   {row['readout']}: mR={row['combined_mean_recall']:.4f} acc={row['overall_accuracy']:.4f}")
        elif stem == "ablation":
            for row in rows:
                print(f"   s={row['samples']}: bound {row['bound_mean']:.4f} +- {row['bound_se']:.4f}, "
                      f"mR={row['combined_mean_recall']:.4f}")
        elif stem == "audit":
            passed = sum(1 for row in rows if row["passed"])
            print(f"   {passed}/{len(rows)} checks passed")
    url = get_database_url(cfg.registry_url)
    if url is not None:
        for run in list_runs(url):
            print(f"   run {run['id']}: {run['command']} config {run['config_hash'][:12]} at {run['created_at']}")
    if not printed:
        print(f"No result files in {out}")
    return 0


def cmd_serve(cfg: RunConfig, args) -> int:
    import uvicorn

    uvicorn.run("inference_api:app", host=args.host, port=args.port)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate-samples": cmd_ablate_samples,
    "audit": cmd_audit,
    "report": cmd_report,
    "serve": cmd_serve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Importance-weighted structure learning on synthetic scene graphs")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--out", help="output directory (IWSL_OUTPUT_DIR takes precedence)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    sub = parser.add_subparsers(dest="command", required=True)
    synth = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    synth.add_argument("--count", type=int)
    train_p = sub.add_parser("train", parents=[common], help="train θ on a dataset")
    train_p.add_argument("--dataset")
    eval_p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    eval_p.add_argument("--dataset")
    eval_p.add_argument("--checkpoint")
    ablate = sub.add_parser("ablate-samples", parents=[common], help="sample-count ablation table")
    ablate.add_argument("--dataset")
    ablate.add_argument("--heldout")
    ablate.add_argument("--samples", help="comma-separated sample counts, e.g. 10,30,50")
    audit = sub.add_parser("audit", parents=[common], help="run the cross-check suite")
    audit.add_argument("--perturb-density", type=float, default=0.0, help=argparse.SUPPRESS)
    sub.add_parser("report", parents=[common], help="summarize result files")
    serve = sub.add_parser("serve", parents=[common], help="run the inference API")
    serve.add_argument("--host", default="0.0.0.0")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 2
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr)

    overrides = {"seed": args.seed, "workers": args.workers, "output_dir": args.out,
                 "count": getattr(args, "count", None), "sample_counts": getattr(args, "samples", None)}
    try:
        cfg = load_run_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except IwslError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, json.JSONDecodeError) as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
