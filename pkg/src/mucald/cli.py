"""Batch command-line front door.

Commands: run, discover-graph, attack, grad-check, metrics-oracle,
report. Every command honors --seed and --out, never writes outside
--out, and exits 0 on success, 2 on configuration or input errors, 3 on
runtime aborts.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .causal_discovery import NotearsConfig, fit_notears, top_k_edges
from .config import load_config
from .exceptions import ConfigError, DataError, FrameError, HarnessError, StateError
from .proxy_features import read_features_csv

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=0, help="master seed")
    parser.add_argument("--out", type=str, default=None, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="mucald",
                                     description="multi-task split-federated training runs, "
                                                 "graph discovery, attacks and validation suites")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a training run")
    p_run.add_argument("--config", type=str, default=None, help="INI config file")
    p_run.add_argument("--ablation", type=str, default=None,
                       choices=["crdm-only", "daca-only", "no-causality",
                                "no-diffusion", "no-forward-noise"])
    p_run.add_argument("--rounds", type=int, default=None)
    p_run.add_argument("--variant", type=str, default=None, choices=["mucald", "baseline"])
    _add_common(p_run)

    p_graph = sub.add_parser("discover-graph", help="fit a causal graph to a feature CSV")
    p_graph.add_argument("--features", type=str, required=True, help="feature CSV path")
    p_graph.add_argument("--k", type=int, default=3, help="edges to keep")
    p_graph.add_argument("--variant", type=str, default="mlp", choices=["linear", "mlp"])
    _add_common(p_graph)

    p_attack = sub.add_parser("attack", help="attack a finished run's intercept logs")
    p_attack.add_argument("--run", type=str, required=True, help="run output directory")
    p_attack.add_argument("--split", type=int, required=True, choices=[1, 2])
    p_attack.add_argument("--obfuscation", type=str, required=True, choices=["on", "off"])
    _add_common(p_attack)

    p_grad = sub.add_parser("grad-check", help="finite-difference validation of every backward pass")
    _add_common(p_grad)

    p_metrics = sub.add_parser("metrics-oracle", help="brute-force metric comparisons")
    _add_common(p_metrics)

    p_report = sub.add_parser("report", help="summarize a finished run")
    p_report.add_argument("--run", type=str, required=True, help="run output directory")
    _add_common(p_report)
    return parser


def _cmd_run(args):
    from .runtime import RunConfig, run
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
    cfg.seed = args.seed
    if args.rounds is not None:
        cfg.rounds = args.rounds
    if args.variant is not None:
        cfg.variant = args.variant
    if args.ablation is not None:
        cfg.ablation = args.ablation.replace("-", "_")
    cfg.validate()
    if args.out is None:
        raise ConfigError("run: --out is required")
    run(cfg, out_dir=args.out, progress=print)
    print(f"run complete; artifacts in {args.out}")
    return EXIT_OK


def _cmd_discover_graph(args):
    names, matrix = read_features_csv(args.features)
    matrix = matrix - matrix.mean(axis=0)
    std = matrix.std(axis=0)
    matrix = matrix / np.where(std == 0, 1.0, std)
    cfg = NotearsConfig(top_k=args.k)
    graph = fit_notears(matrix, cfg, variant=args.variant, names=names, seed=args.seed)
    graph.edges = top_k_edges(graph, args.k)
    text = graph.to_json()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "graph.json").write_text(text)
        print(f"graph written to {out / 'graph.json'}")
    else:
        print(text)
    for src, dst, weight in graph.edges:
        print(f"edge {names[src]} -> {names[dst]}: {weight:+.4f}")
    return EXIT_OK


def _cmd_attack(args):
    from .privacy import load_intercepts, membership_inference, train_attack_decoder
    from .runtime import RunConfig, ClientWorker, derive_rng
    from .crdm import cosine_schedule

    run_dir = Path(args.run)
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        raise ConfigError(f"attack: no summary.json under {run_dir}")
    summary = json.loads(summary_path.read_text())
    cfg = RunConfig.from_dict(summary["config"])
    obfuscated = cfg.uses_denoiser()
    if (args.obfuscation == "on") != obfuscated:
        raise ConfigError(f"attack: run under {run_dir} has obfuscation "
                          f"{'on' if obfuscated else 'off'}, not {args.obfuscation}")

    log = load_intercepts(run_dir, args.split)
    schedule = cosine_schedule(cfg.timesteps, cfg.schedule_offset)
    workers = [ClientWorker(cid, cfg, schedule) for cid in range(cfg.clients)]
    images_by_id = {}
    for worker in workers:
        for idx in range(worker.data.train_images.shape[0]):
            images_by_id[worker.cid * 1_000_000 + idx] = worker.data.train_images[idx]

    decoder, report = train_attack_decoder(log, images_by_id, seed=args.seed)
    report.obfuscation = args.obfuscation
    report.config = {"run_dir": str(run_dir), "split": args.split,
                     "variant": cfg.variant, "ablation": cfg.ablation}

    # membership inference on client 0's personalized model
    worker = workers[0]
    worker.load(run_dir / "checkpoints" / "client0.mcsf")
    rng = derive_rng(cfg.seed, 4, 0, 0)
    report.mia_auc = membership_inference(
        lambda img, msk: worker.per_sample_seg_loss(img, msk, rng=rng),
        (worker.data.train_images, worker.data.train_masks),
        (worker.data.test_images, worker.data.test_masks))

    text = report.to_json()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"attack_split{args.split}_{args.obfuscation}.json"
        path.write_text(text)
        print(f"attack report written to {path}")
    print(f"split {args.split} obfuscation={args.obfuscation}: "
          f"attack PSNR {report.recon_psnr_mean:.2f} dB "
          f"(baseline {report.baseline_psnr:.2f} dB), MIA AUC {report.mia_auc:.3f}")
    return EXIT_OK


def _cmd_grad_check(args):
    from .validation_suite import grad_check_suite
    results = grad_check_suite(seed=args.seed)
    worst = 0.0
    for name, err in results:
        status = "PASS" if err < 1e-5 else "FAIL"
        print(f"{status}  {name:<35} max rel err {err:.3e}")
        worst = max(worst, err)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "grad_check.json").write_text(json.dumps(dict(results), indent=2))
    return EXIT_OK if worst < 1e-5 else EXIT_FAIL


def _cmd_metrics_oracle(args):
    from .validation_suite import metrics_oracle_suite
    results = metrics_oracle_suite(seed=args.seed)
    worst = 0.0
    for name, delta in results:
        status = "PASS" if delta < 1e-9 else "FAIL"
        print(f"{status}  {name:<20} max delta {delta:.3e}")
        worst = max(worst, delta)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics_oracle.json").write_text(json.dumps(dict(results), indent=2))
    return EXIT_OK if worst < 1e-9 else EXIT_FAIL


def _cmd_report(args):
    run_dir = Path(args.run)
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        raise ConfigError(f"report: no summary.json under {run_dir}")
    summary = json.loads(summary_path.read_text())
    cfg = summary["config"]
    print(f"variant={cfg['variant']} ablation={cfg['ablation']} rounds={summary['rounds_completed']} "
          f"clients={cfg['clients']} seed={cfg['seed']}")
    header = ["client", "Dice", "IoU W/B", "IoU N/B", "Precision", "Recall",
              "F1 Score", "HD95", "ASSD"]
    print("  ".join(f"{h:>9}" for h in header))
    for cid, metrics in sorted(summary["test_metrics"].items()):
        row = [cid] + [f"{metrics[k]:.3f}" for k in
                       ("dice", "iou_wb", "iou_nb", "precision", "recall", "f1", "hd95", "assd")]
        print("  ".join(f"{v:>9}" for v in row))
    print(f"mean test IoU N/B: {summary['mean_test_iou_nb']:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "discover-graph": _cmd_discover_graph,
    "attack": _cmd_attack,
    "grad-check": _cmd_grad_check,
    "metrics-oracle": _cmd_metrics_oracle,
    "report": _cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DataError, FrameError, HarnessError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StateError as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
