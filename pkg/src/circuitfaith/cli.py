"""Command line entry point: forge, discover, evaluate, roc, bench, selftest, run."""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from .discovery import ScoreMap, scores_to_circuit_sequence
from .forge import TASKS, forge, gen_dataset
from .graph import Edge, NodeId, circuit_to_csv
from .harness import (
    ROC_TIE_RULE,
    ExperimentConfig,
    _resolve_circuit,
    bench_timing,
    discover,
    evaluate_circuit,
    forge_bundles,
    load_config,
    roc_curve,
    run_experiment,
    selftest,
)
from .reports import write_manifest, write_text


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", type=Path, default=d, help="experiment config (INI)")
    p.add_argument("--seed", type=int, default=d, help="override the experiment seed")
    p.add_argument("--out", type=Path, default=d, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="circuitfaith", description=__doc__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        _global_flags(p, suppress=True)
        return p

    p = command("forge", "build and verify the toy models and their ground truths")
    p.add_argument("--task", choices=sorted(TASKS) + ["all"], default="all")

    p = command("discover", "run a discovery algorithm and write its scores")
    p.add_argument("--task", choices=sorted(TASKS))
    p.add_argument("--algorithm", choices=("acdc", "sp", "hisp"))
    p.add_argument("--granularity", choices=("edge", "node"))

    p = command("evaluate", "faithfulness of a circuit under an ablation methodology")
    p.add_argument("--task", choices=sorted(TASKS))
    p.add_argument("--circuit", help="circuit CSV, or one of: empty, full, truth_resample, truth_zero")
    p.add_argument("--component", choices=("edge", "node", "branch"))
    p.add_argument("--value", choices=("zero", "gaussian_noise", "resample", "mean"))
    p.add_argument("--positions", choices=("all", "specific"))
    p.add_argument("--direction", choices=("ablate_clean", "restore_clean"))
    p.add_argument("--set", choices=("circuit", "complement"))
    p.add_argument("--metric", choices=("kl", "mse", "logit_diff", "correct_percent", "answer_probability"))

    p = command("roc", "ROC curve of a score file against a ground-truth circuit")
    p.add_argument("--task", choices=sorted(TASKS))
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--truth", required=True, help="circuit CSV, or truth_resample / truth_zero")

    p = command("bench", "wall-clock of patched runs across patch-set sizes")
    p.add_argument("--task", choices=sorted(TASKS))
    p.add_argument("--repeats", type=int)

    command("selftest", "quick invariant checks")
    command("run", "run the experiment described by --config")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = str(args.out)
    for key in ("task", "algorithm", "granularity", "metric"):
        v = getattr(args, key, None)
        if v is not None and v != "all":
            over[key] = v
    if getattr(args, "circuit", None):
        over["circuit"] = args.circuit
    if getattr(args, "repeats", None):
        over["timing_repeats"] = args.repeats
    cfg = replace(cfg, **over)
    ev = {k: getattr(args, a) for k, a in (("component", "component"), ("token_positions", "positions"),
                                           ("direction", "direction"), ("set", "set"))
          if getattr(args, a, None)}
    if ev or getattr(args, "value", None):
        spec = cfg.evaluation_spec
        if getattr(args, "value", None):
            spec = spec.replace(value=replace(spec.value, kind=args.value))
        cfg = replace(cfg, evaluation_spec=spec.replace(**ev))
    return cfg


def _read_scores(path: Path) -> ScoreMap:
    rows = list(csv.DictReader(path.read_text(encoding="utf-8").splitlines()))
    scores = {}
    for r in rows:
        if r["destination"]:
            scores[Edge(NodeId.parse(r["source"]), NodeId.parse(r["destination"]))] = float(r["score"])
        else:
            scores[NodeId.parse(r["source"])] = float(r["score"])
    gran = "edge" if all(isinstance(k, Edge) for k in scores) else "node"
    return ScoreMap(scores, path.stem, gran)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out)

    if args.command == "forge":
        tasks = sorted(TASKS) if args.task == "all" else [args.task]
        manifests = forge_bundles(tasks, out)
        for t, m in manifests.items():
            print(f"{t}: fingerprint {m['fingerprint']}")
        return 0

    if args.command == "selftest":
        results = selftest(cfg.seed)
        for name, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return 0 if all(ok for _, ok, _ in results) else 1

    if args.command == "run":
        if args.config is None:
            print("run needs --config", file=sys.stderr)
            return 2
        m = run_experiment(cfg, out)
        print(f"wrote {out} ({m['fingerprint'][:16]})")
        return 0 if m.get("status", "ok") == "ok" else 1

    bundle = forge(cfg.task)
    batch = gen_dataset(cfg.task, cfg.dataset_n, cfg.dataset_seed)

    if args.command == "discover":
        if cfg.algorithm == "none":
            print("discover needs an algorithm", file=sys.stderr)
            return 2
        found = discover(bundle.model, batch, cfg)
        files = [write_text(out / "scores.csv", found.scores.to_csv(bundle.model))]
        aucs = {}
        for kind in ("resample", "zero"):
            roc = roc_curve(found.sequence, bundle.circuit_for(kind), bundle.model.edges)
            files.append(write_text(out / f"roc_{kind}.csv", roc.to_csv()))
            aucs[kind] = roc.auc
            print(f"AUC vs {kind} truth: {roc.auc!r}")
        write_manifest(out / "manifest.json", {"kind": "discover", "config": cfg.to_dict(), "auc": aucs,
                                                   "roc_tie_rule": ROC_TIE_RULE}, files)
        return 0

    if args.command == "evaluate":
        circuit = _resolve_circuit(cfg.circuit if cfg.circuit != "discovered" else "truth_resample",
                                   bundle, bundle.model, None, 0.0)
        rep = evaluate_circuit(bundle.model, circuit, cfg.evaluation_spec, batch, cfg.eval_metric)
        files = [write_text(out / "circuit.csv", circuit_to_csv(circuit)),
                 write_text(out / "faithfulness.json", rep.to_json()),
                 write_text(out / "per_prompt.csv", rep.per_prompt_csv())]
        write_manifest(out / "manifest.json", {"kind": "evaluate", "config": cfg.to_dict(),
                                               "faithfulness": rep.value}, files)
        print(f"{rep.kind}: {rep.value!r}")
        return 0

    if args.command == "roc":
        scores = _read_scores(args.scores)
        seq = scores_to_circuit_sequence(scores, model=bundle.model)
        truth = _resolve_circuit(args.truth, bundle, bundle.model, None, 0.0)
        roc = roc_curve(seq, truth, bundle.model.edges)
        f = write_text(out / "roc.csv", roc.to_csv())
        write_manifest(out / "manifest.json", {"kind": "roc", "auc": roc.auc,
                                               "truth": roc.truth_fingerprint,
                                               "roc_tie_rule": ROC_TIE_RULE}, [f])
        print(f"AUC {roc.auc!r}")
        return 0

    if args.command == "bench":
        rows = bench_timing(bundle.model, batch, cfg.timing_sizes, cfg.timing_repeats, cfg.seed)
        text = "patched_edges,seconds\n" + "".join(f"{r['patched_edges']},{r['seconds']!r}\n" for r in rows)
        write_text(out / "timing.csv", text)
        secs = [r["seconds"] for r in rows]
        print(f"max/min wall-clock ratio {max(secs) / min(secs):.3f}")
        return 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
