"""Config-driven experiments: discovery, ROC against ground truth, faithfulness grids, timing."""

from __future__ import annotations

import configparser
import csv
import gc
import io
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .ablation import AblationSpec, AblationValueSpec, build_donor_cache, run_ablated
from .discovery import (
    DEFAULT_ACDC_THRESHOLDS,
    CircuitSequence,
    ScoreMap,
    acdc_sweep,
    hisp,
    scores_to_circuit_sequence,
    subnetwork_probing,
)
from .forge import RESAMPLE_SPEC, ZERO_SPEC, forge, gen_dataset, get_task, save_bundle
from .graph import Circuit, Edge, PatchableModel, circuit_from_csv, circuit_to_csv, load_model
from .metrics import AnswerSpec, FaithfulnessReport, faithfulness
from .reports import fingerprint, write_manifest, write_text

ALGORITHMS = ("acdc", "sp", "hisp", "none")
KINDS = ("single", "recovery", "sensitivity", "timing")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


@dataclass
class ExperimentConfig:
    task: str = "xproportion"
    model: str = "forged"
    algorithm: str = "acdc"
    granularity: str = "edge"
    kind: str = "single"
    metric: str = ""  # evaluation metric; empty means the task's divergence
    seed: int = 0
    dataset_n: int = 100
    dataset_seed: int = 1
    thresholds: tuple[float, ...] = DEFAULT_ACDC_THRESHOLDS
    sp_lambda: float = 0.01
    sp_steps: int = 1000
    sp_lr: float = 0.1
    discovery_spec: AblationSpec = RESAMPLE_SPEC
    evaluation_spec: AblationSpec = RESAMPLE_SPEC
    circuit: str = "discovered"
    eval_threshold: float = 1e-12
    timing_sizes: tuple[int, ...] = (1, 5, 11, 22)
    timing_repeats: int = 20
    out: str = "out"

    def __post_init__(self):
        get_task(self.task)
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.granularity not in ("edge", "node"):
            raise ConfigError(f"granularity must be edge or node, got {self.granularity!r}")
        if self.dataset_n <= 0:
            raise ConfigError("dataset size must be positive")

    @property
    def eval_metric(self) -> str:
        return self.metric or get_task(self.task).metric

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["thresholds"] = [repr(float(t)) for t in self.thresholds]
        d["timing_sizes"] = list(self.timing_sizes)
        d["discovery_spec"] = self.discovery_spec.to_dict()
        d["evaluation_spec"] = self.evaluation_spec.to_dict()
        return d


_SECTIONS = {
    "experiment": {"task": str, "model": str, "algorithm": str, "granularity": str, "kind": str,
                   "metric": str, "seed": int, "out": str},
    "dataset": {"n": int, "seed": int},
    "discovery": {"thresholds": str, "lambda": float, "steps": int, "lr": float},
    "evaluation": {"circuit": str, "threshold": float},
    "timing": {"sizes": str, "repeats": int},
}
_ABLATION_KEYS = {"component": str, "value": str, "sigma": float, "value_seed": int,
                  "mean_source": str, "per_position": bool, "token_positions": str,
                  "direction": str, "set": str}
_RENAME = {("dataset", "n"): "dataset_n", ("dataset", "seed"): "dataset_seed",
           ("discovery", "lambda"): "sp_lambda", ("discovery", "steps"): "sp_steps",
           ("discovery", "lr"): "sp_lr", ("evaluation", "threshold"): "eval_threshold",
           ("timing", "repeats"): "timing_repeats"}


def _convert(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        return kind(raw.strip())
    except (KeyError, ValueError):
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}") from None


def _ablation_spec(section: str, items: dict[str, str], base: AblationSpec) -> AblationSpec:
    vals = {}
    for key, raw in items.items():
        if key not in _ABLATION_KEYS:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        vals[key] = _convert(section, key, raw, _ABLATION_KEYS[key])
    value = base.value
    vkw = {}
    for src, dst in (("value", "kind"), ("sigma", "sigma"), ("value_seed", "seed"),
                     ("mean_source", "mean_source"), ("per_position", "per_position")):
        if src in vals:
            vkw[dst] = vals.pop(src)
    if vkw:
        value = replace(value, **vkw)
    return base.replace(value=value, **vals)


def parse_config(text: str) -> ExperimentConfig:
    """Read an INI document with dotted section names; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    kw: dict = {}
    for section in cp.sections():
        items = dict(cp.items(section))
        if section in ("discovery.ablation", "evaluation.ablation"):
            field_name = section.split(".")[0] + "_spec"
            kw[field_name] = _ablation_spec(section, items, RESAMPLE_SPEC)
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        allowed = _SECTIONS[section]
        for key, raw in items.items():
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            name = _RENAME.get((section, key), key)
            if (section, key) == ("discovery", "thresholds"):
                kw["thresholds"] = tuple(float(x) for x in raw.split(","))
            elif (section, key) == ("timing", "sizes"):
                kw["timing_sizes"] = tuple(int(x) for x in raw.split(","))
            else:
                kw[name] = _convert(section, key, raw, allowed[key])
    try:
        return ExperimentConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ------------------------------------------------------------------ ROC


@dataclass(frozen=True)
class RocCurve:
    points: tuple[tuple[float, float, float], ...]  # (threshold, fpr, tpr), fpr nondecreasing
    auc: float
    truth_fingerprint: str

    def to_csv(self) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in self.points:
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
        return buf.getvalue()


ROC_TIE_RULE = "pessimistic: edges entering together count non-truth before truth"


def circuit_fingerprint(c: Circuit) -> str:
    return fingerprint(circuit_to_csv(c))[:16]


def roc_curve(seq: CircuitSequence, truth: Circuit, universe: Sequence[Edge]) -> RocCurve:
    """Pessimistic ROC: when several edges enter together, non-truth ones count first."""
    universe = set(universe)
    t = truth.untimed().members
    if not t:
        raise ValueError("ground truth circuit is empty")
    if not t <= universe:
        raise ValueError("ground truth has edges outside the universe")
    neg = len(universe - t)
    rate = lambda c: (len(c - t) / neg if neg else 0.0, len(c & t) / len(t))
    steps = sorted(((th, c.untimed().members) for th, c in seq), key=lambda s: -s[0])
    for _, c in steps:
        if not c <= universe:
            raise ValueError("circuit has edges outside the universe")
    pts = [(math.inf, 0.0, 0.0)]
    prev = None
    for th, c in steps:
        if prev is not None:
            fpr, _ = rate(prev | (c - t))
            _, tpr = rate(prev)
            pts.append((th, fpr, tpr))
        pts.append((th, *rate(c)))
        prev = c
    pts.append((-math.inf, 1.0, 1.0))
    auc = sum((b[1] - a[1]) * (a[2] + b[2]) / 2.0 for a, b in zip(pts, pts[1:]))
    return RocCurve(tuple(pts), float(auc), circuit_fingerprint(truth))


# ------------------------------------------------------------------ runs


@dataclass
class Discovery:
    sequence: CircuitSequence
    scores: ScoreMap


def _acdc_scores(model: PatchableModel, seq: CircuitSequence) -> ScoreMap:
    """Largest swept threshold at which each edge survives."""
    best = {e: 0.0 for e in model.edges}
    for th, c in seq:
        for e in c.members:
            best[e] = max(best[e], th)
    return ScoreMap(best, seq.algorithm)


def discover(model: PatchableModel, batch, cfg: ExperimentConfig, algorithm: str | None = None) -> Discovery:
    algorithm = algorithm or cfg.algorithm
    metric = get_task(cfg.task).metric
    spec = cfg.discovery_spec
    if algorithm == "acdc":
        seq = acdc_sweep(model, batch, metric, spec, cfg.thresholds, cfg.granularity)
        return Discovery(seq, _acdc_scores(model, seq))
    if algorithm == "sp":
        scores = subnetwork_probing(model, batch, spec, lam=cfg.sp_lambda, steps=cfg.sp_steps,
                                    seed=cfg.seed, lr=cfg.sp_lr, metric=metric, granularity=cfg.granularity)
    elif algorithm == "hisp":
        scores = hisp(model, batch, spec, metric=metric, granularity=cfg.granularity)
    else:
        raise ConfigError(f"no discovery for algorithm {algorithm!r}")
    return Discovery(scores_to_circuit_sequence(scores, model=model), scores)


def evaluate_circuit(model: PatchableModel, circuit: Circuit, spec: AblationSpec, batch, metric: str
                     ) -> FaithfulnessReport:
    full = model.run(batch.clean)[0].data
    out = run_ablated(model, circuit, spec, batch)
    answers = None if batch.regression else AnswerSpec.from_batch(batch)
    return faithfulness(metric, full, out, answers, spec.fingerprint())


def _resolve_circuit(name: str, bundle, model: PatchableModel, found: Discovery | None,
                     threshold: float) -> Circuit:
    if name == "empty":
        return Circuit.of_edges(())
    if name == "full":
        return Circuit.of_edges(model.edges)
    if name in ("truth_resample", "truth_zero"):
        if bundle is None:
            raise ConfigError(f"circuit {name} needs a forged model")
        return bundle.circuit_for(name.split("_")[1])
    if name == "discovered":
        if found is None:
            raise ConfigError("circuit = discovered needs a discovery algorithm")
        for th, c in found.sequence:
            if th >= threshold:
                return c
        return found.sequence.circuits[-1]
    return circuit_from_csv(Path(name).read_text(encoding="utf-8"))


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> dict:
    """Run ``cfg`` and write its report files; returns the manifest."""
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.kind == "recovery":
        return _run_recovery(cfg, out)
    if cfg.kind == "sensitivity":
        return _run_sensitivity(cfg, out)
    if cfg.kind == "timing":
        return _run_timing(cfg, out)

    files: list[Path] = []
    payload = {"kind": "experiment", "config": cfg.to_dict(), "status": "ok", "failed_stage": None}
    stage = "load"
    try:
        bundle = forge(cfg.task) if cfg.model == "forged" else None
        model = bundle.model if bundle else load_model(cfg.model)
        batch = gen_dataset(cfg.task, cfg.dataset_n, cfg.dataset_seed)
        found = None
        if cfg.algorithm != "none":
            stage = "discover"
            found = discover(model, batch, cfg)
            files.append(write_text(out / "scores.csv", found.scores.to_csv(model)))
            if bundle is not None:
                stage = "roc"
                aucs = {}
                for kind in ("resample", "zero"):
                    roc = roc_curve(found.sequence, bundle.circuit_for(kind), model.edges)
                    files.append(write_text(out / f"roc_{kind}.csv", roc.to_csv()))
                    aucs[kind] = roc.auc
                payload["auc"] = aucs
                payload["roc_tie_rule"] = ROC_TIE_RULE
        stage = "evaluate"
        circuit = _resolve_circuit(cfg.circuit, bundle, model, found, cfg.eval_threshold)
        files.append(write_text(out / "circuit.csv", circuit_to_csv(circuit)))
        report = evaluate_circuit(model, circuit, cfg.evaluation_spec, batch, cfg.eval_metric)
        files.append(write_text(out / "faithfulness.json", report.to_json()))
        files.append(write_text(out / "per_prompt.csv", report.per_prompt_csv()))
        payload["faithfulness"] = report.value
    except Exception as exc:
        payload["status"] = "failed"
        payload["failed_stage"] = stage
        payload["error"] = f"{type(exc).__name__}: {exc}"
        write_manifest(out / "manifest.json", payload, files)
        raise
    return write_manifest(out / "manifest.json", payload, files)


# ------------------------------------------------------------------ grids


RECOVERY_TASKS = ("xproportion", "reverse")
RECOVERY_ALGORITHMS = ("acdc", "sp", "hisp")


def recovery_grid(cfg: ExperimentConfig) -> list[dict]:
    """AUC of every edge-level discoverer on both tasks against both ground truths."""
    rows = []
    for task in RECOVERY_TASKS:
        tcfg = replace(cfg, task=task, granularity="edge")
        bundle = forge(task)
        batch = gen_dataset(task, cfg.dataset_n, cfg.dataset_seed)
        for alg in RECOVERY_ALGORITHMS:
            found = discover(bundle.model, batch, tcfg, alg)
            for truth in ("resample", "zero"):
                roc = roc_curve(found.sequence, bundle.circuit_for(truth), bundle.model.edges)
                rows.append({"task": task, "algorithm": alg, "truth": truth, "auc": roc.auc})
    return rows


def _rows_csv(rows: list[dict], cols: Sequence[str]) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    return buf.getvalue()


def _run_recovery(cfg: ExperimentConfig, out: Path) -> dict:
    rows = recovery_grid(cfg)
    f = write_text(out / "recovery_auc.csv", _rows_csv(rows, ["task", "algorithm", "truth", "auc"]))
    return write_manifest(out / "manifest.json", {"kind": "recovery", "config": cfg.to_dict(), "status": "ok",
                                                          "roc_tie_rule": ROC_TIE_RULE}, [f])


def sensitivity_circuit(model: PatchableModel, bundle) -> Circuit:
    """Resample ground truth restricted to every position but the last."""
    T = model.spec.max_seq_len
    return Circuit.of_edges(e.at(p) for e in bundle.resample_ablation_circuit.members for p in range(T - 1))


def sensitivity_grid(model: PatchableModel, circuit: Circuit, batch, metric: str = "mse") -> list[dict]:
    """Faithfulness of one circuit under {edge, node} × {mean, resample} × {all, specific}."""
    rows = []
    for component in ("edge", "node"):
        for value in ("mean", "resample"):
            for positions in ("all", "specific"):
                spec = AblationSpec(component=component, value=AblationValueSpec(value),
                                    token_positions=positions, set="complement")
                rep = evaluate_circuit(model, circuit, spec, batch, metric)
                rows.append({"component": component, "value": value, "positions": positions,
                             "faithfulness": rep.value})
    return rows


def _run_sensitivity(cfg: ExperimentConfig, out: Path) -> dict:
    bundle = forge(cfg.task)
    batch = gen_dataset(cfg.task, cfg.dataset_n, cfg.dataset_seed)
    circuit = (sensitivity_circuit(bundle.model, bundle) if cfg.circuit == "discovered"
               else _resolve_circuit(cfg.circuit, bundle, bundle.model, None, 0.0))
    rows = sensitivity_grid(bundle.model, circuit, batch, cfg.eval_metric)
    files = [write_text(out / "circuit.csv", circuit_to_csv(circuit)),
             write_text(out / "sensitivity.csv",
                        _rows_csv(rows, ["component", "value", "positions", "faithfulness"]))]
    return write_manifest(out / "manifest.json", {"kind": "sensitivity", "config": cfg.to_dict(),
                                                  "status": "ok"}, files)


# ------------------------------------------------------------------ timing


def bench_timing(model: PatchableModel, batch, sizes: Sequence[int], repeats: int = 20,
                 seed: int = 0, calls: int = 5) -> list[dict]:
    """Wall-clock of ``run_ablated`` patching ``k`` random edges, best of ``repeats``."""
    rng = np.random.default_rng(seed)
    spec = AblationSpec(component="edge", value=AblationValueSpec("resample"), set="circuit")
    donors = build_donor_cache(model, spec.value, batch, spec.direction)
    circuits = {k: Circuit.of_edges(model.edges[i] for i in rng.choice(model.n_edges, k, replace=False))
                for k in sizes}
    best = {k: math.inf for k in sizes}
    gc.collect()
    was_enabled = gc.isenabled()
    gc.disable()  # as timeit does: collector pauses are noise here
    try:
        for _ in range(repeats):
            for k in sizes:  # interleaved so drift hits every size alike
                t0 = time.perf_counter()
                for _ in range(calls):
                    run_ablated(model, circuits[k], spec, batch, donors)
                best[k] = min(best[k], (time.perf_counter() - t0) / calls)
    finally:
        if was_enabled:
            gc.enable()
    return [{"patched_edges": k, "seconds": best[k]} for k in sizes]


def _run_timing(cfg: ExperimentConfig, out: Path) -> dict:
    bundle = forge(cfg.task)
    batch = gen_dataset(cfg.task, cfg.dataset_n, cfg.dataset_seed)
    rows = bench_timing(bundle.model, batch, cfg.timing_sizes, cfg.timing_repeats, cfg.seed)
    secs = [r["seconds"] for r in rows]
    f = write_text(out / "timing.csv", _rows_csv(rows, ["patched_edges", "seconds"]))
    payload = {"kind": "timing", "config": cfg.to_dict(), "status": "ok",
               "max_over_min": max(secs) / min(secs)}
    return write_manifest(out / "manifest.json", payload, [f])


# ------------------------------------------------------------------ forge / selftest


def forge_bundles(tasks: Sequence[str], out: Path) -> dict:
    return {t: save_bundle(forge(t), out / t) for t in tasks}


def selftest(seed: int = 0) -> list[tuple[str, bool, str]]:
    """Quick invariant checks; each entry is (name, passed, detail)."""
    from .ablation import patch_mask, run_naive, run_patched
    from .autodiff import check_gradients, kl_div, Tensor
    from .graph import random_spec

    results = []

    def check(name, fn):
        try:
            ok, detail = fn()
        except Exception as exc:  # reported, not raised: selftest summarises everything
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))

    def forged():
        for t in RECOVERY_TASKS:
            forge(t)
        return True, "both toy models match their programs exhaustively"

    def fast_path():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(5):
            model = PatchableModel(random_spec(rng, biases=True))
            toks = rng.integers(0, 4, size=(3, 5))
            batch = _random_batch(toks, rng.integers(0, 4, size=(3, 5)))
            donors = build_donor_cache(model, AblationValueSpec("resample"), batch)
            mask = rng.random((model.n_edges, 5)) < 0.5
            worst = max(worst, float(np.abs(run_patched(model, toks, mask, donors)
                                            - run_naive(model, toks, mask, donors)).max()))
        return worst < 1e-9, f"max deviation {worst:.3g}"

    def grads():
        rng = np.random.default_rng(seed)
        q = rng.normal(size=(3, 4))
        res = check_gradients(lambda x: kl_div(Tensor(q), x), rng.normal(size=(3, 4)))
        return res.max_rel_error < 1e-4, f"max relative error {res.max_rel_error:.3g}"

    def roc_trivial():
        model = forge("xproportion").model
        seq = CircuitSequence(((0.0, Circuit.of_edges(model.edges)),))
        auc = roc_curve(seq, forge("xproportion").resample_ablation_circuit, model.edges).auc
        return auc == 0.5, f"auc {auc}"

    check("forge", forged)
    check("fast_path", fast_path)
    check("gradients", grads)
    check("roc_trivial", roc_trivial)
    return results


def _random_batch(clean, corrupt):
    from .data import PromptPairBatch

    return PromptPairBatch("random", clean, corrupt)
