"""Hand-built transformers that implement two RASP-lite programs exactly.

Each model is checked exhaustively against the interpreter before use, and its
ground-truth circuits are derived by search, one per ablation methodology.

Residual layouts (one-hot blocks, no BOS token, no causal mask):

* X-Proportion, d_model 11: token (4) | position (5) | is_x | frac_x.
  MLP0 writes ``is_x``; Attn1.0 attends uniformly over positions ``<= q`` and
  averages ``is_x`` into ``frac_x``, which the unembedding reads.
* Reverse, d_model 17: token (3) | position (5) | 1/length | opposite index (5)
  | output token (3). Attn0.0 attends uniformly and averages the position-0
  indicator into ``1/length``; MLP0 turns (position, 1/length) into a one-hot
  of ``length - position - 1`` with position-gated step units; Attn1.0 looks
  up the token at that index.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .ablation import AblationSpec, AblationValueSpec, build_donor_cache, run_ablated
from .data import PromptPairBatch
from .graph import (
    Circuit,
    Edge,
    ModelSpec,
    PatchableModel,
    circuit_from_csv,
    circuit_to_csv,
    head_level_csv,
    load_model,
    save_model,
)
from .metrics import divergence
from .rasp import RaspLiteProgram, make_reverse, make_x_proportion, rasp_eval
from .reports import write_manifest, write_text

HARDNESS = 100.0
SEQ_LEN = 5


class ForgeError(RuntimeError):
    pass


class GroundTruthError(ValueError):
    pass


@dataclass(frozen=True)
class Task:
    name: str
    program: RaspLiteProgram
    metric: str  # divergence used for faithfulness: "mse" or "kl"
    tol: float
    regression: bool


def _tasks() -> dict[str, Task]:
    return {
        "xproportion": Task("xproportion", make_x_proportion(), "mse", 1e-9, True),
        "reverse": Task("reverse", make_reverse(), "kl", 1e-6, False),
    }


TASKS = _tasks()


def get_task(name: str) -> Task:
    try:
        return TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; expected one of {sorted(TASKS)}") from None


RESAMPLE_SPEC = AblationSpec(component="edge", value=AblationValueSpec("resample"), set="complement")
ZERO_SPEC = AblationSpec(component="edge", value=AblationValueSpec("zero"), set="complement")


@dataclass(frozen=True)
class GroundTruthBundle:
    task: str
    model: PatchableModel
    zero_ablation_circuit: Circuit
    resample_ablation_circuit: Circuit
    oracle: RaspLiteProgram
    derivation_n: int = 1000
    derivation_seed: int = 0

    def circuit_for(self, kind: str) -> Circuit:
        if kind == "zero":
            return self.zero_ablation_circuit
        if kind == "resample":
            return self.resample_ablation_circuit
        raise ValueError(f"no ground truth for ablation value {kind!r}")


# ------------------------------------------------------------------ weights


def xproportion_spec(hardness: float = HARDNESS) -> ModelSpec:
    vocab = ["w", "x", "y", "z"]
    D, dh, T = 11, 5, SEQ_LEN
    POS, IS_X, FRAC = 4, 9, 10
    z = lambda *s: np.zeros(s)
    W = {"W_E": z(4, D), "W_pos": z(T, D), "W_U": z(D, 1)}
    W["W_E"][np.arange(4), np.arange(4)] = 1.0
    W["W_pos"][np.arange(T), POS + np.arange(T)] = 1.0
    for l in range(2):
        for m in ("W_Q", "W_K", "W_V"):
            W[f"A{l}.0.{m}"] = z(D, dh)
        W[f"A{l}.0.W_O"] = z(dh, D)
        W[f"M{l}.W_in"] = z(D, 1)
        W[f"M{l}.W_out"] = z(1, D)
    W["M0.W_in"][vocab.index("x"), 0] = 1.0
    W["M0.W_out"][0, IS_X] = 1.0
    # query q scores key k at 0 when k <= q and -hardness otherwise
    W["A1.0.W_Q"][POS + np.arange(T), np.arange(T)] = math.sqrt(dh)
    for k in range(T):
        for j in range(T):
            W["A1.0.W_K"][POS + k, j] = 0.0 if k <= j else -hardness
    W["A1.0.W_V"][IS_X, 0] = 1.0
    W["A1.0.W_O"][0, FRAC] = 1.0
    W["W_U"][FRAC, 0] = 1.0
    return ModelSpec(2, 1, D, dh, 1, vocab, T, weights=W)


def reverse_spec(hardness: float = HARDNESS, logit_scale: float = 10.0) -> ModelSpec:
    vocab = ["0", "1", "2"]
    D, dh, T = 17, 5, SEQ_LEN
    POS, INV_LEN, OPP, OUT = 3, 8, 9, 14
    slope, gate = 100.0, 200.0
    d_mlp = 2 * T * T
    z = lambda *s: np.zeros(s)
    W = {"W_E": z(3, D), "W_pos": z(T, D), "W_U": z(D, 3)}
    W["W_E"][np.arange(3), np.arange(3)] = 1.0
    W["W_pos"][np.arange(T), POS + np.arange(T)] = 1.0
    for l in range(2):
        for m in ("W_Q", "W_K", "W_V"):
            W[f"A{l}.0.{m}"] = z(D, dh)
        W[f"A{l}.0.W_O"] = z(dh, D)
        W[f"M{l}.W_in"] = z(D, d_mlp)
        W[f"M{l}.W_out"] = z(d_mlp, D)
    W["M0.b_in"] = z(d_mlp)
    # uniform attention averages the position-0 indicator: 1/length
    W["A0.0.W_V"][POS, 0] = 1.0
    W["A0.0.W_O"][0, INV_LEN] = 1.0
    # unit pair (i, n) computes [position == i and length <= n] as a difference of ramps
    for i in range(T):
        for n in range(1, T + 1):
            u = 2 * (i * T + n - 1)
            thresh = (1.0 / n + 1.0 / (n + 1)) / 2.0
            for v, extra in ((u, 0.0), (u + 1, 1.0)):
                W["M0.W_in"][INV_LEN, v] = slope
                W["M0.W_in"][POS + i, v] = gate
                W["M0.b_in"][v] = -(slope * thresh + gate) - extra
            # [length == n] = [length <= n] - [length <= n - 1], so step (i, n)
            # adds to opp index n-1-i and subtracts from n-i
            for j, sign in ((n - 1 - i, 1.0), (n - i, -1.0)):
                if 0 <= j < T and (sign > 0 or n + 1 <= T):
                    W["M0.W_out"][u, OPP + j] += sign
                    W["M0.W_out"][u + 1, OPP + j] -= sign
    W["A1.0.W_Q"][OPP + np.arange(T), np.arange(T)] = hardness * math.sqrt(dh)
    W["A1.0.W_K"][POS + np.arange(T), np.arange(T)] = 1.0
    W["A1.0.W_V"][np.arange(3), np.arange(3)] = 1.0
    W["A1.0.W_O"][np.arange(3), OUT + np.arange(3)] = 1.0
    W["W_U"][OUT + np.arange(3), np.arange(3)] = logit_scale
    return ModelSpec(2, 1, D, dh, d_mlp, vocab, T, weights=W)


# ------------------------------------------------------------------ oracle checks


def _oracle_numeric(task: Task, seq: tuple[str, ...]) -> list:
    out = rasp_eval(task.program, seq)
    if task.regression:
        return [float(Fraction(v)) for v in out]
    return list(out)


def all_sequences(alphabet, max_len: int = SEQ_LEN):
    for n in range(1, max_len + 1):
        yield n, [tuple(s) for s in itertools.product(alphabet, repeat=n)]


def self_check(task: Task, model: PatchableModel, max_len: int = SEQ_LEN) -> float:
    """Compare the model with the interpreter on every sequence up to ``max_len``.

    Returns the worst absolute error (regression) or 0.0 (classification, which
    must decode exactly). Raises ForgeError on any disagreement.
    """
    vocab = model.spec.vocab
    worst = 0.0
    for n, seqs in all_sequences(task.program.alphabet, max_len):
        ids = np.array([model.spec.token_ids(s) for s in seqs])
        out = model.run(ids)[0].data
        for s, row in zip(seqs, out):
            want = _oracle_numeric(task, s)
            if task.regression:
                err = float(np.abs(row[:, 0] - np.array(want)).max())
                worst = max(worst, err)
                if err >= 1e-6:
                    raise ForgeError(f"{task.name}: {','.join(s)} gives {row[:, 0]}, oracle {want}")
            else:
                got = [vocab[i] for i in row.argmax(axis=-1)]
                if got != want:
                    raise ForgeError(f"{task.name}: {','.join(s)} decodes to {got}, oracle {want}")
    return worst


def decode(model: PatchableModel, text: str) -> list:
    """Model output on a comma-separated prompt: values for regression, tokens otherwise."""
    toks = [t.strip() for t in text.split(",")]
    out = model.run(np.array([model.spec.token_ids(toks)]))[0].data[0]
    if out.shape[-1] == 1:
        return [float(v) for v in out[:, 0]]
    return [model.spec.vocab[i] for i in out.argmax(axis=-1)]


# ------------------------------------------------------------------ datasets


def gen_dataset(task: str, n: int, seed: int, length: int = SEQ_LEN) -> PromptPairBatch:
    """Clean and corrupt prompts drawn independently and uniformly, with oracle answers."""
    if n <= 0:
        raise ValueError("dataset size must be positive")
    t = get_task(task)
    alphabet = t.program.alphabet
    rng = np.random.default_rng(seed)
    clean = rng.integers(0, len(alphabet), size=(n, length))
    corrupt = rng.integers(0, len(alphabet), size=(n, length))

    @functools.lru_cache(maxsize=None)
    def answer(row: tuple[int, ...]):
        out = _oracle_numeric(t, tuple(alphabet[i] for i in row))
        return out if t.regression else [alphabet.index(v) for v in out]

    dtype = np.float64 if t.regression else np.int64
    ca = np.array([answer(tuple(r)) for r in clean.tolist()], dtype=dtype)
    ka = np.array([answer(tuple(r)) for r in corrupt.tolist()], dtype=dtype)
    return PromptPairBatch(task, clean, corrupt, ca, ka, regression=t.regression)


# ------------------------------------------------------------------ ground truth


def reverse_topological(model: PatchableModel) -> list[Edge]:
    """Edges by destination, latest first, then by source index."""
    return sorted(model.edges, key=lambda e: (-model.topo_index[e.dst], model.src_index[e.src]))


def derive_ground_truth(model: PatchableModel, spec: AblationSpec, batch: PromptPairBatch,
                        tol: float, metric: str = "mse") -> Circuit:
    """Minimal edge set whose complement can be ablated under ``spec`` within ``tol``.

    Greedy backward elimination in reverse topological order, then repeated
    single-edge removal until no edge can be dropped.
    """
    spec = spec.replace(component="edge", set="complement")
    full = model.run(batch.clean)[0].data
    donors = build_donor_cache(model, spec.value, batch, spec.direction)

    def faithful(kept: set[Edge]) -> bool:
        out = run_ablated(model, Circuit.of_edges(kept), spec, batch, donors)
        return bool(divergence(metric, full, out).max() < tol)

    kept = set(model.edges)
    if not faithful(kept):
        raise GroundTruthError(f"even the full edge set misses tolerance {tol} under {spec.value.kind}")
    for e in reverse_topological(model):
        if faithful(kept - {e}):
            kept.discard(e)
    changed = True
    while changed:
        changed = False
        for e in reverse_topological(model):
            if e in kept and faithful(kept - {e}):
                kept.discard(e)
                changed = True
    return Circuit.of_edges(kept)


@functools.lru_cache(maxsize=None)
def _forge(task: str, hardness: float, n: int, seed: int) -> GroundTruthBundle:
    t = get_task(task)
    spec = xproportion_spec(hardness) if task == "xproportion" else reverse_spec(hardness)
    model = PatchableModel(spec)
    self_check(t, model)
    batch = gen_dataset(task, n, seed)
    zero = derive_ground_truth(model, ZERO_SPEC, batch, t.tol, t.metric)
    resample = derive_ground_truth(model, RESAMPLE_SPEC, batch, t.tol, t.metric)
    return GroundTruthBundle(task, model, zero, resample, t.program, n, seed)


def forge_xproportion(hardness: float = HARDNESS, n: int = 1000, seed: int = 0) -> GroundTruthBundle:
    return _forge("xproportion", float(hardness), n, seed)


def forge_reverse(hardness: float = HARDNESS, n: int = 1000, seed: int = 0) -> GroundTruthBundle:
    return _forge("reverse", float(hardness), n, seed)


def forge(task: str, **kw) -> GroundTruthBundle:
    get_task(task)
    return forge_xproportion(**kw) if task == "xproportion" else forge_reverse(**kw)


# ------------------------------------------------------------------ bundle files


def save_bundle(bundle: GroundTruthBundle, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "model.json"]
    save_model(bundle.model, files[0])
    for kind in ("zero", "resample"):
        c = bundle.circuit_for(kind)
        files.append(write_text(out / f"{kind}_circuit.csv", circuit_to_csv(c)))
        files.append(write_text(out / f"{kind}_circuit_heads.csv", head_level_csv(c)))
    t = get_task(bundle.task)
    payload = {
        "kind": "ground_truth_bundle",
        "task": bundle.task,
        "metric": t.metric,
        "tolerance": t.tol,
        "derivation": {"n": bundle.derivation_n, "seed": bundle.derivation_seed},
        "specs": {"zero": ZERO_SPEC.to_dict(), "resample": RESAMPLE_SPEC.to_dict()},
    }
    return write_manifest(out / "manifest.json", payload, files)


def load_bundle(out_dir: str | Path, task: str) -> GroundTruthBundle:
    out = Path(out_dir)
    model = load_model(out / "model.json")
    read = lambda k: circuit_from_csv((out / f"{k}_circuit.csv").read_text(encoding="utf-8"))
    return GroundTruthBundle(task, model, read("zero"), read("resample"), get_task(task).program)
