import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from circuitfaith.graph import (
    INPUT,
    OUTPUT_IN,
    Circuit,
    Edge,
    GraphError,
    ModelSpec,
    NodeId,
    NodeSite,
    PatchableModel,
    PathBoundExceeded,
    circuit_from_csv,
    circuit_to_csv,
    count_paths,
    enumerate_edges,
    enumerate_paths,
    forward,
    forward_residual,
    load_model,
    random_spec,
    save_model,
    spec_from_json,
    spec_to_json,
)

from conftest import random_model


def brute_force_edges(n_layers, n_heads, has_mlp):
    """Computation order written out longhand: heads read, heads write, MLP reads, MLP writes."""
    steps = [("write", "Input")]
    for l in range(n_layers):
        steps += [("read", f"A{l}.{h}.{c}") for h in range(n_heads) for c in "QKV"]
        steps += [("write", f"A{l}.{h}") for h in range(n_heads)]
        if has_mlp:
            steps += [("read", f"MlpIn{l}"), ("write", f"M{l}")]
    steps.append(("read", "OutputIn"))
    edges, written = [], []
    for kind, name in steps:
        if kind == "write":
            written.append(name)
        else:
            edges += [f"{s}->{name}" for s in written]
    return edges


def test_two_layer_one_head_nodes():
    m = random_model(0)
    assert [s.name for s in m.sources] == ["Input", "A0.0", "M0", "A1.0", "M1"]
    assert [d.name for d in m.destinations] == [
        "A0.0.Q", "A0.0.K", "A0.0.V", "MlpIn0", "A1.0.Q", "A1.0.K", "A1.0.V", "MlpIn1", "OutputIn"]


def test_two_layer_one_head_has_23_edges():
    m = random_model(0)
    assert len(enumerate_edges(m)) == 3 + 2 + 9 + 4 + 5 == 23
    assert [e.name for e in m.edges] == brute_force_edges(2, 1, True)


def test_one_layer_two_heads_no_mlp_edge_list():
    m = random_model(0, n_layers=1, n_heads=2, d_mlp=0)
    names = [e.name for e in m.edges]
    assert names == brute_force_edges(1, 2, False)
    assert names == ["Input->A0.0.Q", "Input->A0.0.K", "Input->A0.0.V",
                     "Input->A0.1.Q", "Input->A0.1.K", "Input->A0.1.V",
                     "Input->OutputIn", "A0.0->OutputIn", "A0.1->OutputIn"]


def test_zero_layer_model():
    m = random_model(0, n_layers=0)
    assert [e.name for e in m.edges] == ["Input->OutputIn"]
    assert count_paths(m) == 1
    assert len(enumerate_paths(m)) == 1


@pytest.mark.parametrize("layers,heads,mlp", [(1, 1, True), (2, 2, True), (3, 1, False), (2, 3, False)])
def test_edge_enumeration_matches_brute_force(layers, heads, mlp):
    m = random_model(1, n_layers=layers, n_heads=heads, d_mlp=4 if mlp else 0)
    assert [e.name for e in m.edges] == brute_force_edges(layers, heads, mlp)
    assert len(m.edges) == sum(len(m.prior[d]) for d in m.destinations)


def test_edges_go_forward_in_topological_order():
    m = random_model(2, n_layers=3, n_heads=2)
    for e in m.edges:
        assert m.topo_index[e.src] < m.topo_index[e.dst]
    keys = [(m.dst_index[e.dst], m.src_index[e.src]) for e in m.edges]
    assert keys == sorted(keys)


def _dfs_paths(m):
    """Independent path enumeration by plain recursion over source nodes."""
    def to_channel(ch):
        total = 0
        for s in m.prior[ch]:
            total += 1 if s == INPUT else to_source(s)
        return total

    def to_source(s):
        if s.kind == "attn":
            return sum(to_channel(NodeId(c, s.layer, s.head)) for c in "qkv")
        return to_channel(NodeId("mlp_in", s.layer))

    return to_channel(OUTPUT_IN)


@pytest.mark.parametrize("layers,heads", [(1, 1), (2, 1), (2, 2), (3, 1)])
def test_path_count_dp_matches_dfs(layers, heads):
    m = random_model(0, n_layers=layers, n_heads=heads)
    assert count_paths(m) == _dfs_paths(m) == len(enumerate_paths(m))


def test_paths_start_at_input_and_end_at_output():
    m = random_model(0)
    for p in enumerate_paths(m):
        assert p[0].src == INPUT and p[-1].dst == OUTPUT_IN
        for a, b in zip(p, p[1:]):
            assert b.src == a.dst.head_node


def test_removing_an_edge_lowers_path_count():
    m = random_model(0)
    total = count_paths(m)
    for e in m.edges:
        rest = [f for f in m.edges if f != e]
        assert count_paths(m, rest) < total


def test_path_bound():
    m = random_model(0, n_layers=3, n_heads=2)
    with pytest.raises(PathBoundExceeded) as exc:
        enumerate_paths(m, bound=10)
    assert exc.value.count == count_paths(m)


@pytest.mark.parametrize("seed", range(200))
def test_factorized_equals_residual(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, n_layers=int(rng.integers(0, 4)), n_heads=int(rng.integers(1, 3)),
                       d_mlp=int(rng.choice([0, 4])), biases=bool(seed % 2),
                       )
    if seed % 3 == 0:
        spec.mlp_act = "gelu"
    m = PatchableModel(spec)
    toks = rng.integers(0, 4, size=(2, int(rng.integers(1, 6))))
    np.testing.assert_allclose(forward(m, toks).output, forward_residual(m, toks), atol=1e-9, rtol=0)


def test_destination_inputs_are_sums_of_source_outputs():
    m = random_model(5, n_heads=2, biases=True)
    toks = np.array([[0, 1, 2, 3, 1]])
    out = forward(m, toks)
    for d in m.destinations:
        total = sum(out.src_out[s] for s in m.prior[d])
        np.testing.assert_allclose(out.dst_in[d], total, atol=1e-9)


def test_forward_rejects_unknown_tokens_and_long_input():
    m = random_model(0)
    with pytest.raises(GraphError, match="unknown token id 7"):
        forward(m, [0, 7])
    with pytest.raises(GraphError):
        forward(m, [0] * 6)


def test_malformed_weight_is_named():
    spec = random_spec(np.random.default_rng(0))
    spec.weights["A1.0.W_K"] = np.zeros((2, 2))
    with pytest.raises(GraphError, match="A1.0.W_K"):
        PatchableModel(spec)
    spec = random_spec(np.random.default_rng(0))
    del spec.weights["M0.W_in"]
    with pytest.raises(GraphError, match="M0.W_in"):
        PatchableModel(spec)


def test_weight_file_round_trip(tmp_path):
    spec = random_spec(np.random.default_rng(4), biases=True)
    m = PatchableModel(spec)
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    for k, w in spec.weights.items():
        assert np.array_equal(back.w(k), w)
    assert spec_to_json(back.spec) == spec_to_json(spec)
    raw = (tmp_path / "m.json").read_bytes()
    assert b"\r\n" not in raw
    assert spec_from_json(raw.decode()).vocab == spec.vocab


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(random_model(0).edges), st.one_of(st.none(), st.integers(0, 4)))
def test_edge_names_round_trip(edge, pos):
    e = edge.at(pos)
    assert Edge.parse(e.name) == e


def test_circuit_csv_round_trip():
    m = random_model(0)
    c = Circuit.of_edges([m.edges[0], m.edges[5].at(2), m.edges[22]])
    assert circuit_from_csv(circuit_to_csv(c)) == c
    n = Circuit.of_nodes([NodeSite(INPUT), NodeSite(m.sources[2], 3)])
    assert circuit_from_csv(circuit_to_csv(n)) == n


def test_circuit_validation():
    m = random_model(0)
    bad = Circuit.of_edges([Edge(m.sources[3], NodeId("q", 0, 0))])
    with pytest.raises(GraphError):
        bad.validate(m)
    with pytest.raises(GraphError):
        Circuit(frozenset([NodeSite(INPUT)]), "edge")


def test_to_nodes_and_head_level():
    e = Edge(INPUT, NodeId("k", 1, 0))
    c = Circuit.of_edges([e, Edge(NodeId("attn", 1, 0), OUTPUT_IN)])
    assert {n.name for n in c.to_nodes().members} == {"Input", "A1.0"}
    assert c.head_level() == {("Input", "A1.0"), ("A1.0", "OutputIn")}


def test_xproportion_model_has_23_edges(xprop):
    assert xprop.model.n_edges == 23
