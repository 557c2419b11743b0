"""Tests for the quadrant-grouped edge/node/global update block.

The reference results come from ``_np_block`` below, a standalone numpy
re-implementation of the update equations that shares no code with the
autodiff path.
"""

import numpy as np
import pytest

from gunet import tensor as T
from gunet.errors import ShapeError
from gunet.gnblock import (
    ROAD_GROUPS,
    UPSAMPLING_GROUPS,
    GnBlockParams,
    edge_structure,
    gn_forward,
    make_block_params,
    mirror_block_params,
)
from gunet.graph import build_road_graph, mirror_graph
from gunet.tensor import AffineParams, Tensor

TOL = 1e-12
EQUIV_TOL = 1e-9


def _np_block(structure, V, E, u, params):
    """Dense-numpy oracle for one block pass (no shared code)."""
    n = structure.n_nodes
    send, recv = structure.senders, structure.receivers
    e_out = None
    aggs, esums = [], []
    for name in structure.groups:
        ids = structure.group_edge_ids[name]
        W = params.edge[name].W.data
        b = params.edge[name].b.data
        x = np.hstack([E[ids], V[recv[ids]], V[send[ids]],
                       np.tile(u, (len(ids), 1))])
        out = np.maximum(x @ W + b, 0.0)
        if e_out is None:
            e_out = np.zeros((len(send), out.shape[1]))
        e_out[ids] = out
        agg = np.zeros((n, out.shape[1]))
        for k, r in enumerate(recv[ids]):
            agg[r] += out[k]
        aggs.append(agg)
        esums.append(out.sum(axis=0))
    xv = np.hstack([V] + aggs + [np.tile(u, (n, 1))])
    v_out = np.maximum(xv @ params.node.W.data + params.node.b.data, 0.0)
    if params.glob is None:
        return v_out, e_out, u.copy()
    xu = np.concatenate([u, v_out.sum(axis=0)] + esums)
    u_out = np.maximum(xu @ params.glob.W.data + params.glob.b.data, 0.0)
    return v_out, e_out, u_out


def _structure_from_graph(g, directional=True):
    return edge_structure(g.n_nodes, g.edges[:, 0], g.edges[:, 1],
                          g.edge_quadrant, directional)


def _random_inputs(rng, n, m, d_v=3, d_e=2, d_u=4):
    V = rng.normal(size=(n, d_v))
    E = rng.normal(size=(m, d_e))
    u = rng.normal(size=d_u)
    return V, E, u


# ---------------------------------------------------------------------------
# against the numpy oracle


def test_two_node_single_edge_matches_oracle():
    rng = np.random.default_rng(0)
    structure = edge_structure(2, [0], [1], [0], directional=True)  # NE edge
    params = make_block_params(rng, v_in=3, e_in=2, d_v=3, d_e=2, d_u=4,
                               directional=True)
    V, E, u = _random_inputs(rng, 2, 1)
    v2, e2, u2 = gn_forward(structure, Tensor(V), Tensor(E), Tensor(u), params)
    ev, ee, eu = _np_block(structure, V, E, u, params)
    assert np.max(np.abs(v2.data - ev)) < TOL
    assert np.max(np.abs(e2.data - ee)) < TOL
    assert np.max(np.abs(u2.data - eu)) < TOL
    # node 0 receives nothing: its aggregate block is all zeros
    d_u, d_e = 4, 2
    x0 = np.concatenate([V[0], np.zeros(4 * d_e), u])
    v0 = np.maximum(x0 @ params.node.W.data + params.node.b.data, 0.0)
    assert np.max(np.abs(v2.data[0] - v0)) < TOL


def test_random_graphs_match_oracle():
    rng = np.random.default_rng(11)
    for trial in range(20):
        h, w = rng.integers(2, 9, size=2)
        raster = (rng.random((h, w)) < 0.5).astype(np.uint8) * 200
        if raster.max() == 0:
            continue
        g = build_road_graph(raster)
        directional = bool(trial % 2)
        structure = _structure_from_graph(g, directional)
        params = make_block_params(rng, 3, 2, 3, 2, 4, directional)
        V, E, u = _random_inputs(rng, g.n_nodes, g.n_edges)
        got = gn_forward(structure, Tensor(V), Tensor(E), Tensor(u), params)
        want = _np_block(structure, V, E, u, params)
        for a, b in zip(got, want):
            assert np.max(np.abs(a.data - b)) < TOL


def test_isolated_node_empty_aggregation():
    rng = np.random.default_rng(5)
    structure = edge_structure(1, np.empty(0, np.int64),
                               np.empty(0, np.int64), np.empty(0, np.int64),
                               directional=True)
    params = make_block_params(rng, 3, 2, 3, 2, 4, directional=True)
    V, E, u = _random_inputs(rng, 1, 0)
    v2, e2, u2 = gn_forward(structure, Tensor(V), Tensor(E), Tensor(u), params)
    assert e2.data.shape == (0, 2)
    x = np.concatenate([V[0], np.zeros(4 * 2), u])
    expect = np.maximum(x @ params.node.W.data + params.node.b.data, 0.0)
    assert np.max(np.abs(v2.data[0] - expect)) < TOL
    xu = np.concatenate([u, v2.data[0], np.zeros(4 * 2)])
    expect_u = np.maximum(xu @ params.glob.W.data + params.glob.b.data, 0.0)
    assert np.max(np.abs(u2.data - expect_u)) < TOL


# ---------------------------------------------------------------------------
# directional sensitivity


def test_directional_distinguishes_mirrored_neighbors():
    rng = np.random.default_rng(2)
    # one incoming edge at the center, from the NE vs from the SW
    struct_ne = edge_structure(2, [1], [0], [int(0)], directional=True)
    struct_sw = edge_structure(2, [1], [0], [int(2)], directional=True)
    V, E, u = _random_inputs(rng, 2, 1)
    params = make_block_params(rng, 3, 2, 3, 2, 4, directional=True)
    v_ne, _, _ = gn_forward(struct_ne, Tensor(V), Tensor(E), Tensor(u), params)
    v_sw, _, _ = gn_forward(struct_sw, Tensor(V), Tensor(E), Tensor(u), params)
    assert np.max(np.abs(v_ne.data[0] - v_sw.data[0])) > 1e-6

    flat_ne = edge_structure(2, [1], [0], [0], directional=False)
    flat_sw = edge_structure(2, [1], [0], [2], directional=False)
    flat_params = make_block_params(rng, 3, 2, 3, 2, 4, directional=False)
    a, _, _ = gn_forward(flat_ne, Tensor(V), Tensor(E), Tensor(u), flat_params)
    b, _, _ = gn_forward(flat_sw, Tensor(V), Tensor(E), Tensor(u), flat_params)
    assert np.max(np.abs(a.data[0] - b.data[0])) <= 1e-9


# ---------------------------------------------------------------------------
# invariances


def test_node_relabeling_equivariance():
    rng = np.random.default_rng(7)
    raster = (rng.random((6, 6)) < 0.5).astype(np.uint8) * 150
    g = build_road_graph(raster)
    n, m = g.n_nodes, g.n_edges
    structure = _structure_from_graph(g)
    params = make_block_params(rng, 3, 2, 3, 2, 4, directional=True)
    V, E, u = _random_inputs(rng, n, m)
    v1, e1, u1 = gn_forward(structure, Tensor(V), Tensor(E), Tensor(u), params)

    perm = rng.permutation(n)           # new_id = perm[old_id]
    relabeled = edge_structure(n, perm[g.edges[:, 0]], perm[g.edges[:, 1]],
                               g.edge_quadrant, directional=True)
    V2 = np.empty_like(V)
    V2[perm] = V
    v2, e2, u2 = gn_forward(relabeled, Tensor(V2), Tensor(E), Tensor(u), params)
    assert np.max(np.abs(v2.data[perm] - v1.data)) < EQUIV_TOL
    assert np.max(np.abs(e2.data - e1.data)) < EQUIV_TOL
    assert np.max(np.abs(u2.data - u1.data)) < EQUIV_TOL


def test_shared_weights_collapse_to_ablation():
    # when all four quadrant transforms are identical and the node/global
    # weights tile one aggregate block per group, the directional block
    # computes exactly the non-directional one
    rng = np.random.default_rng(9)
    raster = (rng.random((5, 7)) < 0.6).astype(np.uint8) * 120
    g = build_road_graph(raster)
    structure_dir = _structure_from_graph(g, directional=True)
    structure_all = _structure_from_graph(g, directional=False)
    d_v, d_e, d_u, v_in, e_in = 3, 2, 4, 3, 2

    flat = make_block_params(rng, v_in, e_in, d_v, d_e, d_u, directional=False)
    shared_edge = flat.edge["ALL"]
    wv = flat.node.W.data
    top, agg_block, bottom = wv[:v_in], wv[v_in:v_in + d_e], wv[v_in + d_e:]
    node_dir = AffineParams(
        Tensor(np.vstack([top] + [agg_block] * 4 + [bottom])), flat.node.b)
    wu = flat.glob.W.data
    head, esum_block = wu[:d_u + d_v], wu[d_u + d_v:d_u + d_v + d_e]
    glob_dir = AffineParams(
        Tensor(np.vstack([head] + [esum_block] * 4)), flat.glob.b)
    directional = GnBlockParams(
        ROAD_GROUPS, {name: shared_edge for name in ROAD_GROUPS},
        node_dir, glob_dir)

    V, E, u = _random_inputs(rng, g.n_nodes, g.n_edges)
    out_dir = gn_forward(structure_dir, Tensor(V), Tensor(E), Tensor(u),
                         directional)
    out_all = gn_forward(structure_all, Tensor(V), Tensor(E), Tensor(u), flat)
    for a, b in zip(out_dir, out_all):
        assert np.max(np.abs(a.data - b.data)) < EQUIV_TOL


def test_mirrored_params_equivariance():
    rng = np.random.default_rng(13)
    for _ in range(10):
        raster = (rng.random((6, 8)) < 0.5).astype(np.uint8) * 130
        if raster.max() == 0:
            continue
        ga = build_road_graph(raster)
        gb = mirror_graph(ga)
        h, w = raster.shape
        # node i of the mirror graph sits where node perm[i] of the
        # original was
        perm = np.array([ga.node_index[(h - 1 - int(r), w - 1 - int(c))]
                         for r, c in gb.positions])
        pair_to_edge = {(int(s), int(r)): k
                        for k, (s, r) in enumerate(ga.edges)}
        edge_map = np.array([pair_to_edge[(int(perm[s]), int(perm[r]))]
                             for s, r in gb.edges])

        params = make_block_params(rng, 3, 2, 3, 2, 4, directional=True)
        V, E, u = _random_inputs(rng, ga.n_nodes, ga.n_edges)
        va, ea, ua = gn_forward(_structure_from_graph(ga),
                                Tensor(V), Tensor(E), Tensor(u), params)
        vb, eb, ub = gn_forward(_structure_from_graph(gb),
                                Tensor(V[perm]), Tensor(E[edge_map]),
                                Tensor(u), mirror_block_params(params))
        assert np.max(np.abs(vb.data - va.data[perm])) < EQUIV_TOL
        assert np.max(np.abs(eb.data - ea.data[edge_map])) < EQUIV_TOL
        assert np.max(np.abs(ub.data - ua.data)) < EQUIV_TOL


def test_mirror_block_params_involution():
    rng = np.random.default_rng(21)
    params = make_block_params(rng, 3, 2, 3, 2, 4, directional=True,
                               groups=UPSAMPLING_GROUPS)
    twice = mirror_block_params(mirror_block_params(params))
    for name in params.groups:
        assert np.array_equal(twice.edge[name].W.data,
                              params.edge[name].W.data)
    assert np.array_equal(twice.node.W.data, params.node.W.data)
    assert np.array_equal(twice.glob.W.data, params.glob.W.data)


# ---------------------------------------------------------------------------
# structure and error handling


def test_edge_structure_partition_and_groups():
    rng = np.random.default_rng(17)
    raster = (rng.random((7, 7)) < 0.5).astype(np.uint8) * 90
    g = build_road_graph(raster)
    structure = _structure_from_graph(g)
    assert structure.groups == ROAD_GROUPS
    all_ids = np.concatenate([structure.group_edge_ids[name]
                              for name in ROAD_GROUPS])
    assert len(all_ids) == g.n_edges
    assert len(np.unique(all_ids)) == g.n_edges

    flat = _structure_from_graph(g, directional=False)
    assert flat.groups == ("ALL",)
    assert len(flat.group_edge_ids["ALL"]) == g.n_edges


def test_edge_structure_rejects_foreign_labels():
    with pytest.raises(ShapeError):
        edge_structure(2, [0], [1], [4], directional=True)  # SELF not a group


def test_width_mismatch_names_failing_transform():
    rng = np.random.default_rng(1)
    structure = edge_structure(2, [0], [1], [0], directional=True)
    params = make_block_params(rng, 3, 2, 3, 2, 4, directional=True)
    V, E, u = _random_inputs(rng, 2, 1)
    with pytest.raises(ShapeError, match="edge transform NE"):
        gn_forward(structure, Tensor(V), Tensor(E[:, :1]), Tensor(u), params)
    with pytest.raises(ShapeError, match="node transform"):
        bad = GnBlockParams(params.groups, params.edge,
                            AffineParams(Tensor(np.zeros((5, 3))),
                                         Tensor(np.zeros(3))), params.glob)
        gn_forward(structure, Tensor(V), Tensor(E), Tensor(u), bad)
    with pytest.raises(ShapeError, match="groups"):
        flat = edge_structure(2, [0], [1], [0], directional=False)
        gn_forward(flat, Tensor(V), Tensor(E), Tensor(u), params)


def test_block_without_global_passes_u_through():
    rng = np.random.default_rng(3)
    structure = edge_structure(2, [0], [1], [0], directional=True)
    params = make_block_params(rng, 3, 2, 3, 2, 4, directional=True,
                               with_global=False)
    assert params.glob is None
    V, E, u = _random_inputs(rng, 2, 1)
    ut = Tensor(u)
    _, _, u_out = gn_forward(structure, Tensor(V), Tensor(E), ut, params)
    assert u_out is ut
