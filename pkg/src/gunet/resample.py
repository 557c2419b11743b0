"""Grid-anchored graph pooling and upsampling.

Pooling merges nodes within non-overlapping 2x2 pixel windows (stride 2,
ceil division at odd extents): coarse features are the feature-wise max
over merged nodes/edges, window-internal edges vanish, and coarse edge
labels are recomputed from coarse position deltas.  Gradients follow the
max winners (first contributor on ties).

Upsampling builds a bipartite graph from a coarse graph back onto a fine
one: coarse positions are scaled by two and connected to every fine node
sharing their 2x2 window.  Each edge is labeled by its in-window delta:

    (0,0) -> SELF    (0,1) -> NE    (1,0) -> SW    (1,1) -> SELF

The diagonal delta joins SELF because the two form the orbit that the
point reflection maps onto itself, exactly as NE/SW pair up; any other
assignment would break mirror equivariance of the full network.  A
single directional pass over this graph (target features start at zero,
edge features at zero) produces the upsampled node features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gunet import tensor as T
from gunet.errors import GraphError, ShapeError
from gunet.gnblock import (UPSAMPLING_GROUPS, EdgeStructure, GnBlockParams,
                           edge_structure, gn_forward)
from gunet.graph import Quadrant, RoadGraph, classify_edge
from gunet.tensor import Tensor

__all__ = [
    "PoolResult", "pool_plan", "pool", "UpsamplingGraph",
    "build_upsampling_graph", "upsampling_structure", "upsample",
    "UPSAMPLING_DELTA_LABELS",
]

#: label of an upsampling edge by (target - scaled input) window delta
UPSAMPLING_DELTA_LABELS = {
    (0, 0): Quadrant.SELF,
    (0, 1): Quadrant.NE,
    (1, 0): Quadrant.SW,
    (1, 1): Quadrant.SELF,
}


@dataclass(eq=False)
class PoolResult:
    """Static part of one pooling step (reusable across forward passes)."""

    graph: RoadGraph
    node_assignment: np.ndarray  # fine node -> coarse node
    edge_assignment: np.ndarray  # fine edge -> coarse edge, -1 if dropped


def pool_plan(graph: RoadGraph) -> PoolResult:
    """Compute the coarse graph and fine-to-coarse assignments."""
    if graph.n_nodes == 0:
        raise GraphError("pool: empty graph")
    coarse_pos_all = graph.positions // 2
    flat = coarse_pos_all[:, 0] * ((graph.width + 1) // 2) + coarse_pos_all[:, 1]
    uniq, node_assignment = np.unique(flat, return_inverse=True)
    n_coarse = len(uniq)
    ch = (graph.height + 1) // 2
    cw = (graph.width + 1) // 2
    positions = np.stack([uniq // cw, uniq % cw], axis=1).astype(np.int64)

    if graph.n_edges:
        cs = node_assignment[graph.edges[:, 0]]
        cr = node_assignment[graph.edges[:, 1]]
        keep = cs != cr
        pairs = np.stack([cs[keep], cr[keep]], axis=1)
        uniq_pairs, inverse = np.unique(pairs, axis=0, return_inverse=True)
        edge_assignment = np.full(graph.n_edges, -1, dtype=np.int64)
        edge_assignment[keep] = inverse
        deltas = positions[uniq_pairs[:, 1]] - positions[uniq_pairs[:, 0]]
        quad = np.array([int(classify_edge(dr, dc)) for dr, dc in deltas],
                        dtype=np.int8)
        edges = uniq_pairs.astype(np.int64)
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
        edge_assignment = np.zeros(0, dtype=np.int64)
        quad = np.zeros(0, dtype=np.int8)

    coarse = RoadGraph(ch, cw, positions, edges, quad)
    return PoolResult(coarse, node_assignment.astype(np.int64), edge_assignment)


def pool(graph: RoadGraph, V: Tensor, E: Tensor,
         plan: PoolResult | None = None):
    """Max-pool node and edge features onto the coarse graph.

    Returns ``(PoolResult, V', E')``.  ``np.unique`` sorts coarse nodes
    row-major, so the coarse graph obeys the usual id convention.
    """
    if plan is None:
        plan = pool_plan(graph)
    if V.data.shape[0] != graph.n_nodes:
        raise ShapeError(f"pool: V has {V.data.shape[0]} rows for "
                         f"{graph.n_nodes} nodes")
    if E.data.shape[0] != graph.n_edges:
        raise ShapeError(f"pool: E has {E.data.shape[0]} rows for "
                         f"{graph.n_edges} edges")
    v_out = T.segment_max(V, plan.node_assignment, plan.graph.n_nodes)
    e_out = T.segment_max(E, plan.edge_assignment, plan.graph.n_edges)
    return plan, v_out, e_out


@dataclass(eq=False)
class UpsamplingGraph:
    """Bipartite graph from coarse (input) nodes onto fine (target) nodes.

    The combined node set places the ``n_inputs`` input nodes first;
    ``receivers`` already carry the target offset.
    """

    n_inputs: int
    n_targets: int
    senders: np.ndarray
    receivers: np.ndarray
    labels: np.ndarray


def build_upsampling_graph(coarse: RoadGraph, fine: RoadGraph) -> UpsamplingGraph:
    """Connect each scaled coarse node to the fine nodes in its 2x2 window."""
    if ((fine.height + 1) // 2, (fine.width + 1) // 2) != (coarse.height,
                                                           coarse.width):
        raise GraphError(
            f"upsampling extents mismatch: coarse {coarse.height}x{coarse.width} "
            f"cannot upsample to fine {fine.height}x{fine.width}")
    fine_ids = np.full((fine.height, fine.width), -1, dtype=np.int64)
    fine_ids[fine.positions[:, 0], fine.positions[:, 1]] = \
        np.arange(fine.n_nodes)

    senders, receivers, labels = [], [], []
    for j, (r, c) in enumerate(coarse.positions):
        base_r, base_c = 2 * int(r), 2 * int(c)
        for (dr, dc), quad in UPSAMPLING_DELTA_LABELS.items():
            rr, cc = base_r + dr, base_c + dc
            if rr >= fine.height or cc >= fine.width:
                continue
            t = fine_ids[rr, cc]
            if t < 0:
                continue
            senders.append(j)
            receivers.append(coarse.n_nodes + t)
            labels.append(int(quad))
    return UpsamplingGraph(
        coarse.n_nodes, fine.n_nodes,
        np.asarray(senders, dtype=np.int64),
        np.asarray(receivers, dtype=np.int64),
        np.asarray(labels, dtype=np.int8))


def upsampling_structure(ug: UpsamplingGraph, directional: bool) -> EdgeStructure:
    return edge_structure(ug.n_inputs + ug.n_targets, ug.senders,
                          ug.receivers, ug.labels, directional,
                          groups=UPSAMPLING_GROUPS)


def upsample(ug: UpsamplingGraph, V_in: Tensor, u: Tensor,
             params: GnBlockParams,
             structure: EdgeStructure | None = None) -> Tensor:
    """One block pass over the upsampling graph; returns target features.

    Target nodes and edge features start at zero, so the result is driven
    purely by the messages from the scaled input nodes.
    """
    if params.directional and Quadrant.SELF.name not in params.groups:
        raise ShapeError("upsample: params missing the SELF quadrant transform")
    if V_in.data.shape[0] != ug.n_inputs:
        raise ShapeError(f"upsample: V_in has {V_in.data.shape[0]} rows for "
                         f"{ug.n_inputs} input nodes")
    if structure is None:
        structure = upsampling_structure(ug, params.directional)
    n = ug.n_inputs + ug.n_targets
    v_comb = T.scatter_rows(V_in, np.arange(ug.n_inputs, dtype=np.int64), n)
    w_rows = next(iter(params.edge.values())).W.data.shape[0]
    e_in = w_rows - 2 * V_in.data.shape[1] - u.data.shape[0]
    if e_in < 0:
        raise ShapeError(
            f"upsample: edge transform expects {w_rows} inputs but node and "
            f"global features alone provide {w_rows - e_in}")
    e_zero = Tensor(np.zeros((len(ug.senders), e_in)))
    v_out, _, _ = gn_forward(structure, v_comb, e_zero, u, params)
    return T.gather_rows(v_out, ug.n_inputs + np.arange(ug.n_targets,
                                                        dtype=np.int64))
