"""Edge/node/global update block with per-quadrant edge transforms.

One pass updates every edge, then every node, then the global vector:

* each edge k in quadrant group g:
  ``e'_k = ReLU([e_k || v_recv || v_send || u] @ W_g + b_g)``
* each node i receives the per-group sums of its incoming updated edges,
  concatenated in fixed group order (empty groups contribute zeros):
  ``v'_i = ReLU([v_i || agg_i || u] @ W_v + b_v)``
* the global vector sees the node sum and the per-group edge sums:
  ``u' = ReLU([u || sum_i v'_i || sum-per-group e'] @ W_u + b_u)``

With ``directional=False`` all edges share a single transform ("ALL"
group) and the node/global aggregates collapse to one plain sum, which
is the ablation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from gunet import tensor as T
from gunet.errors import ShapeError
from gunet.graph import MIRROR, ROAD_QUADRANTS, Quadrant
from gunet.tensor import AffineParams, Tensor

__all__ = [
    "ROAD_GROUPS", "UPSAMPLING_GROUPS", "EdgeStructure", "GnBlockParams",
    "edge_structure", "make_block_params", "gn_forward",
    "mirror_block_params",
]

ROAD_GROUPS = tuple(q.name for q in ROAD_QUADRANTS)
UPSAMPLING_GROUPS = ROAD_GROUPS + (Quadrant.SELF.name,)


@dataclass(eq=False)
class EdgeStructure:
    """Static topology view a block iterates over (precompute per graph)."""

    n_nodes: int
    senders: np.ndarray
    receivers: np.ndarray
    groups: tuple
    group_edge_ids: dict


def edge_structure(n_nodes: int, senders: np.ndarray, receivers: np.ndarray,
                   labels: np.ndarray, directional: bool,
                   groups: tuple = ROAD_GROUPS) -> EdgeStructure:
    """Partition edges by quadrant label (or lump them into one group)."""
    senders = np.asarray(senders, dtype=np.int64)
    receivers = np.asarray(receivers, dtype=np.int64)
    if not directional:
        ids = {"ALL": np.arange(len(senders), dtype=np.int64)}
        return EdgeStructure(n_nodes, senders, receivers, ("ALL",), ids)
    labels = np.asarray(labels)
    ids = {name: np.flatnonzero(labels == int(Quadrant[name]))
           for name in groups}
    covered = sum(len(v) for v in ids.values())
    if covered != len(senders):
        raise ShapeError(
            f"edge_structure: {len(senders) - covered} edges have labels "
            f"outside groups {groups}")
    return EdgeStructure(n_nodes, senders, receivers, groups, ids)


@dataclass(eq=False)
class GnBlockParams:
    """Parameters of one block; ``glob`` may be omitted (then u passes through)."""

    groups: tuple
    edge: dict
    node: AffineParams
    glob: Optional[AffineParams]

    @property
    def directional(self) -> bool:
        return self.groups != ("ALL",)


def make_block_params(rng: np.random.Generator, v_in: int, e_in: int,
                      d_v: int, d_e: int, d_u: int, directional: bool,
                      groups: tuple = ROAD_GROUPS,
                      with_global: bool = True) -> GnBlockParams:
    """He-initialized block parameters for the given input widths."""
    use = groups if directional else ("ALL",)

    def affine(fan_in, fan_out):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        return AffineParams(Tensor(w, requires_grad=True),
                            Tensor(np.zeros(fan_out), requires_grad=True))

    e_total = e_in + 2 * v_in + d_u
    edge = {name: affine(e_total, d_e) for name in use}
    node = affine(v_in + len(use) * d_e + d_u, d_v)
    glob = affine(d_u + d_v + len(use) * d_e, d_u) if with_global else None
    return GnBlockParams(use, edge, node, glob)


def _check_width(name: str, x: Tensor, W: Tensor) -> None:
    if x.data.shape[-1] != W.data.shape[0]:
        raise ShapeError(
            f"{name}: input width {x.data.shape[-1]} does not match weight "
            f"rows {W.data.shape[0]}")


def gn_forward(structure: EdgeStructure, V: Tensor, E: Tensor, u: Tensor,
               params: GnBlockParams):
    """One block pass; returns (V', E', u').

    ``E'`` keeps the original edge ordering (each edge carries the output
    of its own group's transform).  When ``params.glob`` is None the
    global vector is returned unchanged.
    """
    if params.groups != structure.groups:
        raise ShapeError(
            f"gn_forward: params built for groups {params.groups}, "
            f"structure has {structure.groups}")
    n, m = structure.n_nodes, len(structure.senders)

    updated = {}
    node_agg_parts = []
    edge_sum_parts = []
    for name in structure.groups:
        ids = structure.group_edge_ids[name]
        tr = params.edge[name]
        x = T.concat([
            T.gather_rows(E, ids),
            T.gather_rows(V, structure.receivers[ids]),
            T.gather_rows(V, structure.senders[ids]),
            T.broadcast_rows(u, len(ids)),
        ])
        _check_width(f"edge transform {name}", x, tr.W)
        out = T.relu(T.add_bias(T.matmul(x, tr.W), tr.b))
        updated[name] = (ids, out)
        node_agg_parts.append(T.segment_sum(out, structure.receivers[ids], n))
        edge_sum_parts.append(T.sum_rows(out))

    if len(structure.groups) == 1:
        e_out = updated[structure.groups[0]][1]  # ids are 0..m-1 in order
    else:
        scattered = [T.scatter_rows(out, ids, m)
                     for ids, out in (updated[g] for g in structure.groups)]
        e_out = scattered[0]
        for piece in scattered[1:]:
            e_out = T.add(e_out, piece)

    xv = T.concat([V] + node_agg_parts + [T.broadcast_rows(u, n)])
    _check_width("node transform", xv, params.node.W)
    v_out = T.relu(T.add_bias(T.matmul(xv, params.node.W), params.node.b))

    if params.glob is None:
        return v_out, e_out, u
    xu = T.concat([u, T.sum_rows(v_out)] + edge_sum_parts)
    _check_width("global transform", xu, params.glob.W)
    u_out = T.relu(T.add_bias(T.matmul(xu, params.glob.W), params.glob.b))
    return v_out, e_out, u_out


def mirror_block_params(params: GnBlockParams) -> GnBlockParams:
    """Permute a block's quadrant-indexed parameters by the point reflection.

    Edge transforms swap NE<->SW and SE<->NW (SELF stays); the rows of the
    node and global weights that consume the per-group aggregates are
    permuted blockwise the same way, so a mirrored graph with mirrored
    inputs produces mirrored outputs.  Non-directional blocks are
    returned unchanged (a single shared transform is its own mirror).
    """
    if not params.directional:
        return params
    if params.glob is None:
        raise ShapeError("mirror_block_params: directional block without a "
                         "global transform; widths cannot be inferred")
    groups = params.groups
    edge = {name: params.edge[MIRROR[Quadrant[name]].name] for name in groups}

    d_e = next(iter(params.edge.values())).W.data.shape[1]
    d_v = params.node.W.data.shape[1]
    d_u = params.glob.W.data.shape[1]
    src_of = [groups.index(MIRROR[Quadrant[name]].name) for name in groups]

    def permute_rows(W: Tensor, offset: int) -> Tensor:
        rows = np.arange(W.data.shape[0])
        for gi, src in enumerate(src_of):
            rows[offset + gi * d_e: offset + (gi + 1) * d_e] = \
                np.arange(offset + src * d_e, offset + (src + 1) * d_e)
        return Tensor(W.data[rows], requires_grad=W.requires_grad)

    # node input is [v || per-group aggregate || u]
    v_in = params.node.W.data.shape[0] - len(groups) * d_e - d_u
    node = AffineParams(permute_rows(params.node.W, v_in), params.node.b)
    # global input is [u || node sum || per-group edge sums]
    glob = AffineParams(permute_rows(params.glob.W, d_u + d_v), params.glob.b)
    return GnBlockParams(groups, edge, node, glob)
