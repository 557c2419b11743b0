"""Directed road graphs extracted from raster street maps.

Every pixel with nonzero intensity becomes a node (ids assigned in
row-major scan order); edges connect adjacent street pixels in both
directions and carry a compass-quadrant label derived from the position
delta.  North is the direction of decreasing row index.

The quadrant labels are what downstream network blocks key their
per-direction parameters on, so their algebra matters: the point
reflection ``(r, c) -> (H-1-r, W-1-c)`` maps each quadrant to its
mirror partner (NE<->SW, SE<->NW) and this module guarantees
``classify_edge(-d) == MIRROR[classify_edge(d)]`` for every delta.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable

import numpy as np

from gunet.errors import GraphError

__all__ = [
    "Quadrant", "MIRROR", "ROAD_QUADRANTS", "classify_edge", "RoadGraph",
    "build_road_graph", "mirror_graph", "write_graph_text",
]


class Quadrant(IntEnum):
    """Compass quadrant of a directed edge; SELF marks zero-ish deltas."""

    NE = 0
    SE = 1
    SW = 2
    NW = 3
    SELF = 4


#: point-reflection partner of each quadrant
MIRROR = {
    Quadrant.NE: Quadrant.SW,
    Quadrant.SE: Quadrant.NW,
    Quadrant.SW: Quadrant.NE,
    Quadrant.NW: Quadrant.SE,
    Quadrant.SELF: Quadrant.SELF,
}

#: quadrants that occur in road graphs (SELF is reserved for upsampling)
ROAD_QUADRANTS = (Quadrant.NE, Quadrant.SE, Quadrant.SW, Quadrant.NW)

_OFFSETS_8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1),
              (0, 1), (1, -1), (1, 0), (1, 1))
_OFFSETS_4 = ((-1, 0), (0, -1), (0, 1), (1, 0))


def classify_edge(d_row: int, d_col: int) -> Quadrant:
    """Quadrant of a position delta (receiver minus sender).

    Cardinal directions tie-break clockwise into the adjacent diagonal
    quadrant (E->NE, S->SE, W->SW, N->NW), which makes the table commute
    with point reflection.  A zero delta is SELF.
    """
    if d_row == 0 and d_col == 0:
        return Quadrant.SELF
    if d_row < 0:
        return Quadrant.NE if d_col > 0 else Quadrant.NW
    if d_row > 0:
        return Quadrant.SE if d_col >= 0 else Quadrant.SW
    return Quadrant.NE if d_col > 0 else Quadrant.SW


@dataclass(eq=False)
class RoadGraph:
    """Directed graph anchored to an ``height`` x ``width`` pixel grid.

    ``positions[i]`` is the (row, col) of node ``i``; ids follow row-major
    scan order of the source raster.  ``edges`` holds (sender, receiver)
    pairs sorted lexicographically, ``edge_quadrant`` the matching labels.
    """

    height: int
    width: int
    positions: np.ndarray
    edges: np.ndarray
    edge_quadrant: np.ndarray
    _node_index: dict = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def node_index(self) -> dict:
        """Mapping (row, col) -> node id, built on first use."""
        if self._node_index is None:
            self._node_index = {(int(r), int(c)): i
                                for i, (r, c) in enumerate(self.positions)}
        return self._node_index

    def pixel_ids(self) -> np.ndarray:
        """Row-major raster index (r*width + c) of every node."""
        return self.positions[:, 0] * self.width + self.positions[:, 1]

    def quadrant_edge_ids(self, quadrant: Quadrant) -> np.ndarray:
        return np.flatnonzero(self.edge_quadrant == int(quadrant))


def _sorted_edges(pairs: Iterable, deltas: Iterable) -> tuple:
    pairs = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
    deltas = np.asarray(list(deltas), dtype=np.int64).reshape(-1, 2)
    if len(pairs):
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        pairs = pairs[order]
        deltas = deltas[order]
    quad = np.array([int(classify_edge(dr, dc)) for dr, dc in deltas],
                    dtype=np.int8)
    return pairs, quad


def build_road_graph(street_map: np.ndarray, adjacency: int = 8) -> RoadGraph:
    """Extract the directed road graph of a street intensity raster.

    Nodes are the pixels with intensity > 0; each pair of adjacent street
    pixels contributes one edge per direction.  ``adjacency`` selects the
    4- or 8-neighbourhood (8 keeps diagonal streets connected).
    """
    if adjacency not in (4, 8):
        raise GraphError(f"adjacency must be 4 or 8, got {adjacency}")
    street_map = np.asarray(street_map)
    if street_map.ndim != 2:
        raise GraphError(f"street map must be 2-D, got shape {street_map.shape}")
    h, w = street_map.shape
    rows, cols = np.nonzero(street_map > 0)
    if len(rows) == 0:
        raise GraphError("empty road graph")
    positions = np.stack([rows, cols], axis=1).astype(np.int64)

    ids = np.full((h, w), -1, dtype=np.int64)
    ids[rows, cols] = np.arange(len(rows))

    offsets = _OFFSETS_8 if adjacency == 8 else _OFFSETS_4
    pairs, deltas = [], []
    for dr, dc in offsets:
        r2 = rows + dr
        c2 = cols + dc
        ok = (r2 >= 0) & (r2 < h) & (c2 >= 0) & (c2 < w)
        ok[ok] &= ids[r2[ok], c2[ok]] >= 0
        senders = ids[rows[ok], cols[ok]]
        receivers = ids[r2[ok], c2[ok]]
        pairs.extend(zip(senders, receivers))
        deltas.extend([(dr, dc)] * len(senders))
    edges, quad = _sorted_edges(pairs, deltas)
    return RoadGraph(h, w, positions, edges, quad)


def mirror_graph(g: RoadGraph) -> RoadGraph:
    """Point-reflect a graph: positions map to (H-1-r, W-1-c).

    Node ids are reassigned row-major on the reflected raster and edge
    labels recomputed, so the result is exactly the graph that
    :func:`build_road_graph` would produce from the reflected map.
    Applying it twice restores the original graph bit for bit.
    """
    h, w = g.height, g.width
    reflected = np.stack([h - 1 - g.positions[:, 0],
                          w - 1 - g.positions[:, 1]], axis=1)
    order = np.lexsort((reflected[:, 1], reflected[:, 0]))
    new_id = np.empty(g.n_nodes, dtype=np.int64)
    new_id[order] = np.arange(g.n_nodes)
    positions = reflected[order]
    if g.n_edges:
        mapped = new_id[g.edges]
        deltas = positions[mapped[:, 1]] - positions[mapped[:, 0]]
        edges, quad = _sorted_edges(mapped, deltas)
    else:
        edges = g.edges.copy()
        quad = g.edge_quadrant.copy()
    return RoadGraph(h, w, positions, edges, quad)


def write_graph_text(g: RoadGraph, path) -> None:
    """Dump edges as ``r1 c1 r2 c2 quadrant`` lines (debugging aid)."""
    with open(path, "w", encoding="utf-8") as fh:
        for (s, r), q in zip(g.edges, g.edge_quadrant):
            r1, c1 = g.positions[s]
            r2, c2 = g.positions[r]
            fh.write(f"{r1} {c1} {r2} {c2} {Quadrant(q).name}\n")
