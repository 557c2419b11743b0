"""Initial node, edge, and global features for a forecasting sample.

Node features are the seed frames' channels at the node's pixel,
normalized to [0, 1] and concatenated in frame order.  Edge features
come from a learned two-layer 3x3 map over the static street raster:
each edge concatenates the static feature vector of its sender and
receiver pixel.  The global vector stacks a damped sum of all node
features with a time-of-day encoding and a weekday one-hot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gunet import tensor as T
from gunet.errors import DataError, ShapeError
from gunet.graph import RoadGraph
from gunet.tensor import AffineParams, Tensor

__all__ = [
    "Timestamp", "StaticCnnParams", "conv_patch_indices", "static_cnn",
    "init_node_features", "init_edge_features", "encode_time",
    "weekday_onehot", "init_global", "GLOBAL_EXTRA_DIMS", "NODE_SUM_DAMPING",
]

#: dimensions appended to the damped node-feature sum inside the global
#: vector: [sin, cos] time encoding plus a 7-day one-hot
GLOBAL_EXTRA_DIMS = 9

#: damping applied to the citywide node-feature sum (keeps the global
#: input at unit scale even for tens of thousands of nodes)
NODE_SUM_DAMPING = 1e-5

#: fixed 3x3 tap order used for both conv layers and kernel reflection
CONV_TAPS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0),
             (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass
class Timestamp:
    """Wall-clock minute of day [0, 1440) plus weekday (0 = Monday)."""

    minute: int
    weekday: int

    def __post_init__(self):
        if not 0 <= self.minute < 1440:
            raise DataError(f"minute {self.minute} outside [0, 1440)")
        if not 0 <= self.weekday <= 6:
            raise DataError(f"weekday {self.weekday} outside [0, 6]")


@dataclass
class StaticCnnParams:
    """Two 3x3 conv layers (1 -> 8 -> 8 channels), ReLU after each.

    Weights are stored im2col-style: row ``tap * c_in + cin`` of ``W``
    holds the kernel entry for that tap/input-channel pair, taps ordered
    as in ``CONV_TAPS``.
    """

    conv1: AffineParams
    conv2: AffineParams


def conv_patch_indices(height: int, width: int) -> np.ndarray:
    """Row-major pixel index of each 3x3 tap, -1 where out of bounds."""
    rows, cols = np.mgrid[0:height, 0:width]
    out = np.empty((9, height * width), dtype=np.int64)
    for t, (dr, dc) in enumerate(CONV_TAPS):
        r2 = rows + dr
        c2 = cols + dc
        ok = (r2 >= 0) & (r2 < height) & (c2 >= 0) & (c2 < width)
        idx = np.where(ok, r2 * width + c2, -1)
        out[t] = idx.ravel()
    return out


def _conv3x3(x: Tensor, params: AffineParams, patch_idx: np.ndarray) -> Tensor:
    # im2col built from the padded-gather primitive: out-of-bounds taps
    # read the implicit zero row, which is exactly zero padding
    cols = [T.gather_rows(x, patch_idx[t]) for t in range(9)]
    return T.relu(T.add_bias(T.matmul(T.concat(cols), params.W), params.b))


def static_cnn(street_map: np.ndarray, params: StaticCnnParams,
               patch_idx: np.ndarray | None = None) -> Tensor:
    """Static per-pixel features: [H*W, 8] rows in row-major pixel order.

    The raster is normalized by 255 before the two conv layers, so the
    map can be passed as raw uint8 intensities.
    """
    street_map = np.asarray(street_map)
    if street_map.ndim != 2:
        raise ShapeError(f"static_cnn: raster must be 2-D, got {street_map.shape}")
    h, w = street_map.shape
    if patch_idx is None:
        patch_idx = conv_patch_indices(h, w)
    x = Tensor(street_map.reshape(-1, 1).astype(np.float64) / 255.0)
    hidden = _conv3x3(x, params.conv1, patch_idx)
    return _conv3x3(hidden, params.conv2, patch_idx)


def init_node_features(movie: np.ndarray, start: int, graph: RoadGraph,
                       in_frames: int = 12) -> Tensor:
    """Seed-window node features: [N, in_frames * 8], scaled to [0, 1].

    Channels of frame ``start`` come first, then frame ``start + 1``, and
    so on.
    """
    if start < 0 or start + in_frames > len(movie):
        raise DataError(
            f"seed window [{start}, {start + in_frames}) outside movie of "
            f"{len(movie)} frames")
    window = movie[start:start + in_frames]
    rows = graph.positions[:, 0]
    cols = graph.positions[:, 1]
    vals = window[:, rows, cols, :].astype(np.float64) / 255.0
    return Tensor(np.ascontiguousarray(
        vals.transpose(1, 0, 2).reshape(graph.n_nodes, in_frames * 8)))


def init_edge_features(static_rows: Tensor, graph: RoadGraph) -> Tensor:
    """Per-edge [sender static features || receiver static features]."""
    pix = graph.pixel_ids()
    send = pix[graph.edges[:, 0]]
    recv = pix[graph.edges[:, 1]]
    return T.concat([T.gather_rows(static_rows, send),
                     T.gather_rows(static_rows, recv)])


def encode_time(minute: float) -> np.ndarray:
    """Circular time-of-day encoding [sin, cos] of 2*pi*minute/1440."""
    theta = 2.0 * np.pi * minute / 1440.0
    return np.array([np.sin(theta), np.cos(theta)])


def weekday_onehot(weekday: int) -> np.ndarray:
    out = np.zeros(7)
    out[weekday] = 1.0
    return out


def init_global(node_features: Tensor, ts: Timestamp) -> Tensor:
    """Global feature vector: damped node sum, time encoding, weekday."""
    summed = T.scale(T.sum_rows(node_features), NODE_SUM_DAMPING)
    extras = Tensor(np.concatenate([encode_time(ts.minute),
                                    weekday_onehot(ts.weekday)]))
    return T.concat([summed, extras])
