"""U-Net of graph blocks over progressively pooled road graphs.

Pipeline for one forecasting sample::

    features -> input projections -> [block, skip, pool] x depth
             -> bottom block
             -> [upsample-block, concat skip, block, block] x depth
             -> affine head -> per-node predictions [N, out_frames*8]

The global vector is updated by every block (including the upsampling
passes); pooling reuses it unchanged.  Decoder passes start from zero
edge features on the skip graph.  All block/projection/head parameters
live in a flat named-tensor namespace that round-trips bit-exactly
through the ``GUNC`` checkpoint format.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from gunet import tensor as T
from gunet.data import MIRROR_CHANNEL_PERM
from gunet.errors import CheckpointError, GraphError, UsageError
from gunet.features import (GLOBAL_EXTRA_DIMS, StaticCnnParams, Timestamp,
                            conv_patch_indices, init_edge_features,
                            init_global, init_node_features, static_cnn)
from gunet.gnblock import (ROAD_GROUPS, UPSAMPLING_GROUPS, GnBlockParams,
                           edge_structure, gn_forward, make_block_params,
                           mirror_block_params)
from gunet.graph import RoadGraph, build_road_graph
from gunet.resample import (build_upsampling_graph, pool, pool_plan,
                            upsampling_structure)
from gunet.tensor import AffineParams, Tensor

__all__ = [
    "ModelConfig", "ModelParams", "ModelPlan", "init_model_params",
    "static_edge_features", "forward", "predict_frames", "render_to_raster",
    "named_tensors", "params_from_named", "save_checkpoint",
    "load_checkpoint", "mirror_params", "read_config_file",
    "write_config_file",
]


@dataclass
class ModelConfig:
    """Architecture knobs; the defaults match the reference setup."""

    depth: int = 3
    node_width: int = 32
    edge_width: int = 32
    global_width: int = 32
    in_frames: int = 12
    out_frames: int = 6
    channels: int = 8
    directional: bool = True
    clamp_output: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise UsageError(f"depth must be >= 1, got {self.depth}")
        for fname in ("node_width", "edge_width", "global_width",
                      "in_frames", "out_frames"):
            if getattr(self, fname) < 1:
                raise UsageError(f"{fname} must be >= 1")
        if self.channels != 8:
            raise UsageError("channel count is fixed at 8 by the movie format")

    @property
    def node_in_dim(self) -> int:
        return self.in_frames * self.channels

    @property
    def out_dim(self) -> int:
        return self.out_frames * self.channels

    @property
    def n_blocks(self) -> int:
        # encoder blocks, bottom block, then (upsample + 2 decoder) per level
        return 4 * self.depth + 1


_CONFIG_FIELDS = ("depth", "node_width", "edge_width", "global_width",
                  "in_frames", "out_frames", "channels", "directional",
                  "clamp_output")


def read_config_file(path) -> ModelConfig:
    """Parse ``key = value`` lines into a ModelConfig."""
    values = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_FIELDS:
            raise UsageError(f"{path}:{ln}: unknown config key {key!r}")
        if key in ("directional", "clamp_output"):
            if val.lower() not in ("true", "false"):
                raise UsageError(f"{path}:{ln}: {key} must be true or false")
            values[key] = val.lower() == "true"
        else:
            values[key] = int(val)
    return ModelConfig(**values)


def write_config_file(path, config: ModelConfig) -> None:
    lines = []
    for key in _CONFIG_FIELDS:
        val = getattr(config, key)
        lines.append(f"{key} = {str(val).lower() if isinstance(val, bool) else val}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


# ---------------------------------------------------------------------------
# parameters


@dataclass(eq=False)
class ModelParams:
    cnn: StaticCnnParams
    proj_node: AffineParams
    proj_edge: AffineParams
    proj_global: AffineParams
    blocks: list
    head: AffineParams


def _block_specs(config: ModelConfig):
    """(v_in, e_in, groups) of every block in pipeline order."""
    d_v, d_e = config.node_width, config.edge_width
    road = ROAD_GROUPS
    specs = [(d_v, d_e, road) for _ in range(config.depth)]  # encoder
    specs.append((d_v, d_e, road))  # bottom
    for _ in reversed(range(config.depth)):
        specs.append((d_v, d_e, UPSAMPLING_GROUPS))  # upsampling pass
        specs.append((2 * d_v, d_e, road))  # decoder a (sees skip concat)
        specs.append((d_v, d_e, road))  # decoder b
    return specs


# He-normal assumes unit-variance independent inputs, but two input groups
# break that badly: aggregate rows consume sums of nonnegative relu outputs
# (which grow with degree, not sqrt(degree)), and global-transform rows
# consume whole-graph sums (which grow with graph size).  Damping those rows
# at init keeps activations near unit scale through the full pipeline; it
# changes no forward semantics, only the starting point.
AGG_INIT_GAIN = 0.5
GLOBAL_SUM_INIT_GAIN = 0.01


def init_model_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Seeded He-normal initialization; the head starts at exactly zero,
    so an untrained model predicts all zeros."""
    rng = np.random.default_rng(seed)

    def affine(fan_in, fan_out, zero=False):
        if zero:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        return AffineParams(Tensor(w, requires_grad=True),
                            Tensor(np.zeros(fan_out), requires_grad=True))

    cnn = StaticCnnParams(conv1=affine(9, 8), conv2=affine(72, 8))
    proj_node = affine(config.node_in_dim, config.node_width)
    proj_edge = affine(16, config.edge_width)
    proj_global = affine(config.node_in_dim + GLOBAL_EXTRA_DIMS,
                         config.global_width)
    blocks = []
    for v_in, e_in, groups in _block_specs(config):
        block = make_block_params(rng, v_in, e_in, config.node_width,
                                  config.edge_width, config.global_width,
                                  config.directional, groups=groups)
        n_groups = len(block.groups)
        agg = slice(v_in, v_in + n_groups * config.edge_width)
        block.node.W.data[agg] *= AGG_INIT_GAIN
        block.glob.W.data[config.global_width:] *= GLOBAL_SUM_INIT_GAIN
        blocks.append(block)
    head = affine(config.node_width, config.out_dim, zero=True)
    return ModelParams(cnn, proj_node, proj_edge, proj_global, blocks, head)


def named_tensors(params: ModelParams) -> dict:
    """Flat name -> Tensor view of every trainable parameter."""
    out = {
        "cnn.conv1.W": params.cnn.conv1.W, "cnn.conv1.b": params.cnn.conv1.b,
        "cnn.conv2.W": params.cnn.conv2.W, "cnn.conv2.b": params.cnn.conv2.b,
        "proj.node.W": params.proj_node.W, "proj.node.b": params.proj_node.b,
        "proj.edge.W": params.proj_edge.W, "proj.edge.b": params.proj_edge.b,
        "proj.global.W": params.proj_global.W,
        "proj.global.b": params.proj_global.b,
        "head.W": params.head.W, "head.b": params.head.b,
    }
    for i, block in enumerate(params.blocks):
        for name in block.groups:
            out[f"block{i}.edge.{name}.W"] = block.edge[name].W
            out[f"block{i}.edge.{name}.b"] = block.edge[name].b
        out[f"block{i}.node.W"] = block.node.W
        out[f"block{i}.node.b"] = block.node.b
        if block.glob is not None:
            out[f"block{i}.global.W"] = block.glob.W
            out[f"block{i}.global.b"] = block.glob.b
    return out


def params_from_named(config: ModelConfig, tensors: dict) -> ModelParams:
    """Rebuild ModelParams from a flat dict, validating names and shapes."""
    template = init_model_params(config, seed=0)
    expected = named_tensors(template)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {missing[:5]}"
                              + ("..." if len(missing) > 5 else ""))
    unknown = sorted(set(tensors) - set(expected))
    if unknown:
        raise CheckpointError(f"checkpoint has unknown tensors: {unknown[:5]}"
                              + ("..." if len(unknown) > 5 else ""))
    for name, slot in expected.items():
        arr = np.asarray(tensors[name], dtype=np.float64)
        if arr.shape != slot.data.shape:
            raise CheckpointError(
                f"checkpoint tensor '{name}' has shape {arr.shape}, "
                f"config implies {slot.data.shape}")
        slot.data = np.ascontiguousarray(arr)
    return template


def save_checkpoint(path, params: ModelParams) -> None:
    T.write_named_tensors(path,
                          {k: v.data for k, v in named_tensors(params).items()})


def _infer_config(tensors: dict) -> ModelConfig:
    def shape(name):
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing tensor '{name}'")
        return tensors[name].shape

    if "block0.edge.NE.W" in tensors:
        directional = True
    elif "block0.edge.ALL.W" in tensors:
        directional = False
    else:
        raise CheckpointError("checkpoint has no block0 edge transform")
    n_blocks = 0
    while f"block{n_blocks}.node.W" in tensors:
        n_blocks += 1
    if n_blocks < 5 or (n_blocks - 1) % 4:
        raise CheckpointError(f"checkpoint block count {n_blocks} does not "
                              "form an encoder/decoder stack")
    node_in, node_width = shape("proj.node.W")
    if node_in % 8:
        raise CheckpointError(f"proj.node.W rows {node_in} not divisible by 8")
    return ModelConfig(
        depth=(n_blocks - 1) // 4,
        node_width=node_width,
        edge_width=shape("proj.edge.W")[1],
        global_width=shape("proj.global.W")[1],
        in_frames=node_in // 8,
        out_frames=shape("head.W")[1] // 8,
        directional=directional,
    )


def load_checkpoint(path, config: Optional[ModelConfig] = None):
    """Load a checkpoint; returns ``(params, config)``.

    Without an explicit config the architecture is inferred from tensor
    names and shapes (clamp_output falls back to its default).  With one,
    the checkpoint must match it exactly.
    """
    tensors = T.read_named_tensors(path)
    inferred = _infer_config(tensors)
    if config is None:
        config = inferred
    return params_from_named(config, tensors), config


# ---------------------------------------------------------------------------
# per-city static plan


class ModelPlan:
    """Everything derivable from the street map alone: the graph pyramid,
    upsampling graphs, edge partitions, and conv patch indices."""

    def __init__(self, street_map: np.ndarray, config: ModelConfig,
                 adjacency: int = 8):
        self.config = config
        self.street_map = np.asarray(street_map)
        self.height, self.width = self.street_map.shape
        self.graphs = [build_road_graph(self.street_map, adjacency)]
        self.pools = []
        for level in range(config.depth):
            g = self.graphs[-1]
            if max(g.height, g.width) < 2:
                raise GraphError(
                    f"graph too small to pool {config.depth} times "
                    f"(level {level} is {g.height}x{g.width})")
            plan = pool_plan(g)
            self.pools.append(plan)
            self.graphs.append(plan.graph)
        self.ups = [build_upsampling_graph(self.graphs[lv + 1], self.graphs[lv])
                    for lv in range(config.depth)]
        self.structures = [
            edge_structure(g.n_nodes, g.edges[:, 0], g.edges[:, 1],
                           g.edge_quadrant, config.directional)
            for g in self.graphs]
        self.ups_structures = [upsampling_structure(ug, config.directional)
                               for ug in self.ups]
        self.patch_idx = conv_patch_indices(self.height, self.width)

    @property
    def graph(self) -> RoadGraph:
        return self.graphs[0]


def static_edge_features(plan: ModelPlan, params: ModelParams) -> Tensor:
    """Projected edge features from the static map.

    Independent of the sample, so a training step can compute this once
    and share the subgraph across its whole batch.
    """
    rows = static_cnn(plan.street_map, params.cnn, plan.patch_idx)
    e0 = init_edge_features(rows, plan.graph)
    return T.add_bias(T.matmul(e0, params.proj_edge.W), params.proj_edge.b)


def forward(plan: ModelPlan, params: ModelParams, movie: np.ndarray,
            start: int, ts: Timestamp, *, static_edge: Optional[Tensor] = None,
            zero_global: bool = False) -> Tensor:
    """Predictions for one sample: Tensor of shape [N, out_frames*8].

    ``zero_global`` is a diagnostic mode that forces the global vector to
    zero before every block, cutting all information flow through it (the
    remaining receptive field is purely graph-local).
    """
    cfg = plan.config
    V0 = init_node_features(movie, start, plan.graph, cfg.in_frames)
    V = T.add_bias(T.matmul(V0, params.proj_node.W), params.proj_node.b)
    E = static_edge if static_edge is not None else \
        static_edge_features(plan, params)

    zero_u = Tensor(np.zeros(cfg.global_width))
    if zero_global:
        u = zero_u
    else:
        u0 = init_global(V0, ts)
        u = T.add_bias(T.matmul(u0, params.proj_global.W),
                       params.proj_global.b)

    idx = 0
    skips = []
    for level in range(cfg.depth):
        V, E, u = gn_forward(plan.structures[level], V, E, u,
                             params.blocks[idx])
        idx += 1
        if zero_global:
            u = zero_u
        skips.append(V)
        _, V, E = pool(plan.graphs[level], V, E, plan=plan.pools[level])

    V, E, u = gn_forward(plan.structures[cfg.depth], V, E, u,
                         params.blocks[idx])
    idx += 1
    if zero_global:
        u = zero_u

    for level in reversed(range(cfg.depth)):
        ug = plan.ups[level]
        n = ug.n_inputs + ug.n_targets
        v_comb = T.scatter_rows(V, np.arange(ug.n_inputs, dtype=np.int64), n)
        e_zero = Tensor(np.zeros((len(ug.senders), cfg.edge_width)))
        v_all, _, u = gn_forward(plan.ups_structures[level], v_comb, e_zero,
                                 u, params.blocks[idx])
        idx += 1
        if zero_global:
            u = zero_u
        V = T.gather_rows(v_all, ug.n_inputs
                          + np.arange(ug.n_targets, dtype=np.int64))
        V = T.concat([skips[level], V])
        E = Tensor(np.zeros((plan.graphs[level].n_edges, cfg.edge_width)))
        for _ in range(2):
            V, E, u = gn_forward(plan.structures[level], V, E, u,
                                 params.blocks[idx])
            idx += 1
            if zero_global:
                u = zero_u

    return T.add_bias(T.matmul(V, params.head.W), params.head.b)


def render_to_raster(node_values: np.ndarray, graph: RoadGraph,
                     out_frames: int = 6, channels: int = 8) -> np.ndarray:
    """Scatter per-node predictions back onto dense frames.

    Returns float [out_frames, H, W, channels]; non-street pixels are 0.
    """
    node_values = np.asarray(node_values)
    out = np.zeros((out_frames, graph.height, graph.width, channels))
    per_frame = node_values.reshape(graph.n_nodes, out_frames, channels)
    out[:, graph.positions[:, 0], graph.positions[:, 1], :] = \
        per_frame.transpose(1, 0, 2)
    return out


def predict_frames(plan: ModelPlan, params: ModelParams, movie: np.ndarray,
                   start: int, ts: Timestamp) -> np.ndarray:
    """Rendered normalized prediction frames for one sample."""
    preds = forward(plan, params, movie, start, ts)
    frames = render_to_raster(preds.data, plan.graph,
                              plan.config.out_frames, plan.config.channels)
    if plan.config.clamp_output:
        frames = np.clip(frames, 0.0, 1.0)
    return frames


# ---------------------------------------------------------------------------
# mirror transport of parameters


def _frame_channel_perm(n_frames: int) -> np.ndarray:
    return np.concatenate([f * 8 + MIRROR_CHANNEL_PERM
                           for f in range(n_frames)])


def mirror_params(params: ModelParams, config: ModelConfig) -> ModelParams:
    """Parameters that make the model act on point-reflected cities.

    Quadrant-indexed block parameters permute by the reflection, conv
    kernels are rotated 180 degrees, and the projections/head rows and
    columns tied to heading channels follow the channel swap.  Running
    the result on a mirrored city reproduces the original predictions,
    mirrored.
    """
    def tensor_like(arr, like):
        return Tensor(np.ascontiguousarray(arr),
                      requires_grad=like.requires_grad)

    def rot180(aff: AffineParams, c_in: int) -> AffineParams:
        w = aff.W.data
        blocks = w.reshape(9, c_in, w.shape[1])[::-1]
        return AffineParams(tensor_like(blocks.reshape(w.shape), aff.W), aff.b)

    in_perm = _frame_channel_perm(config.in_frames)
    out_perm = _frame_channel_perm(config.out_frames)
    glob_perm = np.concatenate([
        in_perm, config.node_in_dim + np.arange(GLOBAL_EXTRA_DIMS)])

    cnn = StaticCnnParams(conv1=rot180(params.cnn.conv1, 1),
                          conv2=rot180(params.cnn.conv2, 8))
    proj_node = AffineParams(
        tensor_like(params.proj_node.W.data[in_perm], params.proj_node.W),
        params.proj_node.b)
    proj_global = AffineParams(
        tensor_like(params.proj_global.W.data[glob_perm],
                    params.proj_global.W),
        params.proj_global.b)
    head = AffineParams(
        tensor_like(params.head.W.data[:, out_perm], params.head.W),
        tensor_like(params.head.b.data[out_perm], params.head.b))
    blocks = [mirror_block_params(b) for b in params.blocks]
    return ModelParams(cnn, proj_node, params.proj_edge, proj_global,
                       blocks, head)
