"""Tests for model assembly: config, parameters, checkpoints, forward
pass, rendering, and the mirror transport of parameters."""

import numpy as np
import pytest

from gunet.data import MIRROR_CHANNEL_PERM, mirror_movie
from gunet.errors import CheckpointError, GraphError, UsageError
from gunet.features import Timestamp
from gunet.model import (
    ModelConfig,
    ModelPlan,
    forward,
    init_model_params,
    load_checkpoint,
    mirror_params,
    named_tensors,
    params_from_named,
    predict_frames,
    read_config_file,
    render_to_raster,
    save_checkpoint,
    static_edge_features,
    write_config_file,
)
from gunet.tensor import read_named_tensors

MIRROR_TOL = 1e-6


def _cross_raster(h=6, w=6):
    m = np.zeros((h, w), dtype=np.uint8)
    m[h // 2, :] = 200
    m[:, w // 2] = 160
    return m


def _small_config(**kw):
    base = dict(depth=1, node_width=6, edge_width=5, global_width=7,
                in_frames=2, out_frames=2)
    base.update(kw)
    return ModelConfig(**base)


def _random_movie(rng, frames, h, w):
    return rng.integers(0, 256, size=(frames, h, w, 8)).astype(np.uint8)


def _randomize_head_and_biases(params, rng, scale=0.2):
    # the head starts at zero; give it (and the biases) generic values so
    # forward outputs are informative
    for name, t in named_tensors(params).items():
        if name.endswith(".b") or name.startswith("head."):
            t.data = rng.normal(0.0, scale, size=t.data.shape)


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(UsageError):
        ModelConfig(depth=0)
    with pytest.raises(UsageError):
        ModelConfig(node_width=0)
    with pytest.raises(UsageError):
        ModelConfig(channels=4)
    cfg = ModelConfig(depth=2)
    assert cfg.n_blocks == 9
    assert cfg.node_in_dim == 96
    assert cfg.out_dim == 48


def test_config_file_round_trip(tmp_path):
    cfg = ModelConfig(depth=2, node_width=12, edge_width=10, global_width=9,
                      in_frames=6, out_frames=3, directional=False,
                      clamp_output=True)
    path = tmp_path / "model.cfg"
    write_config_file(path, cfg)
    assert read_config_file(path) == cfg


def test_config_file_errors(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("depth = 2\nwobble = 3\n")
    with pytest.raises(UsageError, match="wobble"):
        read_config_file(path)
    path.write_text("depth\n")
    with pytest.raises(UsageError, match="key = value"):
        read_config_file(path)
    path.write_text("directional = maybe\n")
    with pytest.raises(UsageError, match="true or false"):
        read_config_file(path)
    path.write_text("# only a comment\n\ndepth = 1\n")
    assert read_config_file(path).depth == 1


# ---------------------------------------------------------------------------
# parameter naming


def test_named_tensor_set_depth1():
    cfg = _small_config()
    names = set(named_tensors(init_model_params(cfg)))
    expected = {
        "cnn.conv1.W", "cnn.conv1.b", "cnn.conv2.W", "cnn.conv2.b",
        "proj.node.W", "proj.node.b", "proj.edge.W", "proj.edge.b",
        "proj.global.W", "proj.global.b", "head.W", "head.b",
    }
    road = ("NE", "SE", "SW", "NW")
    for i, groups in enumerate((road, road, road + ("SELF",), road, road)):
        for g in groups:
            expected |= {f"block{i}.edge.{g}.W", f"block{i}.edge.{g}.b"}
        expected |= {f"block{i}.node.W", f"block{i}.node.b",
                     f"block{i}.global.W", f"block{i}.global.b"}
    assert names == expected


def test_named_tensor_set_non_directional():
    cfg = _small_config(directional=False)
    names = set(named_tensors(init_model_params(cfg)))
    assert "block0.edge.ALL.W" in names
    assert not any(".edge.NE." in n for n in names)


def test_init_is_deterministic():
    cfg = _small_config()
    a = named_tensors(init_model_params(cfg, seed=3))
    b = named_tensors(init_model_params(cfg, seed=3))
    c = named_tensors(init_model_params(cfg, seed=4))
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


# ---------------------------------------------------------------------------
# forward pass


def test_untrained_model_predicts_zero():
    cfg = _small_config()
    raster = _cross_raster()
    plan = ModelPlan(raster, cfg)
    params = init_model_params(cfg, seed=1)
    rng = np.random.default_rng(0)
    movie = _random_movie(rng, 8, 6, 6)
    out = forward(plan, params, movie, 0, Timestamp(60, 2))
    assert out.data.shape == (plan.graph.n_nodes, cfg.out_dim)
    assert np.all(out.data == 0.0)


def test_forward_deterministic_and_static_edge_equivalent():
    cfg = _small_config(depth=2)
    raster = _cross_raster(8, 8)
    plan = ModelPlan(raster, cfg)
    params = init_model_params(cfg, seed=5)
    rng = np.random.default_rng(1)
    _randomize_head_and_biases(params, rng)
    movie = _random_movie(rng, 6, 8, 8)
    a = forward(plan, params, movie, 2, Timestamp(300, 1))
    b = forward(plan, params, movie, 2, Timestamp(300, 1))
    assert np.array_equal(a.data, b.data)
    cached = static_edge_features(plan, params)
    c = forward(plan, params, movie, 2, Timestamp(300, 1), static_edge=cached)
    assert np.array_equal(a.data, c.data)


def test_output_shape_default_config():
    cfg = ModelConfig(depth=2, node_width=8, edge_width=8, global_width=8)
    raster = _cross_raster(8, 8)
    plan = ModelPlan(raster, cfg)
    params = init_model_params(cfg)
    rng = np.random.default_rng(2)
    movie = _random_movie(rng, 24, 8, 8)
    out = forward(plan, params, movie, 0, Timestamp(0, 0))
    assert out.data.shape == (plan.graph.n_nodes, 48)


def test_plan_rejects_overdeep_pooling():
    with pytest.raises(GraphError, match="too small to pool"):
        ModelPlan(np.array([[1, 1]], dtype=np.uint8), _small_config(depth=3))


# ---------------------------------------------------------------------------
# rendering


def test_render_to_raster_positions():
    raster = np.zeros((3, 4), dtype=np.uint8)
    raster[1, 2] = 5
    raster[2, 0] = 9
    from gunet.graph import build_road_graph
    g = build_road_graph(raster)
    vals = np.arange(2 * 2 * 8, dtype=np.float64).reshape(2, 16)
    frames = render_to_raster(vals, g, out_frames=2, channels=8)
    assert frames.shape == (2, 3, 4, 8)
    for node, (r, c) in enumerate(g.positions):
        per = vals[node].reshape(2, 8)
        assert np.array_equal(frames[:, r, c, :], per)
    untouched = np.ones((3, 4), dtype=bool)
    untouched[g.positions[:, 0], g.positions[:, 1]] = False
    assert np.all(frames[:, untouched, :] == 0.0)


def test_predict_frames_clamp():
    cfg = _small_config(clamp_output=True)
    raster = _cross_raster()
    plan = ModelPlan(raster, cfg)
    params = init_model_params(cfg, seed=2)
    params.head.b.data = np.full(cfg.out_dim, -3.0)
    rng = np.random.default_rng(3)
    movie = _random_movie(rng, 4, 6, 6)
    frames = predict_frames(plan, params, movie, 0, Timestamp(0, 0))
    assert np.all(frames == 0.0)  # negative head bias clamps away
    cfg2 = _small_config(clamp_output=False)
    plan2 = ModelPlan(raster, cfg2)
    params.head.b.data = np.full(cfg.out_dim, -3.0)
    frames2 = predict_frames(plan2, params, movie, 0, Timestamp(0, 0))
    street = raster > 0
    assert np.all(frames2[:, street, :] == -3.0)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bytes(tmp_path):
    cfg = _small_config()
    params = init_model_params(cfg, seed=9)
    p1 = tmp_path / "a.gunc"
    p2 = tmp_path / "b.gunc"
    save_checkpoint(p1, params)
    loaded, inferred = load_checkpoint(p1)
    save_checkpoint(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()
    assert inferred == ModelConfig(depth=cfg.depth, node_width=cfg.node_width,
                                   edge_width=cfg.edge_width,
                                   global_width=cfg.global_width,
                                   in_frames=cfg.in_frames,
                                   out_frames=cfg.out_frames)


def test_checkpoint_config_inference_non_directional(tmp_path):
    cfg = _small_config(depth=2, directional=False)
    path = tmp_path / "flat.gunc"
    save_checkpoint(path, init_model_params(cfg, seed=1))
    _, inferred = load_checkpoint(path)
    assert inferred.directional is False
    assert inferred.depth == 2


def test_checkpoint_rejects_wrong_config(tmp_path):
    cfg = _small_config()
    path = tmp_path / "dir.gunc"
    save_checkpoint(path, init_model_params(cfg, seed=1))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, _small_config(directional=False))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, _small_config(node_width=8))


def test_checkpoint_truncation_detected(tmp_path):
    cfg = _small_config()
    path = tmp_path / "full.gunc"
    save_checkpoint(path, init_model_params(cfg, seed=1))
    blob = path.read_bytes()
    cut = tmp_path / "cut.gunc"
    cut.write_bytes(blob[:len(blob) - 17])
    with pytest.raises(CheckpointError):
        load_checkpoint(cut)


def test_params_from_named_error_messages(tmp_path):
    cfg = _small_config()
    path = tmp_path / "m.gunc"
    save_checkpoint(path, init_model_params(cfg, seed=1))
    tensors = read_named_tensors(path)

    missing = dict(tensors)
    del missing["head.W"]
    with pytest.raises(CheckpointError, match="missing"):
        params_from_named(cfg, missing)

    extra = dict(tensors)
    extra["block9.node.W"] = np.zeros((2, 2))
    with pytest.raises(CheckpointError, match="unknown"):
        params_from_named(cfg, extra)

    wrong = dict(tensors)
    wrong["head.W"] = np.zeros((3, 3))
    with pytest.raises(CheckpointError, match="head.W"):
        params_from_named(cfg, wrong)


# ---------------------------------------------------------------------------
# mirror transport


def test_mirror_params_involution():
    cfg = _small_config(depth=2)
    params = init_model_params(cfg, seed=11)
    rng = np.random.default_rng(4)
    _randomize_head_and_biases(params, rng)
    twice = mirror_params(mirror_params(params, cfg), cfg)
    a = named_tensors(params)
    b = named_tensors(twice)
    assert set(a) == set(b)
    for name in a:
        assert np.array_equal(a[name].data, b[name].data), name


def test_mirror_params_end_to_end_equivariance():
    cfg = _small_config(depth=2)
    # depth-2 equivariance needs extents divisible by 4, so that the
    # pooled level still has even extents and windows reflect onto windows
    raster = _cross_raster(8, 12)
    rng = np.random.default_rng(6)
    movie = _random_movie(rng, 6, 8, 12)
    movie[:, raster == 0, :] = 0
    params = init_model_params(cfg, seed=13)
    _randomize_head_and_biases(params, rng)
    ts = Timestamp(495, 4)

    plan_a = ModelPlan(raster, cfg)
    out_a = forward(plan_a, params, movie, 1, ts)
    frames_a = render_to_raster(out_a.data, plan_a.graph, cfg.out_frames)

    raster_m = np.ascontiguousarray(raster[::-1, ::-1])
    plan_b = ModelPlan(raster_m, cfg)
    out_b = forward(plan_b, mirror_params(params, cfg), mirror_movie(movie),
                    1, ts)
    frames_b = render_to_raster(out_b.data, plan_b.graph, cfg.out_frames)

    expected = frames_a[:, ::-1, ::-1, :][..., MIRROR_CHANNEL_PERM]
    assert np.max(np.abs(frames_b - expected)) < MIRROR_TOL


def test_mirror_params_non_directional_identity_blocks():
    cfg = _small_config(directional=False)
    params = init_model_params(cfg, seed=3)
    mirrored = mirror_params(params, cfg)
    for blk_a, blk_b in zip(params.blocks, mirrored.blocks):
        assert blk_a is blk_b  # single shared transform is its own mirror


# ---------------------------------------------------------------------------
# receptive field


def test_receptive_field_without_global_is_local():
    cfg = _small_config(depth=2)
    h, w = 8, 32
    raster = np.zeros((h, w), dtype=np.uint8)
    raster[4, :] = 180  # one long street
    plan = ModelPlan(raster, cfg)
    params = init_model_params(cfg, seed=21)
    rng = np.random.default_rng(7)
    _randomize_head_and_biases(params, rng)

    movie = _random_movie(rng, 4, h, w)
    movie[:, raster == 0, :] = 0
    probe = plan.graph.node_index[(4, 0)]
    far = (4, 31)  # 31 grid steps from the probe, depth-2 reach is ~16
    ts = Timestamp(600, 2)

    base_local = forward(plan, params, movie, 0, ts, zero_global=True)
    base_full = forward(plan, params, movie, 0, ts)

    bumped = movie.copy()
    bumped[:, far[0], far[1], :] = 255 - bumped[:, far[0], far[1], :]
    bump_local = forward(plan, params, bumped, 0, ts, zero_global=True)
    bump_full = forward(plan, params, bumped, 0, ts)

    # without the global vector, a distant perturbation cannot reach the
    # probe node at all; through it, the change arrives in one hop
    assert np.array_equal(base_local.data[probe], bump_local.data[probe])
    assert np.max(np.abs(base_full.data[probe]
                         - bump_full.data[probe])) > 1e-12
    # the perturbed pixel itself must react in both modes
    far_node = plan.graph.node_index[far]
    assert not np.array_equal(base_local.data[far_node],
                              bump_local.data[far_node])
