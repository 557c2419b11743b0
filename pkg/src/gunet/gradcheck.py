"""Finite-difference gradient checks.

Every differentiable building block is checked against central finite
differences (h=1e-6, float64): each primitive on random small shapes,
the static-map CNN, a directional graph block, pooling, upsampling, and
a full depth-2 model on a 6x6 synthetic city.  The suites are shared by
the test suite and the ``gradcheck`` CLI subcommand.

Relative error is ``linf(analytic - fd) / max(1, linf(analytic),
linf(fd))``; tolerance is 1e-5 for units and 1e-4 end-to-end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gunet import tensor as T
from gunet.features import (StaticCnnParams, Timestamp, conv_patch_indices,
                            static_cnn)
from gunet.gnblock import edge_structure, gn_forward, make_block_params
from gunet.graph import build_road_graph
from gunet.model import (ModelConfig, ModelPlan, forward, init_model_params,
                         named_tensors)
from gunet.resample import build_upsampling_graph, pool, pool_plan, upsample
from gunet.tensor import Tensor, backward

__all__ = ["CheckResult", "SUITES", "run_suite", "run_all",
           "UNIT_TOL", "MODEL_TOL"]

UNIT_TOL = 1e-5
MODEL_TOL = 1e-4
FD_STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.rel_err <= self.tol


def _fd_gradient(loss_fn, tensor: Tensor, h: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(tensor.data)
    flat, gflat = tensor.data.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = float(loss_fn().data)
        flat[i] = saved - h
        dn = float(loss_fn().data)
        flat[i] = saved
        gflat[i] = (up - dn) / (2.0 * h)
    return grad


def _compare(name: str, loss_fn, tensors: dict, tol: float) -> CheckResult:
    """Analytic vs finite-difference gradients for one scalar loss."""
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    backward(loss_fn())
    worst = 0.0
    for t in tensors.values():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        fd = _fd_gradient(loss_fn, t)
        scale = max(1.0, float(np.abs(analytic).max(initial=0.0)),
                    float(np.abs(fd).max(initial=0.0)))
        worst = max(worst, float(np.abs(analytic - fd).max(initial=0.0)) / scale)
    return CheckResult(name, worst, tol)


def _away_from_zero(rng, shape, gap=0.2):
    """Random values with |x| >= gap so relu kinks stay out of FD reach."""
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return sign * rng.uniform(gap, 1.0, shape)


def _sq(x: Tensor) -> Tensor:
    return T.sum_all(T.multiply(x, x))


# ---------------------------------------------------------------------------
# primitive suite


def check_primitives(seed: int = 0):
    rng = np.random.default_rng(seed)
    results = []

    def case(name, loss_fn, tensors):
        results.append(_compare(name, loss_fn, tensors, UNIT_TOL))

    x = Tensor(rng.normal(size=(4, 3)))
    w = Tensor(rng.normal(size=(3, 5)))
    case("matmul", lambda: _sq(T.matmul(x, w)), {"x": x, "w": w})

    v = Tensor(rng.normal(size=3))
    case("matmul_vec", lambda: _sq(T.matmul(v, w)), {"v": v, "w": w})

    a, b = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))
    case("add", lambda: _sq(T.add(a, b)), {"a": a, "b": b})
    case("multiply", lambda: _sq(T.multiply(a, b)), {"a": a, "b": b})
    case("scale", lambda: _sq(T.scale(a, -0.73)), {"a": a})

    bias = Tensor(rng.normal(size=3))
    case("add_bias", lambda: _sq(T.add_bias(a, bias)), {"a": a, "bias": bias})

    r = Tensor(_away_from_zero(rng, (5, 4)))
    case("relu", lambda: _sq(T.relu(r)), {"r": r})

    c1, c2 = Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=(4, 3)))
    case("concat", lambda: _sq(T.concat([c1, c2])), {"c1": c1, "c2": c2})

    g = Tensor(rng.normal(size=(5, 3)))
    idx = np.array([0, 2, 2, -1, 4, 1], dtype=np.int64)
    case("gather_rows", lambda: _sq(T.gather_rows(g, idx)), {"g": g})

    s = Tensor(rng.normal(size=(4, 3)))
    sidx = np.array([5, 0, 0, 2], dtype=np.int64)
    case("scatter_rows", lambda: _sq(T.scatter_rows(s, sidx, 6)), {"s": s})

    br = Tensor(rng.normal(size=4))
    case("broadcast_rows", lambda: _sq(T.broadcast_rows(br, 5)), {"br": br})

    seg = np.array([1, 0, -1, 1, 2, 1], dtype=np.int64)
    ss = Tensor(rng.normal(size=(6, 3)))
    case("segment_sum", lambda: _sq(T.segment_sum(ss, seg, 3)), {"ss": ss})

    # distinct values so no FD step can flip an argmax
    vals = rng.permutation(6 * 3).astype(np.float64).reshape(6, 3) * 0.1
    sm = Tensor(vals)
    case("segment_max", lambda: _sq(T.segment_max(sm, seg, 3)), {"sm": sm})

    case("sum_rows", lambda: _sq(T.sum_rows(a)), {"a": a})
    case("sum_all", lambda: T.sum_all(T.multiply(a, a)), {"a": a})
    case("mean_all", lambda: T.scale(T.mean_all(T.multiply(a, b)), 3.0),
         {"a": a, "b": b})

    p, q = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))
    case("squared_error", lambda: T.squared_error(p, q), {"p": p, "q": q})
    return results


# ---------------------------------------------------------------------------
# component suites


def _small_street_map(rng=None) -> np.ndarray:
    """Deterministic 6x6 street cross with a spur; intensities vary."""
    m = np.zeros((6, 6), dtype=np.uint8)
    m[2, :] = 180
    m[:, 3] = 140
    m[4, 1] = 90
    m[3, 1] = 90
    return m


def check_cnn(seed: int = 0):
    rng = np.random.default_rng(seed)
    street = _small_street_map()
    params = StaticCnnParams(
        conv1=T.AffineParams(Tensor(rng.normal(0, 0.4, (9, 8))),
                             Tensor(rng.normal(0, 0.2, 8))),
        conv2=T.AffineParams(Tensor(rng.normal(0, 0.3, (72, 8))),
                             Tensor(rng.normal(0, 0.2, 8))))
    patch = conv_patch_indices(6, 6)
    tensors = {"conv1.W": params.conv1.W, "conv1.b": params.conv1.b,
               "conv2.W": params.conv2.W, "conv2.b": params.conv2.b}
    return [_compare("static_cnn",
                     lambda: _sq(static_cnn(street, params, patch)),
                     tensors, UNIT_TOL)]


def _block_case(rng, directional=True):
    street = _small_street_map()
    graph = build_road_graph(street)
    structure = edge_structure(graph.n_nodes, graph.edges[:, 0],
                               graph.edges[:, 1], graph.edge_quadrant,
                               directional)
    d_v, d_e, d_u = 4, 3, 5
    V = Tensor(rng.normal(size=(graph.n_nodes, d_v)))
    E = Tensor(rng.normal(size=(graph.n_edges, d_e)))
    u = Tensor(rng.normal(size=d_u))
    params = make_block_params(rng, d_v, d_e, d_v, d_e, d_u, directional)
    return structure, V, E, u, params


def check_gnblock(seed: int = 0):
    rng = np.random.default_rng(seed)
    structure, V, E, u, params = _block_case(rng)

    def loss():
        v2, e2, u2 = gn_forward(structure, V, E, u, params)
        return T.add(T.add(_sq(v2), _sq(e2)), _sq(u2))

    tensors = {"V": V, "E": E, "u": u}
    for name, aff in params.edge.items():
        tensors[f"edge.{name}.W"] = aff.W
        tensors[f"edge.{name}.b"] = aff.b
    tensors.update({"node.W": params.node.W, "node.b": params.node.b,
                    "global.W": params.glob.W, "global.b": params.glob.b})
    return [_compare("gn_block", loss, tensors, UNIT_TOL)]


def check_pool(seed: int = 0):
    rng = np.random.default_rng(seed)
    graph = build_road_graph(_small_street_map())
    plan = pool_plan(graph)
    # distinct entries keep every segment argmax stable under FD steps
    V = Tensor(rng.permutation(graph.n_nodes * 4).astype(np.float64)
               .reshape(graph.n_nodes, 4) * 0.1)
    E = Tensor(rng.permutation(graph.n_edges * 3).astype(np.float64)
               .reshape(graph.n_edges, 3) * 0.1)

    def loss():
        _, v2, e2 = pool(graph, V, E, plan=plan)
        return T.add(_sq(v2), _sq(e2))

    return [_compare("pool", loss, {"V": V, "E": E}, UNIT_TOL)]


def check_upsample(seed: int = 0):
    rng = np.random.default_rng(seed)
    fine = build_road_graph(_small_street_map())
    coarse = pool_plan(fine).graph
    ug = build_upsampling_graph(coarse, fine)
    d_v, d_e, d_u = 4, 3, 5
    V = Tensor(rng.normal(size=(coarse.n_nodes, d_v)))
    u = Tensor(rng.normal(size=d_u))
    params = make_block_params(rng, d_v, d_e, d_v, d_e, d_u,
                               directional=True,
                               groups=("NE", "SE", "SW", "NW", "SELF"))

    def loss():
        return _sq(upsample(ug, V, u, params))

    tensors = {"V": V, "u": u}
    for name, aff in params.edge.items():
        tensors[f"edge.{name}.W"] = aff.W
    tensors["node.W"] = params.node.W
    tensors["global.W"] = params.glob.W
    return [_compare("upsample", loss, tensors, UNIT_TOL)]


def check_model(seed: int = 0):
    """End-to-end: every parameter of a depth-2 model on a 6x6 city."""
    rng = np.random.default_rng(seed)
    street = _small_street_map()
    config = ModelConfig(depth=2, node_width=4, edge_width=3, global_width=4)
    plan = ModelPlan(street, config)
    params = init_model_params(config, seed=seed)
    # Evaluate at a generic point: the default init zeroes the head (which
    # would zero every upstream gradient) and all biases (which parks relu
    # pre-activations exactly on their kink wherever inputs are zero, e.g.
    # the fresh edge features of a decoder level -- there the directional
    # derivative is one-sided and no subgradient convention matches FD).
    params.head.W.data = rng.normal(0.0, 0.3, params.head.W.data.shape)
    for name, t in named_tensors(params).items():
        if name.endswith(".b"):
            t.data = rng.normal(0.0, 0.15, t.data.shape)

    movie = rng.integers(0, 256, size=(24, 6, 6, 8)).astype(np.uint8)
    ts = Timestamp(9 * 60, 4)
    target = Tensor(rng.random((plan.graph.n_nodes, config.out_dim)))

    def loss():
        return T.squared_error(forward(plan, params, movie, 0, ts), target)

    return [_compare("model", loss, named_tensors(params), MODEL_TOL)]


SUITES = {
    "primitives": check_primitives,
    "cnn": check_cnn,
    "gnblock": check_gnblock,
    "pool": check_pool,
    "upsample": check_upsample,
    "model": check_model,
}


def run_suite(name: str, seed: int = 0):
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name](seed)


def run_all(seed: int = 0, modules=None):
    results = []
    for name in (modules or SUITES):
        results.extend(run_suite(name, seed))
    return results
