"""Benchmark the segment-reduction kernels: compiled extension vs numpy.

The hot path of every block update is a handful of segment reductions
over edge arrays, so this compares the two backends on road graphs of
increasing size, then times one full model forward+backward pass under
each backend (in subprocesses, since the backend is fixed at import).

Usage:
    python3 benchmarks/bench_kernels.py [--repeats N] [--iters N]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from gunet.data import synth_city
from gunet.graph import build_road_graph

KERNELS = ("segment_sum", "segment_max", "index_add", "max_grad_scatter")


def _load_backends():
    from gunet import _kernels_py
    backends = {"python": _kernels_py}
    try:
        from gunet import _ckernels
        backends[_ckernels.BACKEND] = _ckernels
    except ImportError:
        print("note: compiled extension not built, benchmarking numpy only")
    return backends


def _workload(rng, side, width):
    """Edge->node reduction shapes taken from a real road graph."""
    city = synth_city(seed=1, height=side, width=side, days=1)
    g = build_road_graph(city.street_map)
    values = rng.standard_normal((g.n_edges, width))
    segments = np.ascontiguousarray(g.edges[:, 1])
    grad = rng.standard_normal((g.n_nodes, width))
    return g, values, segments, grad


def _best_of(fn, repeats, iters):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(iters):
            fn()
        best = min(best, (time.perf_counter() - t0) / iters)
    return best


def bench_kernels(repeats, iters):
    backends = _load_backends()
    rng = np.random.default_rng(0)
    print(f"{'case':<34}" + "".join(f"{name:>12}" for name in backends)
          + ("     speedup" if len(backends) == 2 else ""))
    for side, width in [(16, 16), (32, 16), (32, 32), (64, 32)]:
        g, values, segments, grad = _workload(rng, side, width)
        calls = {
            "segment_sum": lambda m: m.segment_sum(values, segments,
                                                   g.n_nodes),
            "segment_max": lambda m: m.segment_max(values, segments,
                                                   g.n_nodes),
            "index_add": lambda m: m.index_add(
                np.zeros((g.n_nodes, width)), segments, values),
            "max_grad_scatter": lambda m: m.max_grad_scatter(
                grad, m.segment_max(values, segments, g.n_nodes)[1],
                len(values)),
        }
        for kernel in KERNELS:
            label = f"{kernel} {side}x{side}/{g.n_edges}e w={width}"
            times = [_best_of(lambda m=mod: calls[kernel](m), repeats, iters)
                     for mod in backends.values()]
            row = f"{label:<34}" + "".join(f"{t * 1e6:>10.1f}us"
                                           for t in times)
            if len(times) == 2:
                row += f"{times[0] / times[1]:>11.1f}x"
            print(row)

        # the backends must agree before their speed is comparable
        ref = None
        for mod in backends.values():
            out = mod.segment_max(values, segments, g.n_nodes)
            ref = out if ref is None else ref
            assert np.array_equal(ref[0], out[0])
            assert np.array_equal(ref[1], out[1])


def _model_pass():
    """One training-style step, timed; runs under whatever backend got
    selected at import (the parent pins it through the environment)."""
    from gunet.features import Timestamp
    from gunet.kernels import BACKEND
    from gunet.model import (ModelConfig, ModelPlan, forward,
                             init_model_params, named_tensors)
    from gunet import tensor as T
    from gunet.tensor import Tensor

    rng = np.random.default_rng(3)
    city = synth_city(seed=1, height=32, width=32, days=1)
    config = ModelConfig(depth=2, node_width=16, edge_width=16,
                         global_width=16)
    plan = ModelPlan(city.street_map, config)
    params = init_model_params(config, seed=3)
    target = Tensor(rng.random((plan.graph.n_nodes, config.out_dim)))
    ts = Timestamp(8 * 60, 1)

    def step():
        loss = T.squared_error(
            forward(plan, params, city.movies[0], 0, ts), target)
        T.backward(loss)
        for t in named_tensors(params).values():
            t.grad = None

    step()  # warm up plan caches
    t0 = time.perf_counter()
    n = 5
    for _ in range(n):
        step()
    per = (time.perf_counter() - t0) / n
    print(f"model fwd+bwd (32x32, depth 2, w16) [{BACKEND}]: "
          f"{per * 1e3:.1f} ms/step")


def bench_model():
    sys.stdout.flush()  # keep parent output ahead of subprocess output
    for env_value in ("", "1"):
        env = dict(os.environ)
        env.pop("GUNET_PURE_PYTHON", None)
        if env_value:
            env["GUNET_PURE_PYTHON"] = env_value
        subprocess.run([sys.executable, __file__, "--model-pass"],
                       env=env, check=True)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--iters", type=int, default=20)
    ap.add_argument("--model-pass", action="store_true",
                    help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.model_pass:
        _model_pass()
        return
    bench_kernels(args.repeats, args.iters)
    print()
    bench_model()


if __name__ == "__main__":
    main()
