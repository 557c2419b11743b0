"""Direction-aware graph-network U-Net for traffic forecasting.

Turns rasterized road maps into directed graphs whose edges are grouped
by compass quadrant, runs an encoder/decoder stack of edge-node-global
update blocks over them, and trains the whole thing with a small
built-in float64 autodiff engine.  See the README for the CLI tour.
"""

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "RoadGraph", "Quadrant", "build_road_graph",
    "classify_edge", "mirror_graph", "ModelConfig", "ModelPlan",
    "init_model_params", "forward", "save_checkpoint", "load_checkpoint",
    "synth_city", "load_city", "save_city",
]


def __getattr__(name):
    # lazy imports keep `import gunet` cheap and cycle-free
    if name in ("Tensor", "backward"):
        from gunet import tensor
        return getattr(tensor, name)
    if name in ("RoadGraph", "Quadrant", "build_road_graph", "classify_edge",
                "mirror_graph"):
        from gunet import graph
        return getattr(graph, name)
    if name in ("ModelConfig", "ModelPlan", "init_model_params", "forward",
                "save_checkpoint", "load_checkpoint"):
        from gunet import model
        return getattr(model, name)
    if name in ("synth_city", "load_city", "save_city"):
        from gunet import data
        return getattr(data, name)
    raise AttributeError(f"module 'gunet' has no attribute {name!r}")
