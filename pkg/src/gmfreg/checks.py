"""Float64 gradient checks for every layer and for the composed network."""

from __future__ import annotations

from types import SimpleNamespace
from typing import Callable

import numpy as np

from . import diffcore as dc
from .geometry import CorrespondenceSet
from .gmf import (
    GmfConfig,
    encode_correspondences_graph,
    encode_image_graph,
    forward_graph,
    fusion1,
    fusion2,
    head_logits,
    image_tokens,
    init_params,
    lcpe,
)

LAYERS = ("group_conv1d", "lcpe", "fusion1", "fusion2", "encoders", "head", "bce", "network")
TOLERANCE = 1e-4
# parameter spread at the random check points; wide enough that gradients sit
# well above finite-difference roundoff, narrow enough to avoid saturation
POINT_SCALE = 0.4
FD_STEP = 1e-5
FD_LADDER = (100.0, 10.0, 1.0)

_CFG = GmfConfig(c_i=8, c_p=8, k=3, head_hidden=4)
_H = _W = 16
_M_P = 6


def _with_prefix(arrays: dict, *prefixes: str) -> dict:
    return {k: v for k, v in arrays.items() if k.startswith(prefixes)}


def _problem(layer: str, rng: np.random.Generator):
    """Build ``(f, params)`` for one layer at a fresh random point."""
    shapes = init_params(_CFG).arrays
    rand = lambda *shape: rng.normal(0.0, POINT_SCALE, size=shape)
    m_i, ci, cp, ct = (_H // 8) * (_W // 8), _CFG.c_i, _CFG.c_p, _CFG.c_t

    def weighted(node: dc.Node, w: np.ndarray) -> dc.Node:
        # a fixed random read-out keeps the scalar sensitive to every output
        return (node * node.tape.const(w)).sum()

    if layer in ("group_conv1d", "lcpe"):
        op = dc.group_conv1d if layer == "group_conv1d" else lcpe
        w = rand(9, 5)
        return (lambda L: weighted(op(L["x"], L["k"]), w)), {"x": rand(9, 5), "k": rand(5, 3)}

    if layer == "fusion1":
        params = {k: rand(*v.shape) for k, v in _with_prefix(shapes, "f1.").items()}
        params.update(src=rand(m_i, ci), tgt=rand(m_i, ci))
        w = rand(m_i, ci)
        return (lambda L: weighted(fusion1(L["src"], L["tgt"], L, ct)[0], w)), params

    if layer == "fusion2":
        params = {k: rand(*v.shape) for k, v in _with_prefix(shapes, "f2.", "ln_", "lcpe_").items()}
        params.update(tex=rand(m_i, ci), struct=rand(_M_P, cp))
        w = rand(_M_P, cp)
        return (lambda L: weighted(fusion2(L["tex"], L["struct"], L, ct)[0], w)), params

    if layer == "encoders":
        params = {k: rand(*v.shape) for k, v in _with_prefix(shapes, "enc.", "str.").items()}
        img = image_tokens(rng.uniform(size=(_H, _W, 3)))
        toks = rand(_M_P, 6)
        wi, wp = rand(m_i, ci), rand(_M_P, cp)

        def f(L):
            tape = next(iter(L.values())).tape
            fi = encode_image_graph(tape.const(img), L, _H, _W)
            fp = encode_correspondences_graph(tape.const(toks), L)
            return weighted(fi, wi) + weighted(fp, wp)

        return f, params

    if layer == "head":
        params = {k: rand(*v.shape) for k, v in _with_prefix(shapes, "head.").items()}
        params["f"] = rand(_M_P, cp)
        w = rand(_M_P, 1)
        return (lambda L: weighted(head_logits(L["f"], L), w)), params

    if layer == "bce":
        y = (rng.uniform(size=(_M_P, 1)) < 0.5).astype(np.float64)
        return (lambda L: dc.bce_with_logits(L["z"], L["z"].tape.const(y))), {"z": rand(_M_P, 1) * 4}

    if layer == "network":
        params = {k: rand(*v.shape) for k, v in shapes.items()}
        scene = SimpleNamespace(src_image=rng.uniform(size=(_H, _W, 3)), tgt_image=rng.uniform(size=(_H, _W, 3)))
        corrs = CorrespondenceSet(rng.normal(size=(_M_P, 3)), rng.normal(size=(_M_P, 3)))
        y = (rng.uniform(size=(_M_P, 1)) < 0.5).astype(np.float64)

        def f(L):
            tape = next(iter(L.values())).tape
            trace = forward_graph(tape, L, _CFG, scene, corrs)
            return dc.bce_with_logits(trace.logits, tape.const(y))

        return f, params

    raise ValueError(f"unknown layer {layer!r}; choose from {LAYERS}")


def check_layer(
    layer: str, points: int = 3, seed: int = 0, corrupt: Callable[[dict], None] | None = None
) -> float:
    """Worst relative error over ``points`` random parameter points."""
    worst = 0.0
    for i in range(points):
        rng = np.random.default_rng([seed, LAYERS.index(layer), i])
        f, params = _problem(layer, rng)
        err = dc.grad_check(f, params, eps=FD_STEP, ladder=FD_LADDER, seed=seed, corrupt=corrupt)
        worst = max(worst, err)
    return worst


def corrupt_first_entry(grads: dict) -> None:
    """Test hook: break one analytic gradient entry."""
    first = next(iter(grads))
    grads[first].flat[0] += 1.0 + abs(grads[first].flat[0])
