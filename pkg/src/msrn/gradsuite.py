"""Finite-difference gradient suite: every op, the LGE stack, SGA and the full loss.

Each component is checked on seeded random instances; the report maps a
component name to its worst relative error over all instances.
"""

from __future__ import annotations

import time
import zlib
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .labelgraph import LabelGraph, build_cooccurrence_adjacency
from .lge import GatLayerParams, PoolParams, lge_forward
from .model import MSRN, ModelConfig
from .sga import project_branch, sga_forward
from .tensor import Tensor, grad_check

_CHAIN = np.eye(3, dtype=bool) | np.eye(3, k=1, dtype=bool)

# op name -> (function of Tensors, input shapes)
OP_CASES: dict[str, tuple[Callable, list[tuple[int, ...]]]] = {
    "add": (lambda x, y: T.add(x, y), [(3, 4), (4,)]),
    "sub": (lambda x, y: T.sub(x, y), [(3, 1), (1, 4)]),
    "mul": (lambda x, y: T.mul(x, y), [(2, 3, 4), (3, 1)]),
    "scale": (lambda x: T.scale(x, -1.7), [(3, 2)]),
    "matmul": (lambda x, y: T.matmul(x, y), [(2, 3, 4), (4, 2)]),
    "exp": (lambda x: T.exp(x), [(5,)]),
    "log": (lambda x: T.log(T.add(T.mul(x, x), 0.5)), [(5,)]),
    "tanh": (lambda x: T.tanh(x), [(2, 3)]),
    "sigmoid": (lambda x: T.sigmoid(x), [(2, 3)]),
    "softplus": (lambda x: T.softplus(x), [(6,)]),
    "leaky_relu": (lambda x: T.leaky_relu(x, 0.2), [(3, 3)]),
    "elu": (lambda x: T.elu(x), [(3, 3)]),
    "softmax": (lambda x: T.softmax(x, axis=1), [(3, 4)]),
    "softmax_axes": (lambda x: T.softmax(x, axis=(0, 1)), [(2, 3, 2)]),
    "softmax_masked": (lambda x: T.softmax(x, axis=1, mask=_CHAIN), [(3, 3)]),
    "sum": (lambda x: T.tsum(x, axis=1), [(3, 4)]),
    "mean": (lambda x: T.mean(x, axis=(0, 2)), [(2, 3, 2)]),
    "concat": (lambda x, y: T.concat([x, y], axis=-1), [(2, 3), (2, 2)]),
    "reshape": (lambda x: T.reshape(x, (6, 2)), [(3, 4)]),
    "transpose": (lambda x: T.transpose(x, (1, 2, 0)), [(2, 3, 4)]),
    "take": (lambda x: T.take(x, [2, 0, 2], axis=0), [(3, 2)]),
    "sq_l2": (lambda x, y: T.sq_l2(x, y, axis=1), [(3, 4), (3, 4)]),
    "conv1x1": (lambda x, w: T.conv1x1(x, w), [(1, 2, 2, 3), (3, 2)]),
    "conv3x3": (lambda x, w: T.conv3x3(x, w), [(2, 4, 4, 2), (3, 3, 2, 3)]),
    "maxpool2x2": (lambda x: T.maxpool2x2(x), [(2, 4, 4, 2)]),
}


def _rng(name: str, seed: int):
    return np.random.default_rng([zlib.crc32(name.encode()), seed])


def check_op(name: str, trials: int = 20, seed: int = 0, eps: float = 1e-5) -> float:
    """Worst error of one op, reduced to a scalar by a random linear projection."""
    fn, shapes = OP_CASES[name]
    rng = _rng(name, seed)
    worst = 0.0
    for _ in range(trials):
        point = {f"a{i}": rng.normal(size=s) for i, s in enumerate(shapes)}
        proj = rng.normal(size=fn(*[Tensor(v) for v in point.values()]).shape)
        worst = max(worst, grad_check(lambda ts: T.tsum(T.mul(fn(*ts.values()), proj)), point, eps))
    return worst


def lge_instance(rng):
    """Random small graph, GAT and pooling parameters, and a projection scalarising the output."""
    n, v, h, d, m = 4, 3, 4, 3, 2
    A = (rng.random((n, n)) < 0.5).astype(float)
    np.fill_diagonal(A, 1)
    graph = LabelGraph(rng.normal(size=(n, v)), A)
    point = {
        "U1": rng.normal(size=(h, v)), "P1": rng.normal(size=(1, 2 * h)),
        "U2": rng.normal(size=(d, h)), "P2": rng.normal(size=(1, 2 * d)),
        "Up": rng.normal(size=(d, d)), "Pp": rng.normal(size=(1, 2 * d)),
        "W": rng.normal(size=(d, m)),
    }
    w_l, w_g = rng.normal(size=(n, d)), rng.normal(size=(m, d))

    def f(p):
        layers = (GatLayerParams(p["U1"], p["P1"]), GatLayerParams(p["U2"], p["P2"]))
        emb = lge_forward(graph, layers, PoolParams(GatLayerParams(p["Up"], p["Pp"]), p["W"]))
        return T.add(T.tsum(T.mul(emb.label, w_l)), T.tsum(T.mul(emb.group, w_g)))

    return f, point


def sga_instance(rng):
    point = {
        "raw0": rng.normal(size=(4, 4, 3)), "raw1": rng.normal(size=(2, 2, 5)),
        "W0": rng.normal(size=(3, 4)) * 0.5, "W1": rng.normal(size=(5, 4)) * 0.5,
        "El": rng.normal(size=(3, 4)), "Eg": rng.normal(size=(2, 4)),
    }

    def f(p):
        pyr = [project_branch(p["raw0"], p["W0"]), project_branch(p["raw1"], p["W1"])]
        reps = sga_forward(pyr, p["El"], p["Eg"])
        return T.tsum(T.tanh(T.concat([reps.label, reps.group], axis=0)))

    return f, point


def end_to_end_instance(rng):
    """Tiny full MSRN (n <= 6, m = 2, d <= 8, 16x16 images) and its total loss."""
    n = int(rng.integers(3, 7))
    d = int(rng.integers(2, 5))
    Y = (rng.random((2, n)) < 0.5).astype(np.int64)
    A = build_cooccurrence_adjacency(np.vstack([Y, np.ones((1, n), np.int64)]))
    graph = LabelGraph(rng.normal(size=(n, 5)) / np.sqrt(5), A)
    cfg = ModelConfig(n_labels=n, groups=2, embed_dim=d, branches=3, block_widths=(2, 2, 2, 2),
                      image_size=16, label_feat_dim=5, gat_hidden=4, head_hidden=6,
                      seed=int(rng.integers(2**31)))
    model = MSRN(cfg, graph)
    images = rng.normal(size=(2, 16, 16, 3))
    return (lambda p: model.loss(images, Y, p)[0]), model.arrays()


def _check_instances(name: str, make, trials: int, seed: int, eps: float, floor=1e-8) -> float:
    rng = _rng(name, seed)
    worst = 0.0
    for _ in range(trials):
        f, point = make(rng)
        worst = max(worst, grad_check(f, point, eps, floor=floor))
    return worst


COMPOSITES = {"lge": lge_instance, "sga": sga_instance, "end-to-end": end_to_end_instance}


def components() -> list[str]:
    return sorted(OP_CASES) + list(COMPOSITES)


def run_suite(names: Iterable[str] | None = None, trials: int = 20, seed: int = 0,
              eps: float = 1e-5, roundoff: bool = False) -> dict[str, dict]:
    """``{component: {"max_rel_error": float, "seconds": float}}`` for each requested component.

    ``roundoff=True`` also reports ``roundoff_error`` for the composites: the
    same instances scored against the rounding-noise floor of the central
    difference (see ``grad_check``).
    """
    report = {}
    for name in (components() if names is None else names):
        start = time.perf_counter()
        if name in OP_CASES:
            err = check_op(name, trials, seed, eps)
        elif name in COMPOSITES:
            err = _check_instances(name, COMPOSITES[name], trials, seed, eps)
        else:
            raise KeyError(f"unknown gradient-check component {name!r}")
        report[name] = {"max_rel_error": err, "seconds": time.perf_counter() - start}
        if roundoff and name in COMPOSITES:
            report[name]["roundoff_error"] = _check_instances(name, COMPOSITES[name], trials, seed, eps,
                                                              floor="roundoff")
    return report
