"""Label-group embeddings: stacked graph attention plus differentiable pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .labelgraph import LabelGraph
from .tensor import ShapeError, Tensor


@dataclass
class GatLayerParams:
    U: Tensor  # w x v
    P: Tensor  # 1 x 2w
    slope: float = 0.2

    def __post_init__(self):
        if self.P.shape != (1, 2 * self.U.shape[0]):
            raise ShapeError(
                f"GatLayerParams: P has shape {self.P.shape}, expected (1, {2 * self.U.shape[0]})"
            )


@dataclass
class PoolParams:
    gat: GatLayerParams  # one propagation step, d -> d
    assign: Tensor  # d x m


@dataclass
class Embeddings:
    label: Tensor  # n x d
    group: Tensor  # m x d
    assignment: Tensor  # n x m, row-stochastic
    hard_assignment: np.ndarray  # argmax cluster per label


def _mask(graph) -> np.ndarray:
    return graph.mask if isinstance(graph, LabelGraph) else np.asarray(graph, dtype=bool)


def gat_attention(E: Tensor, graph, params: GatLayerParams) -> Tensor:
    """Attention coefficients alpha (n x n), zero outside each neighbourhood."""
    mask = _mask(graph)
    n = E.shape[0]
    if mask.shape != (n, n):
        raise ShapeError(f"gat_attention: graph is {mask.shape} but E has {n} rows")
    if E.shape[1] != params.U.shape[1]:
        raise ShapeError(f"gat_attention: E is {E.shape}, U expects {params.U.shape[1]} columns")
    H = T.matmul(E, T.transpose(params.U))
    return _attention_from_hidden(H, mask, params)


def _attention_from_hidden(H: Tensor, mask: np.ndarray, params: GatLayerParams) -> Tensor:
    w = params.U.shape[0]
    p_self = T.take(params.P, np.arange(w), axis=1)
    p_nbr = T.take(params.P, np.arange(w, 2 * w), axis=1)
    src = T.matmul(H, T.transpose(p_self))  # n x 1
    dst = T.matmul(H, T.transpose(p_nbr))  # n x 1
    scores = T.leaky_relu(T.add(src, T.transpose(dst)), params.slope)
    return T.softmax(scores, axis=1, mask=mask)


def gat_layer(E: Tensor, graph, params: GatLayerParams) -> Tensor:
    """``ELU(sum_j alpha_ij U v_j + U v_i)`` for every label i."""
    mask = _mask(graph)
    if E.shape[1] != params.U.shape[1]:
        raise ShapeError(f"gat_layer: E is {E.shape}, U expects {params.U.shape[1]} columns")
    if mask.shape != (E.shape[0], E.shape[0]):
        raise ShapeError(f"gat_layer: graph is {mask.shape} but E has {E.shape[0]} rows")
    H = T.matmul(E, T.transpose(params.U))
    alpha = _attention_from_hidden(H, mask, params)
    return T.elu(T.add(T.matmul(alpha, H), H))


def diffpool(E_l: Tensor, graph, pool: PoolParams) -> tuple[Tensor, Tensor]:
    """Soft-cluster labels into groups; returns ``(E_g, S)`` with ``E_g = S^T E_l``."""
    n = E_l.shape[0]
    m = pool.assign.shape[1]
    if m > n:
        raise ValueError(f"diffpool: {m} groups requested for only {n} labels")
    if pool.assign.shape[0] != pool.gat.U.shape[0]:
        raise ShapeError(f"diffpool: assign is {pool.assign.shape}, propagation width {pool.gat.U.shape[0]}")
    Z = gat_layer(E_l, graph, pool.gat)
    S = T.softmax(T.matmul(Z, pool.assign), axis=1)
    E_g = T.matmul(T.transpose(S), E_l)
    return E_g, S


def hard_assign(S) -> np.ndarray:
    data = S.data if isinstance(S, Tensor) else np.asarray(S)
    return np.argmax(data, axis=1)  # ties -> lowest cluster index


def lge_forward(graph: LabelGraph, layers: tuple[GatLayerParams, GatLayerParams],
                pool: PoolParams) -> Embeddings:
    E = Tensor(graph.features)
    for params in layers:
        E = gat_layer(E, graph, params)
    E_g, S = diffpool(E, graph, pool)
    return Embeddings(E, E_g, S, hard_assign(S))


def group_loss(E_l: Tensor, E_g: Tensor, hard_assignment) -> Tensor:
    """Sum over labels of the squared distance to their cluster's group embedding."""
    hard_assignment = np.asarray(hard_assignment, dtype=np.int64)
    if hard_assignment.shape != (E_l.shape[0],):
        raise ShapeError(f"group_loss: {hard_assignment.shape} assignments for {E_l.shape[0]} labels")
    centers = T.take(E_g, hard_assignment, axis=0)
    return T.tsum(T.sq_l2(centers, E_l, axis=1))
