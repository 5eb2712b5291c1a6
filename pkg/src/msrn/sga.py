"""Semantic guided attention over backbone feature maps.

Feature maps are channels-last, ``(H, W, d)`` or batched ``(N, H, W, d)``.
Embedding matrices are ``(k, d)`` where k is the label or group count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class SemanticRepresentations:
    label: Tensor | None  # (..., n, B*d), branch order shallowest first
    group: Tensor | None  # (..., m, B*d)


def project_branch(raw: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution mapping C_b channels to d at every position."""
    if raw.shape[-1] != weight.shape[0]:
        raise ShapeError(f"project_branch: feature map {raw.shape} vs projection {weight.shape}")
    return T.conv1x1(raw, weight, bias)


def compatibility(f: Tensor, E: Tensor) -> Tensor:
    """Position-wise Hadamard scores, shape ``(..., H, W, k, d)``."""
    if f.shape[-1] != E.shape[-1] or E.ndim != 2:
        raise ShapeError(f"compatibility: feature map {f.shape} vs embeddings {E.shape}")
    f = T.reshape(f, f.shape[:-1] + (1, f.shape[-1]))
    return T.mul(f, E)


def normalize_attention(s: Tensor) -> Tensor:
    """Softmax over the two spatial axes, separately per (index, channel)."""
    return T.softmax(s, axis=(-4, -3))


def attend(a: Tensor, f: Tensor) -> Tensor:
    """``sum_{w,h} a[w,h,i,c] * f[w,h,c]`` -> ``(..., k, d)``."""
    if a.shape[:-2] != f.shape[:-1] or a.shape[-1] != f.shape[-1]:
        raise ShapeError(f"attend: weights {a.shape} vs feature map {f.shape}")
    f = T.reshape(f, f.shape[:-1] + (1, f.shape[-1]))
    return T.tsum(T.mul(a, f), axis=(-4, -3))


def branch_representation(f: Tensor, E: Tensor) -> Tensor:
    return attend(normalize_attention(compatibility(f, E)), f)


def sga_forward(pyramid: Sequence[Tensor], E_l: Tensor | None,
                E_g: Tensor | None) -> SemanticRepresentations:
    """Label and group representations for every branch, concatenated on channels.

    Either embedding may be None to skip that path.
    """
    if not pyramid:
        raise ShapeError("sga_forward: need at least one branch")
    label = group = None
    if E_l is not None:
        label = T.concat([branch_representation(f, E_l) for f in pyramid], axis=-1)
    if E_g is not None:
        group = T.concat([branch_representation(f, E_g) for f in pyramid], axis=-1)
    return SemanticRepresentations(label, group)
