"""End-to-end network: backbone taps, label-group embeddings, attention, head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .labelgraph import LabelGraph
from .lge import Embeddings, GatLayerParams, PoolParams, gat_layer, group_loss, lge_forward
from .sga import project_branch, sga_forward
from .tensor import ShapeError, Tensor
from .tensorio import load_manifest, save_manifest

VARIANTS = ("full", "no-lge", "label-e", "group-e")


@dataclass
class ModelConfig:
    n_labels: int = 8
    groups: int = 4
    embed_dim: int = 16
    branches: int = 3
    block_widths: tuple[int, ...] = (8, 16, 16, 16)
    in_channels: int = 3
    image_size: int = 32
    label_feat_dim: int = 300
    gat_hidden: int = 32
    head_hidden: int = 64
    lam: float = 0.001
    slope: float = 0.2
    variant: str = "full"
    head_mode: str = "flat"
    # channel count per branch when feeding precomputed feature pyramids
    feature_channels: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        self.block_widths = tuple(self.block_widths)
        if self.feature_channels is not None:
            self.feature_channels = tuple(self.feature_channels)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.head_mode not in ("flat", "row"):
            raise ValueError(f"head_mode must be 'flat' or 'row', got {self.head_mode!r}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.feature_channels is not None:
            if len(self.feature_channels) != self.branches:
                raise ValueError("feature_channels needs one entry per branch")
        elif not 1 <= self.branches <= len(self.block_widths):
            raise ValueError(
                f"branches must lie in [1, {len(self.block_widths)}], got {self.branches}"
            )
        elif self.image_size % (2 ** len(self.block_widths)):
            raise ValueError(
                f"image_size {self.image_size} not divisible by {2 ** len(self.block_widths)} "
                f"({len(self.block_widths)} pooling stages)"
            )
        if not 1 <= self.groups <= self.n_labels:
            raise ValueError(f"groups must lie in [1, n_labels], got {self.groups}")
        for name in ("n_labels", "embed_dim", "label_feat_dim", "gat_hidden", "head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def full_scale(cls, n_labels: int, **overrides) -> "ModelConfig":
        """Dimensions used for the full-scale network (GAT 300 -> 300 -> 512, fc1 2048)."""
        base = dict(n_labels=n_labels, groups=4, embed_dim=512, gat_hidden=300,
                    label_feat_dim=300, head_hidden=2048, lam=0.001, branches=3)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @property
    def uses_lge(self) -> bool:
        return self.variant != "no-lge"

    @property
    def uses_label_path(self) -> bool:
        return self.variant != "group-e"

    @property
    def uses_group_path(self) -> bool:
        return self.variant != "label-e"

    @property
    def uses_group_loss(self) -> bool:
        return self.variant in ("full", "group-e")


@dataclass
class Prediction:
    logits: Tensor
    group_loss: Tensor | None = None
    embeddings: Embeddings | None = None
    extras: dict = field(default_factory=dict)

    @property
    def probabilities(self) -> np.ndarray:
        return T._sigmoid(self.logits.data)


# --------------------------------------------------------------------------
# stateless pieces
# --------------------------------------------------------------------------

def backbone_forward(images: Tensor, params: dict[str, Tensor], n_blocks: int,
                     branches: int) -> list[Tensor]:
    """Raw tap features of the last ``branches`` blocks, shallowest first.

    Each block is 3x3 conv + ELU + 2x2 max-pool; taps other than the deepest
    pass through a 1x1 buffer convolution.
    """
    if images.ndim != 4 or images.shape[1] % 2 ** n_blocks or images.shape[2] % 2 ** n_blocks:
        raise ShapeError(
            f"backbone: images {images.shape} must be NHWC with sides divisible by {2 ** n_blocks}"
        )
    taps = []
    h = images
    first_tap = n_blocks - branches
    for k in range(n_blocks):
        h = T.elu(T.add(T.conv3x3(h, params[f"backbone.block{k}.w"]), params[f"backbone.block{k}.b"]))
        h = T.maxpool2x2(h)
        if k >= first_tap:
            taps.append(h)
    out = []
    for b, tap in enumerate(taps):
        if b < len(taps) - 1:
            tap = T.conv1x1(tap, params[f"buffer.{b}.w"], params[f"buffer.{b}.b"])
        out.append(tap)
    return out


def classify(O: Tensor | None, Q: Tensor | None, head: dict[str, Tensor], slope: float = 0.2,
             mode: str = "flat") -> Tensor:
    """``fc2(LeakyReLU(fc1(tanh(M))))`` with ``M = [O || Q]`` stacked on the row axis."""
    parts = [p for p in (O, Q) if p is not None]
    if not parts:
        raise ShapeError("classify: need label or group representations")
    M = parts[0] if len(parts) == 1 else T.concat(parts, axis=-2)
    M = T.tanh(M)
    lead = M.shape[:-2]
    if mode == "flat":
        flat = T.reshape(M, lead + (M.shape[-2] * M.shape[-1],))
        if flat.shape[-1] != head["fc1.w"].shape[0]:
            raise ShapeError(f"classify: flattened M {flat.shape} vs fc1 {head['fc1.w'].shape}")
        hidden = T.leaky_relu(T.add(T.matmul(flat, head["fc1.w"]), head["fc1.b"]), slope)
    else:
        if M.shape[-1] != head["fc1.w"].shape[0]:
            raise ShapeError(f"classify: M rows {M.shape} vs fc1 {head['fc1.w'].shape}")
        rows = T.leaky_relu(T.add(T.matmul(M, head["fc1.w"]), head["fc1.b"]), slope)
        hidden = T.reshape(rows, lead + (rows.shape[-2] * rows.shape[-1],))
    return T.add(T.matmul(hidden, head["fc2.w"]), head["fc2.b"])


def bce_loss(logits: Tensor, y) -> Tensor:
    """Binary cross-entropy from logits, summed over labels and averaged over the batch."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_loss: logits {logits.shape} vs targets {y.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("bce_loss: targets must be 0/1")
    terms = T.sub(T.softplus(logits), T.mul(logits, y))
    total = T.tsum(terms)
    if logits.ndim > 1:
        total = T.scale(total, 1.0 / int(np.prod(logits.shape[:-1])))
    return total


def total_loss(l1: Tensor, l2: Tensor | None, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if l2 is None or lam == 0:
        return l1
    return T.add(l1, T.scale(l2, lam))


# --------------------------------------------------------------------------
# the assembled network
# --------------------------------------------------------------------------

class MSRN:
    """Parameters plus forward pass for one model configuration.

    ``params`` maps names to leaf Tensors; ``roles`` tags each as
    ``weight``, ``bias`` or ``embedding`` (weight decay skips biases).
    """

    def __init__(self, config: ModelConfig, graph: LabelGraph | None = None,
                 params: dict[str, np.ndarray] | None = None):
        config.validate()
        self.config = config
        if config.uses_lge:
            if graph is None:
                raise ValueError(f"variant {config.variant!r} needs a label graph")
            if graph.n != config.n_labels or graph.features.shape[1] != config.label_feat_dim:
                raise ShapeError(
                    f"label graph {graph.features.shape} does not match config "
                    f"({config.n_labels}, {config.label_feat_dim})"
                )
        self.graph = graph
        self.roles: dict[str, str] = {}
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(config.seed))
        if params is not None:
            self.load_arrays(params)

    # -- parameters ------------------------------------------------------
    def _new(self, rng, name, shape, fan_in, role="weight"):
        bound = 1.0 / np.sqrt(fan_in)
        self.params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)
        self.roles[name] = role

    def branch_channels(self) -> tuple[int, ...]:
        c = self.config
        if c.feature_channels is not None:
            return c.feature_channels
        return c.block_widths[len(c.block_widths) - c.branches:]

    def _init_params(self, rng) -> None:
        c = self.config
        d = c.embed_dim
        if c.feature_channels is None:
            cin = c.in_channels
            for k, width in enumerate(c.block_widths):
                self._new(rng, f"backbone.block{k}.w", (3, 3, cin, width), 9 * cin)
                self._new(rng, f"backbone.block{k}.b", (width,), 9 * cin, "bias")
                cin = width
            chans = self.branch_channels()
            for b in range(c.branches - 1):
                self._new(rng, f"buffer.{b}.w", (chans[b], chans[b]), chans[b])
                self._new(rng, f"buffer.{b}.b", (chans[b],), chans[b], "bias")
        for b, ch in enumerate(self.branch_channels()):
            self._new(rng, f"proj.{b}.w", (ch, d), ch)
            self._new(rng, f"proj.{b}.b", (d,), ch, "bias")
        if c.uses_lge:
            v, h = c.label_feat_dim, c.gat_hidden
            self._new(rng, "lge.gat1.U", (h, v), v)
            self._new(rng, "lge.gat1.P", (1, 2 * h), 2 * h)
            self._new(rng, "lge.gat2.U", (d, h), h)
            self._new(rng, "lge.gat2.P", (1, 2 * d), 2 * d)
            if c.uses_group_path:
                self._new(rng, "lge.pool.U", (d, d), d)
                self._new(rng, "lge.pool.P", (1, 2 * d), 2 * d)
                self._new(rng, "lge.pool.assign", (d, c.groups), d)
        else:
            self._new(rng, "embed.label", (c.n_labels, d), d, "embedding")
            self._new(rng, "embed.group", (c.groups, d), d, "embedding")
        rows = (c.n_labels if c.uses_label_path else 0) + (c.groups if c.uses_group_path else 0)
        width = c.branches * d
        fc1_in = rows * width if c.head_mode == "flat" else width
        self._new(rng, "head.fc1.w", (fc1_in, c.head_hidden), fc1_in)
        self._new(rng, "head.fc1.b", (c.head_hidden,), fc1_in, "bias")
        fc2_in = c.head_hidden if c.head_mode == "flat" else rows * c.head_hidden
        self._new(rng, "head.fc2.w", (fc2_in, c.n_labels), fc2_in)
        self._new(rng, "head.fc2.b", (c.n_labels,), fc2_in, "bias")

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if name not in arrays:
                raise KeyError(f"parameter {name!r} missing")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {name!r}: expected {t.shape}, got {arr.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- forward ---------------------------------------------------------
    def embeddings(self, params: dict[str, Tensor] | None = None) -> Embeddings | None:
        p = self.params if params is None else params
        c = self.config
        if not c.uses_lge:
            return None
        layers = (
            GatLayerParams(p["lge.gat1.U"], p["lge.gat1.P"], c.slope),
            GatLayerParams(p["lge.gat2.U"], p["lge.gat2.P"], c.slope),
        )
        if not c.uses_group_path:
            E = Tensor(self.graph.features)
            for layer in layers:
                E = gat_layer(E, self.graph, layer)
            return Embeddings(E, None, None, None)
        pool = PoolParams(GatLayerParams(p["lge.pool.U"], p["lge.pool.P"], c.slope), p["lge.pool.assign"])
        return lge_forward(self.graph, layers, pool)

    def pyramid(self, inputs, params: dict[str, Tensor] | None = None) -> list[Tensor]:
        """Projected branch maps ``(N, H_b, W_b, d)`` from images or raw tap features."""
        p = self.params if params is None else params
        c = self.config
        if c.feature_channels is None:
            images = T.as_tensor(inputs)
            raw = backbone_forward(images, p, len(c.block_widths), c.branches)
        else:
            if len(inputs) != c.branches:
                raise ShapeError(f"expected {c.branches} branch feature maps, got {len(inputs)}")
            raw = [T.as_tensor(f) for f in inputs]
        return [project_branch(f, p[f"proj.{b}.w"], p[f"proj.{b}.b"]) for b, f in enumerate(raw)]

    def forward(self, inputs, params: dict[str, Tensor] | None = None) -> Prediction:
        p = self.params if params is None else params
        c = self.config
        emb = self.embeddings(p)
        if emb is None:
            E_l, E_g = p["embed.label"], p["embed.group"]
        else:
            E_l, E_g = emb.label, emb.group
        reps = sga_forward(
            self.pyramid(inputs, p),
            E_l if c.uses_label_path else None,
            E_g if c.uses_group_path else None,
        )
        head = {k[len("head."):]: v for k, v in p.items() if k.startswith("head.")}
        logits = classify(reps.label, reps.group, head, c.slope, c.head_mode)
        l2 = None
        if c.uses_group_loss and emb is not None:
            l2 = group_loss(emb.label, emb.group, emb.hard_assignment)
        return Prediction(logits, l2, emb)

    def loss(self, inputs, y, params: dict[str, Tensor] | None = None):
        """Return ``(L, L1, L2)``; L2 is None for variants without the group loss."""
        pred = self.forward(inputs, params)
        l1 = bce_loss(pred.logits, y)
        return total_loss(l1, pred.group_loss, self.config.lam), l1, pred.group_loss

    def predict_proba(self, inputs, batch_size: int = 64) -> np.ndarray:
        out = []
        with T.no_grad():
            for sl in _batches(_num_items(inputs), batch_size):
                out.append(self.forward(_slice(inputs, sl)).probabilities)
        return np.concatenate(out, axis=0)

    # -- persistence -----------------------------------------------------
    def save(self, directory) -> None:
        directory = Path(directory)
        tensors = dict(self.arrays())
        roles = dict(self.roles)
        if self.graph is not None:
            tensors["graph.features"] = self.graph.features
            tensors["graph.adjacency"] = self.graph.adjacency
            roles["graph.features"] = roles["graph.adjacency"] = "graph"
        save_manifest(directory, tensors, roles)
        (directory / "config.json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")
        if self.graph is not None and self.graph.names:
            (directory / "labels.txt").write_text("\n".join(self.graph.names) + "\n")

    @classmethod
    def load(cls, directory) -> "MSRN":
        directory = Path(directory)
        config = ModelConfig.from_dict(json.loads((directory / "config.json").read_text()))
        tensors, _ = load_manifest(directory)
        graph = None
        if "graph.features" in tensors:
            names = ()
            if (directory / "labels.txt").exists():
                names = tuple((directory / "labels.txt").read_text().split())
            graph = LabelGraph(tensors.pop("graph.features"), tensors.pop("graph.adjacency"), names)
        return cls(config, graph, tensors)


def _num_items(inputs) -> int:
    if isinstance(inputs, (list, tuple)):
        return len(inputs[0])
    return len(inputs)


def _slice(inputs, sl):
    if isinstance(inputs, (list, tuple)):
        return [np.asarray(f)[sl] for f in inputs]
    return np.asarray(inputs)[sl]


def _batches(n: int, size: int) -> Sequence[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]
