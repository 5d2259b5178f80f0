"""Declarative backbones with named feature taps and the recurrent heads built on them.

A backbone is an ordered list of conv / pool / dense layers. Every layer is
registered as a tap (``conv3``, ``pool1``, ``fc`` ...); the 136 landmark
coordinates are concatenated with the flattened last pooling output right
before the first dense layer. Heads read an ordered selection of taps:

``frame-dense``       one tap, linear output per frame (the plain CNN)
``single-rnn``        one tap, a GRU stack, linear output (AffWildNet-shaped)
``concat-1rnn``       taps concatenated per frame into one GRU stack
``parallel-krnn``     one GRU stack per tap, outputs concatenated
``parallel-krnn-fc``  as above plus a dense layer before the output

Spatial tap maps are global-average-pooled per frame (or flattened, per
``HeadSpec.tap_reduce``) before entering a head.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .ops import GRUParams
from .tensor import ShapeError, Tensor, concat, default_dtype

TOPOLOGIES = ("frame-dense", "single-rnn", "concat-1rnn", "parallel-krnn", "parallel-krnn-fc")
LANDMARK_DIM = 136


class ModelError(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str            # conv | pool | dense
    size: int            # filters, pool window or units
    kernel: int = 3

    def __post_init__(self):
        if self.kind not in ("conv", "pool", "dense"):
            raise ModelError(f"unknown layer kind {self.kind!r}")
        if self.size < 1 or self.kernel < 1:
            raise ModelError(f"layer extents must be positive: {self}")


@dataclass
class BackboneSpec:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int] = (32, 32, 1)
    name: str = "custom"
    taps: dict[str, int] = field(init=False)
    landmark_inject: int = field(init=False)

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        self.input_shape = tuple(self.input_shape)
        counts = {"conv": 0, "pool": 0, "dense": 0}
        self.taps = {}
        for i, layer in enumerate(self.layers):
            counts[layer.kind] += 1
            c = counts[layer.kind]
            tag = {"conv": f"conv{c}", "pool": f"pool{c}", "dense": "fc" if c == 1 else f"fc{c}"}[layer.kind]
            self.taps[tag] = i
        dense_idx = [i for i, l in enumerate(self.layers) if l.kind == "dense"]
        if not dense_idx:
            raise ModelError("backbone needs at least one dense layer")
        if any(l.kind != "dense" for l in self.layers[dense_idx[0]:]):
            raise ModelError("conv/pool layers may not follow a dense layer")
        self.landmark_inject = dense_idx[0]
        self.layer_shapes()  # validates extents

    @property
    def n_conv(self) -> int:
        return sum(l.kind == "conv" for l in self.layers)

    @property
    def n_pool(self) -> int:
        return sum(l.kind == "pool" for l in self.layers)

    def resolve(self, tap: str) -> str:
        """Canonical registry name for ``tap``; accepts ``pool-last`` / ``conv-last`` aliases."""
        alias = tap.replace("_", "-").lower()
        if alias in ("pool-last", "last-pool"):
            return f"pool{self.n_pool}"
        if alias in ("conv-last", "last-conv"):
            return f"conv{self.n_conv}"
        if tap not in self.taps:
            raise ModelError(f"unknown tap {tap!r}; registry has {list(self.taps)}")
        return tap

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Output extents of every layer for one frame (``(H, W, C)`` or ``(units,)``)."""
        h, w, c = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                c = layer.size
            elif layer.kind == "pool":
                if layer.size > min(h, w):
                    raise ModelError(f"layer {i}: pool window {layer.size} exceeds {h}x{w}")
                h, w = (h - layer.size) // layer.size + 1, (w - layer.size) // layer.size + 1
            else:
                shapes.append((layer.size,))
                continue
            shapes.append((h, w, c))
        return shapes

    def tap_shape(self, tap: str) -> tuple[int, ...]:
        return self.layer_shapes()[self.taps[self.resolve(tap)]]

    def to_dict(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape),
                "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls([LayerSpec(**l) for l in d["layers"]], tuple(d["input_shape"]), d.get("name", "custom"))


def toy_backbone(extent: int = 32, channels: int = 1, widths=(4, 4, 8, 8, 16, 16), fc_units: int = 128) -> BackboneSpec:
    """Six 3x3 convs in pairs, a 2x2 pool after each pair, one dense layer."""
    layers = []
    for i, wdt in enumerate(widths):
        layers.append(LayerSpec("conv", wdt))
        if i % 2 == 1:
            layers.append(LayerSpec("pool", 2))
    layers.append(LayerSpec("dense", fc_units))
    return BackboneSpec(layers, (extent, extent, channels), name="toy")


def vgg_face_backbone(extent: int = 96, channels: int = 3, fc_units: int = 4096) -> BackboneSpec:
    """VGG-16 / VGG-FACE convolutional layout: 13 convs in 5 blocks, then fc6."""
    layers = []
    for n_conv, wdt in ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512)):
        layers += [LayerSpec("conv", wdt) for _ in range(n_conv)]
        layers.append(LayerSpec("pool", 2))
    layers.append(LayerSpec("dense", fc_units))
    return BackboneSpec(layers, (extent, extent, channels), name="vgg-face")


@dataclass
class HeadSpec:
    topology: str = "parallel-krnn"
    rnn_layers: int = 2
    rnn_units: int = 128
    fc_units: int = 128
    output_units: int = 2
    tap_reduce: str = "gap"

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ModelError(f"unknown topology {self.topology!r}; expected one of {TOPOLOGIES}")
        if self.rnn_layers < 1 or self.rnn_units < 1:
            raise ModelError("rnn_layers and rnn_units must be positive")
        if self.tap_reduce not in ("gap", "flatten"):
            raise ModelError(f"tap_reduce must be 'gap' or 'flatten', got {self.tap_reduce!r}")


class ModelGraph:
    """A wired backbone + head with its parameter store."""

    def __init__(self, backbone: BackboneSpec, head: HeadSpec, taps, seq_len: int = 16, seed: int = 0,
                 use_landmarks: bool = True):
        self.backbone = backbone
        self.head = head
        self.taps = [backbone.resolve(t) for t in taps]
        self.seq_len = int(seq_len)
        self.seed = int(seed)
        self.use_landmarks = bool(use_landmarks)
        if not self.taps:
            raise ModelError("at least one tap is required")
        if len(set(self.taps)) != len(self.taps):
            raise ModelError(f"duplicate taps in {self.taps}")
        k = len(self.taps)
        if head.topology in ("frame-dense", "single-rnn") and k != 1:
            raise ModelError(f"{head.topology} takes exactly one tap, got {k}")
        if head.topology.startswith("parallel") and k < 2:
            raise ModelError(f"{head.topology} needs at least 2 taps, got {k}")
        self.depth = max(backbone.taps[t] for t in self.taps)
        self.params: dict[str, Tensor] = {}
        self._build(np.random.default_rng(seed))

    # -- construction --------------------------------------------------------------
    def _add(self, tensor: Tensor) -> Tensor:
        self.params[tensor.name] = tensor
        return tensor

    def tap_width(self, tap: str) -> int:
        shape = self.backbone.tap_shape(tap)
        if len(shape) == 1 or self.head.tap_reduce == "gap":
            return shape[-1]
        return int(np.prod(shape))

    def _build(self, rng: np.random.Generator) -> None:
        shapes = self.backbone.layer_shapes()
        c_in = self.backbone.input_shape[2]
        flat_in = None
        self._layer_params: list[tuple] = []
        for i, layer in enumerate(self.backbone.layers[:self.depth + 1]):
            name = self._layer_name(i)
            if layer.kind == "conv":
                kern, bias = ops.init_conv(rng, layer.kernel, c_in, layer.size, name)
                self._layer_params.append((self._add(kern), self._add(bias)))
                c_in = layer.size
            elif layer.kind == "pool":
                self._layer_params.append(())
            else:
                if flat_in is None:
                    flat_in = int(np.prod(shapes[i - 1])) + (LANDMARK_DIM if self.use_landmarks else 0)
                w, b = ops.init_dense(rng, flat_in, layer.size, name, relu=True)
                self._layer_params.append((self._add(w), self._add(b)))
                flat_in = layer.size
        h = self.head
        widths = [self.tap_width(t) for t in self.taps]
        self.rnn_stacks: list[list[GRUParams]] = []
        if h.topology == "frame-dense":
            out_in = widths[0]
        else:
            inputs = widths if h.topology.startswith("parallel") else [sum(widths)]
            for s, d_in in enumerate(inputs):
                stack = []
                for l in range(h.rnn_layers):
                    g = ops.init_gru(rng, d_in if l == 0 else h.rnn_units, h.rnn_units, f"head/rnn{s + 1}/gru{l + 1}")
                    for t in g.tensors():
                        self._add(t)
                    stack.append(g)
                self.rnn_stacks.append(stack)
            out_in = h.rnn_units * len(inputs)
        self.fc_params = None
        if h.topology == "parallel-krnn-fc":
            self.fc_params = tuple(self._add(t) for t in ops.init_dense(rng, out_in, h.fc_units, "head/fc", relu=True))
            out_in = h.fc_units
        self.feature_width = out_in
        self.out_params = tuple(self._add(t) for t in ops.init_dense(rng, out_in, h.output_units, "head/out"))

    def _layer_name(self, i: int) -> str:
        return next(name for name, idx in self.backbone.taps.items() if idx == i)

    # -- parameter access ----------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def backbone_parameters(self) -> list[Tensor]:
        return [p for n, p in self.params.items() if not n.startswith("head/")]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ModelError(f"state is missing {sorted(missing)}")
        for n, p in self.params.items():
            if state[n].shape != p.shape:
                raise ShapeError(f"{n}: expected shape {p.shape}, got {state[n].shape}")
            p.data = np.array(state[n], dtype=p.dtype)

    def config(self) -> dict:
        return {"backbone": self.backbone.to_dict(), "head": asdict(self.head), "taps": list(self.taps),
                "seq_len": self.seq_len, "seed": self.seed, "use_landmarks": self.use_landmarks}

    @classmethod
    def from_config(cls, cfg: dict) -> "ModelGraph":
        return cls(BackboneSpec.from_dict(cfg["backbone"]), HeadSpec(**cfg["head"]), cfg["taps"],
                   cfg.get("seq_len", 16), cfg.get("seed", 0), cfg.get("use_landmarks", True))

    @property
    def label(self) -> str:
        prefix = {"frame-dense": "CNN", "single-rnn": "CNN-RNN", "concat-1rnn": f"CNN{len(self.taps)}-to-1RNN",
                  "parallel-krnn": f"CNN-{len(self.taps)}RNN",
                  "parallel-krnn-fc": f"CNN-{len(self.taps)}RNN-1FC"}[self.head.topology]
        if self.head.topology == "concat-1rnn" and len(self.taps) == 3:
            prefix = "CNN-1RNN"
        return f"{prefix}-{'_'.join(self.taps)}"

    # -- forward -------------------------------------------------------------------
    def _check_inputs(self, frames, landmarks):
        frames = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
        landmarks = landmarks.data if isinstance(landmarks, Tensor) else np.asarray(landmarks)
        if frames.ndim != 5 or frames.shape[2:] != self.backbone.input_shape:
            raise ShapeError(f"frames must be [T,N,{','.join(map(str, self.backbone.input_shape))}], "
                             f"got {frames.shape}")
        t, n = frames.shape[:2]
        if t != self.seq_len:
            raise ShapeError(f"sequence length {t} does not match configured {self.seq_len}")
        if landmarks.shape != (t, n, LANDMARK_DIM):
            raise ShapeError(f"landmarks must be [{t},{n},{LANDMARK_DIM}], got {landmarks.shape}")
        dt = default_dtype() if self.params is None else next(iter(self.params.values())).dtype
        return frames.astype(dt, copy=False), landmarks.astype(dt, copy=False)

    def tap_features(self, frames, landmarks, training: bool = False, rng=None, dropout: float = 0.0) -> dict[str, Tensor]:
        """Per-frame feature streams ``[T, N, width]`` for every selected tap."""
        frames, landmarks = self._check_inputs(frames, landmarks)
        t, n = frames.shape[:2]
        x = Tensor(frames.reshape(t * n, *frames.shape[2:]))
        lms = Tensor(landmarks.reshape(t * n, LANDMARK_DIM))
        wanted = {self.backbone.taps[name]: name for name in self.taps}
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.backbone.layers[:self.depth + 1]):
            p = self._layer_params[i]
            if layer.kind == "conv":
                x = ops.conv2d(x, p[0], p[1], stride=1, padding="same").relu()
            elif layer.kind == "pool":
                x = ops.maxpool2d(x, layer.size, layer.size)
            else:
                if x.ndim == 4:
                    x = x.reshape(t * n, -1)
                    if self.use_landmarks:
                        x = concat([x, lms], axis=1)
                x = ops.dropout(ops.dense(x, p[0], p[1]).relu(), dropout, training, rng)
            if i in wanted:
                feat = x
                if feat.ndim == 4:
                    feat = ops.global_avg_pool(feat) if self.head.tap_reduce == "gap" else feat.reshape(t * n, -1)
                out[wanted[i]] = feat.reshape(t, n, feat.shape[-1])
        return {name: out[name] for name in self.taps}

    def features(self, frames, landmarks, training: bool = False, rng=None, dropout=(0.0, 0.0),
                 zero_taps=()) -> Tensor:
        """Activations feeding the output layer, ``[T, N, feature_width]``."""
        p_dense, p_rnn = dropout
        streams = self.tap_features(frames, landmarks, training, rng, p_dense)
        for name in zero_taps:
            name = self.backbone.resolve(name)
            if name in streams:
                streams[name] = streams[name] * 0.0
        seqs = [streams[t] for t in self.taps]
        topo = self.head.topology
        if topo == "frame-dense":
            return seqs[0]
        if not topo.startswith("parallel"):
            seqs = [concat(seqs, axis=-1)]
        outs = []
        for seq, stack in zip(seqs, self.rnn_stacks):
            h = seq
            for depth, g in enumerate(stack):
                h = ops.gru_layer(h, None, g)
                if depth == 0:
                    h = ops.dropout(h, p_rnn, training, rng)
            outs.append(h)
        h = concat(outs, axis=-1)
        if self.fc_params is not None:
            t, n, w = h.shape
            h = ops.dense(h.reshape(t * n, w), *self.fc_params).relu().reshape(t, n, -1)
        return h

    def output_layer(self, feats: Tensor) -> Tensor:
        t, n, w = feats.shape
        return ops.dense(feats.reshape(t * n, w), *self.out_params).reshape(t, n, self.head.output_units)

    def forward(self, frames, landmarks, training: bool = False, rng=None, dropout=(0.0, 0.0),
                zero_taps=()) -> Tensor:
        """Per-frame ``[T, N, 2]`` valence/arousal predictions (linear output)."""
        return self.output_layer(self.features(frames, landmarks, training, rng, dropout, zero_taps))

    __call__ = forward


def build_model(backbone: BackboneSpec, head: HeadSpec, taps, seq_len: int = 16, seed: int = 0,
                use_landmarks: bool = True) -> ModelGraph:
    return ModelGraph(backbone, head, taps, seq_len, seed, use_landmarks)


# -- ablation grid ------------------------------------------------------------------

# Tap rows compared in the layer-selection study, written against VGG-16 numbering
# (13 convs, 5 pools, fc6). Entries: ("conv", k), ("pool", k), ("conv", "last"), ...
ABLATION_ROWS = (
    ("8th conv + last pool + fc", (("conv", 8), ("pool", "last"), ("fc", 1))),
    ("5th conv + last pool + fc", (("conv", 5), ("pool", "last"), ("fc", 1))),
    ("2nd pool + last pool + fc", (("pool", 2), ("pool", "last"), ("fc", 1))),
    ("3rd conv + 7th conv + fc", (("conv", 3), ("conv", 7), ("fc", 1))),
    ("last conv + last pool + fc", (("conv", "last"), ("pool", "last"), ("fc", 1))),
    ("6th conv + 7th conv + 8th conv", (("conv", 6), ("conv", 7), ("conv", 8))),
    ("7th conv + 8th conv + 9th conv", (("conv", 7), ("conv", 8), ("conv", 9))),
    ("3rd conv + 4th conv + 5th conv", (("conv", 3), ("conv", 4), ("conv", 5))),
)
REFERENCE_DEPTH = {"conv": 13, "pool": 5}

# the four variants reported as weaker than the 1-RNN / 3-RNN designs
REJECTED_VARIANTS = (
    ("CNN-2RNN", "parallel-krnn", 2),
    ("CNN-2RNN-1FC", "parallel-krnn-fc", 2),
    ("CNN2-to-1RNN", "concat-1rnn", 2),
    ("CNN-3RNN-1FC", "parallel-krnn-fc", 3),
)


def map_reference_taps(backbone: BackboneSpec, row) -> list[str]:
    """Map VGG-16-numbered layers onto ``backbone`` by relative depth.

    Layer ``k`` of ``K`` goes to the layer whose share of the ``n`` available
    contains its centre, ``floor((k - 0.5) * n / K) + 1``; clashes inside a
    row move to the next free index.
    """
    n_of = {"conv": backbone.n_conv, "pool": backbone.n_pool}
    used: dict[str, set[int]] = {"conv": set(), "pool": set()}
    names = []
    for kind, k in row:
        if kind == "fc":
            names.append("fc")
            continue
        n = n_of[kind]
        idx = n if k == "last" else min(math.floor((k - 0.5) * n / REFERENCE_DEPTH[kind]) + 1, n)
        if idx in used[kind]:
            free = [j for j in range(idx + 1, n + 1) if j not in used[kind]] or \
                   [j for j in range(idx - 1, 0, -1) if j not in used[kind]]
            if not free:
                raise ModelError(f"backbone has too few {kind} layers for row {row}")
            idx = free[0]
        used[kind].add(idx)
        names.append(f"{kind}{idx}")
    return sorted(names, key=lambda t: backbone.taps[t])


def enumerate_ablations(base: ModelGraph, include_rejected: bool = False) -> list[tuple[str, ModelGraph]]:
    """Variants of ``base`` over the layer-selection rows (parallel GRU heads).

    With ``include_rejected`` the 2-RNN / FC-topped variants are appended,
    built on the base's tap selection.
    """
    if len(base.backbone.taps) < 3:
        raise ModelError("tap registry has fewer than 3 taps; nothing to ablate")
    head = HeadSpec(**{**asdict(base.head), "topology": "parallel-krnn"})
    out = []
    for label, row in ABLATION_ROWS:
        taps = map_reference_taps(base.backbone, row)
        out.append((label, ModelGraph(base.backbone, head, taps, base.seq_len, base.seed, base.use_landmarks)))
    if include_rejected:
        base_taps = base.taps if len(base.taps) >= 3 else map_reference_taps(base.backbone, ABLATION_ROWS[2][1])
        for label, topo, k in REJECTED_VARIANTS:
            taps = base_taps[:1] + base_taps[-1:] if k == 2 else base_taps[:3]
            h = HeadSpec(**{**asdict(base.head), "topology": topo})
            out.append((label, ModelGraph(base.backbone, h, taps, base.seq_len, base.seed, base.use_landmarks)))
    return out
