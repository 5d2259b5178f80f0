"""Ensembles of trained models: CCC-weighted decision fusion and trained model-level fusion."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import ccc
from .tensor import ShapeError, Tensor, concat
from .zoo import ModelGraph

FUSION_HEADS = ("none", "rnn", "fc")


class FusionError(ValueError):
    pass


def decision_fuse(member_estimates, weights) -> np.ndarray:
    """Weighted average of member estimates with weights clamped at zero.

    ``member_estimates`` is ``[members, ..., 2]`` and ``weights`` is
    ``[members, 2]`` (one weight per member and dimension).
    """
    est = np.asarray(member_estimates, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    if est.shape[0] != w.shape[0]:
        raise FusionError(f"{est.shape[0]} member estimates but {w.shape[0]} weight rows")
    if not np.all(np.isfinite(w)):
        raise FusionError("fusion weights must be finite")
    w = np.clip(w, 0.0, None)
    total = w.sum(axis=0)
    if np.any(total <= 0):
        raise FusionError("no informative member")
    w = w / total
    w = w.reshape(w.shape[:1] + (1,) * (est.ndim - 2) + w.shape[1:])
    return np.sum(w * est, axis=0)


def calibrate_weights(member_estimates, labels) -> np.ndarray:
    """Per-member, per-dimension validation CCC, ``[members, 2]``.

    ``member_estimates`` holds each member's utterance-level estimates
    ``[members, utterances, 2]`` on the validation split.
    """
    est = np.asarray(member_estimates, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.float64)
    return np.array([[ccc(lab[:, d], e[:, d]) for d in range(2)] for e in est])


class FusionEnsemble:
    """A set of member models with decision weights and an optional trained fusion head.

    With ``head`` set to ``"rnn"`` (one GRU layer) or ``"fc"`` (dense + ReLU)
    the members' pre-output features are concatenated per frame, passed through
    the fusion head and a 2-unit linear output layer.
    """

    def __init__(self, members: list[ModelGraph], head: str = "none", units: int = 128, seed: int = 0,
                 freeze_members: bool = False, weights=None):
        if not members:
            raise FusionError("an ensemble needs at least one member")
        if head not in FUSION_HEADS:
            raise FusionError(f"fusion head must be one of {FUSION_HEADS}, got {head!r}")
        self.members = list(members)
        self.head = head
        self.units = units
        self.seed = seed
        self.freeze_members = freeze_members
        self.weights = None if weights is None else np.asarray(weights, dtype=np.float64)
        self.input_width = sum(m.feature_width for m in self.members)
        self.head_params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        if head == "rnn":
            g = ops.init_gru(rng, self.input_width, units, "fusion/gru")
            self._gru = g
            for t in g.tensors():
                self.head_params[t.name] = t
        elif head == "fc":
            w, b = ops.init_dense(rng, self.input_width, units, "fusion/fc", relu=True)
            self.head_params.update({w.name: w, b.name: b})
        if head != "none":
            w, b = ops.init_dense(rng, units, 2, "fusion/out")
            self.head_params.update({w.name: w, b.name: b})

    @property
    def seq_len(self) -> int:
        lens = {m.seq_len for m in self.members}
        if len(lens) != 1:
            raise ShapeError(f"members disagree on sequence length: {sorted(lens)}")
        return lens.pop()

    def parameters(self) -> list[Tensor]:
        own = list(self.head_params.values())
        if self.freeze_members:
            return own
        return [p for m in self.members for p in m.parameters()] + own

    def backbone_parameters(self) -> list[Tensor]:
        return [p for m in self.members for p in m.backbone_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.head_params.values())) + sum(m.parameter_count() for m in self.members)

    def head_parameter_count(self) -> int:
        return int(sum(p.size for p in self.head_params.values()))

    def forward(self, frames, landmarks, training: bool = False, rng=None, dropout=(0.0, 0.0),
                member_scale=None) -> Tensor:
        """Model-level fusion forward pass, ``[T, N, 2]``.

        ``member_scale`` optionally multiplies each member's feature stream
        (zeroing one cuts that member out of the graph).
        """
        if self.head == "none":
            raise FusionError("decision-level ensembles have no joint forward pass; use decision_fuse")
        self.seq_len  # raises on mismatch
        feats = []
        for k, m in enumerate(self.members):
            f = m.features(frames, landmarks, training, rng, dropout)
            if self.freeze_members:
                f = f.detach()
            if member_scale is not None:
                f = f * float(member_scale[k])
            feats.append(f)
        h = concat(feats, axis=-1)
        t, n, w = h.shape
        if self.head == "rnn":
            h = ops.gru_layer(h, None, self._gru)
        else:
            h = ops.dense(h.reshape(t * n, w), self.head_params["fusion/fc/weights"],
                          self.head_params["fusion/fc/bias"]).relu().reshape(t, n, -1)
        out = ops.dense(h.reshape(t * n, self.units), self.head_params["fusion/out/weights"],
                        self.head_params["fusion/out/bias"])
        return out.reshape(t, n, 2)

    __call__ = forward

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"member{k}/{n}": a for k, m in enumerate(self.members) for n, a in m.state_dict().items()}
        state.update({n: p.data.copy() for n, p in self.head_params.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, m in enumerate(self.members):
            prefix = f"member{k}/"
            m.load_state_dict({n[len(prefix):]: a for n, a in state.items() if n.startswith(prefix)})
        for n, p in self.head_params.items():
            p.data = np.array(state[n], dtype=p.dtype)


def save_manifest(ensemble: FusionEnsemble, directory: str | Path) -> Path:
    """Write member checkpoints, model configs and ``ensemble.json`` into ``directory``.

    Manifest keys: ``members`` (list of ``{"config", "checkpoint"}``),
    ``weights`` (``[members][2]`` or null), ``fusion_head``, ``units``,
    ``seed``, ``freeze_members`` and ``head_checkpoint`` (null without a head).
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    members = []
    for k, m in enumerate(ensemble.members):
        ckpt = root / f"member{k}.ckpt"
        save_checkpoint(ckpt, m.state_dict())
        members.append({"config": m.config(), "checkpoint": ckpt.name})
    head_ckpt = None
    if ensemble.head_params:
        head_ckpt = "fusion_head.ckpt"
        save_checkpoint(root / head_ckpt, {n: p.data for n, p in ensemble.head_params.items()})
    manifest = {"members": members,
                "weights": None if ensemble.weights is None else ensemble.weights.tolist(),
                "fusion_head": ensemble.head, "units": ensemble.units, "seed": ensemble.seed,
                "freeze_members": ensemble.freeze_members, "head_checkpoint": head_ckpt}
    path = root / "ensemble.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path: str | Path) -> FusionEnsemble:
    path = Path(path)
    manifest = json.loads(path.read_text())
    members = []
    for entry in manifest["members"]:
        m = ModelGraph.from_config(entry["config"])
        m.load_state_dict(load_checkpoint(path.parent / entry["checkpoint"]))
        members.append(m)
    ens = FusionEnsemble(members, manifest["fusion_head"], manifest.get("units", 128), manifest.get("seed", 0),
                         manifest.get("freeze_members", False), manifest.get("weights"))
    if manifest.get("head_checkpoint"):
        state = load_checkpoint(path.parent / manifest["head_checkpoint"])
        for n, p in ens.head_params.items():
            p.data = np.array(state[n], dtype=p.dtype)
    return ens
