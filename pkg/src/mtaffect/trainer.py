"""Training loop (Adam on the CCC loss) and utterance-level evaluation."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .data import Dataset
from .fusion import FusionEnsemble, calibrate_weights, decision_fuse
from .metrics import DimensionScores, ccc, ccc_loss, score
from .pipeline import (FrameSequence, PostProcessing, PredictionTrack, UtteranceEstimate, chunk_utterance,
                       estimates_arrays, fit_gate, utterance_estimates)
from .tensor import Tensor, backward

logger = logging.getLogger(__name__)

LEARNING_RATE_PRESETS = (1e-3, 1e-4, 1e-5)
POST_MODES = ("on", "off", "auto-gate")


class ConfigError(ValueError):
    """Invalid configuration value; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    seq_len: int = 16
    dropout_dense: float = 0.2
    dropout_rnn: float = 0.2
    epochs: int = 8
    max_steps: int | None = None
    seed: int = 0
    freeze_backbone: bool = False
    clip_norm: float | None = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    reduction: str = "median"
    train_split: str = "train"
    val_split: str = "validation"
    eval_train: bool = True
    eval_batch: int = 16

    def validate(self) -> None:
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ConfigError("learning_rate", f"must be a finite non-negative number, got {self.learning_rate}")
        for key in ("batch_size", "seq_len", "epochs", "eval_batch"):
            v = getattr(self, key)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(key, f"must be a positive integer, got {v!r}")
        if self.max_steps is not None and (not isinstance(self.max_steps, int) or self.max_steps < 1):
            raise ConfigError("max_steps", f"must be a positive integer or null, got {self.max_steps!r}")
        for key in ("dropout_dense", "dropout_rnn"):
            v = getattr(self, key)
            if not 0.0 <= v < 1.0:
                raise ConfigError(key, f"must lie in [0, 1), got {v}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm", f"must be positive or null, got {self.clip_norm}")
        for key in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ConfigError(key, f"must lie in [0, 1), got {getattr(self, key)}")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps", "must be positive")
        if self.reduction not in ("mean", "median"):
            raise ConfigError("reduction", f"must be 'mean' or 'median', got {self.reduction!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "train") -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"{prefix}.{key}", "unknown key")
        cfg = cls(**d)
        try:
            cfg.validate()
        except ConfigError as exc:
            raise ConfigError(f"{prefix}.{exc.key}", str(exc).split(": ", 1)[1]) from None
        return cfg


PRESETS = {
    "toy": TrainConfig(),
    # batch 4, 80-frame sequences, lr 1e-4, dropout 0.5 on dense and 0.8 after the first GRU layer
    "full-scale": TrainConfig(learning_rate=1e-4, batch_size=4, seq_len=80, dropout_dense=0.5, dropout_rnn=0.8,
                              epochs=20),
}


class Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def clip_global_norm(grads: list[np.ndarray], max_norm: float | None) -> float:
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# -- batching ------------------------------------------------------------------------

def dataset_sequences(dataset: Dataset, split: str, seq_len: int) -> list[FrameSequence]:
    return [s for u in dataset.split(split) for s in chunk_utterance(u, seq_len)]


def gather_batch(dataset: Dataset, seqs: list[FrameSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Stack sequences into time-major ``[T, N, ...]`` frame and landmark arrays."""
    frames, lms = dataset.model_inputs()
    idx = np.stack([s.frame_indices for s in seqs], axis=1)   # [T, N]
    return frames[idx], lms[idx]


def sequence_loss(model, dataset: Dataset, seqs: list[FrameSequence], training: bool = False, rng=None,
                  dropout=(0.0, 0.0)) -> Tensor:
    """CCC loss over the real frames of a batch, each frame carrying its utterance label."""
    frames, lms = gather_batch(dataset, seqs)
    out = model.forward(frames, lms, training=training, rng=rng, dropout=dropout)
    t, n, _ = out.shape
    mask = np.stack([s.mask for s in seqs], axis=1).reshape(-1)
    labels = np.repeat(np.array([s.label for s in seqs])[None], t, axis=0).reshape(t * n, 2)
    keep = np.flatnonzero(mask)
    return ccc_loss(labels[keep], out.reshape(t * n, 2)[keep])


# -- prediction / evaluation ----------------------------------------------------------

def predict(model, dataset: Dataset, split: str = "validation", batch_size: int = 16) -> PredictionTrack:
    """Per-frame predictions for every sequence of ``split`` (inference mode)."""
    utts = dataset.split(split)
    track = PredictionTrack(utterances={u.id: u for u in utts})
    seqs = [s for u in utts for s in chunk_utterance(u, model.seq_len)]
    for b in range(0, len(seqs), batch_size):
        chunk = seqs[b:b + batch_size]
        frames, lms = gather_batch(dataset, chunk)
        out = model.forward(frames, lms, training=False).data
        for k, s in enumerate(chunk):
            track.add(s, out[:, k, :])
    return track


def _members(model) -> list:
    if isinstance(model, FusionEnsemble) and model.head == "none":
        return model.members
    return [model]


@dataclass
class Evaluation:
    """Utterance-level scores without and with post-processing."""

    split: str
    raw: DimensionScores
    post: DimensionScores
    post_processing: dict
    gate_log: list = field(default_factory=list)
    estimates: list[UtteranceEstimate] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"split": self.split, "without_post_processing": self.raw.to_dict(),
                "with_post_processing": self.post.to_dict(), "post_processing": self.post_processing,
                "gate": self.gate_log}

    def table_row(self) -> dict:
        """Valence/arousal CCC as ``with (without)`` pairs."""
        return {"valence": f"{self.post.ccc_v:.3f} ({self.raw.ccc_v:.3f})",
                "arousal": f"{self.post.ccc_a:.3f} ({self.raw.ccc_a:.3f})",
                "mean": f"{self.post.mean_ccc:.3f} ({self.raw.mean_ccc:.3f})"}


def fused_estimates(tracks: list[PredictionTrack], posts: list[PostProcessing], weights=None) -> list[UtteranceEstimate]:
    per_member = [utterance_estimates(t, p) for t, p in zip(tracks, posts)]
    if len(per_member) == 1:
        return per_member[0]
    values = np.stack([[e.value for e in m] for m in per_member])
    fused = decision_fuse(values, weights if weights is not None else np.ones((len(per_member), 2)))
    return [replace(e, value=v) for e, v in zip(per_member[0], fused)]


def evaluate(model, dataset: Dataset, split: str = "validation", post: PostProcessing | None = None,
             mode: str = "on", gate_split: str = "validation", batch_size: int = 16) -> Evaluation:
    """Chunk, predict, reduce, post-process and score ``split`` at utterance level.

    ``mode`` is ``"off"`` (no post-processing), ``"on"`` (apply ``post``) or
    ``"auto-gate"`` (keep each step of ``post`` only if it raises CCC on
    ``gate_split``). Decision-level ensembles fuse their members' estimates.
    """
    if mode not in POST_MODES:
        raise ValueError(f"mode must be one of {POST_MODES}, got {mode!r}")
    post = post or PostProcessing()
    members = _members(model)
    weights = getattr(model, "weights", None) if len(members) > 1 else None
    tracks = [predict(m, dataset, split, batch_size) for m in members]
    raw_post = [PostProcessing.disabled(post.reduction)] * len(members)
    log: list = []
    if mode == "off":
        chosen = raw_post
    elif mode == "on":
        chosen = [post] * len(members)
    else:
        gate_tracks = tracks if gate_split == split else [predict(m, dataset, gate_split, batch_size) for m in members]
        chosen = []
        for k, t in enumerate(gate_tracks):
            member_log: list = []
            chosen.append(fit_gate(t, post, member_log))
            log.extend({"member": k, **entry} for entry in member_log)
    raw_est = fused_estimates(tracks, raw_post, weights)
    post_est = fused_estimates(tracks, chosen, weights)
    labels, raw_vals = estimates_arrays(raw_est)
    _, post_vals = estimates_arrays(post_est)
    settings = chosen[0].to_dict() if len(chosen) == 1 else [c.to_dict() for c in chosen]
    return Evaluation(split, score(labels, raw_vals), score(labels, post_vals), {"mode": mode, "settings": settings},
                      log, post_est)


def calibrate_ensemble(ensemble: FusionEnsemble, dataset: Dataset, split: str = "validation",
                       post: PostProcessing | None = None, batch_size: int = 16) -> np.ndarray:
    """Set ``ensemble.weights`` to each member's per-dimension CCC on ``split``."""
    post = post or PostProcessing.disabled()
    ests = [utterance_estimates(predict(m, dataset, split, batch_size), post) for m in ensemble.members]
    labels = estimates_arrays(ests[0])[0]
    ensemble.weights = calibrate_weights(np.stack([estimates_arrays(e)[1] for e in ests]), labels)
    return ensemble.weights


# -- training ------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    log: list[dict]
    best_epoch: int
    best_val_ccc: float
    steps: int


def _trainable(model, freeze_backbone: bool) -> list[Tensor]:
    params = model.parameters()
    if not freeze_backbone:
        return params
    frozen = {id(p) for p in model.backbone_parameters()}
    return [p for p in params if id(p) not in frozen]


def _quick_scores(model, dataset: Dataset, split: str, reduction: str, batch_size: int) -> tuple[float, float]:
    est = utterance_estimates(predict(model, dataset, split, batch_size), PostProcessing.disabled(reduction))
    labels, values = estimates_arrays(est)
    return ccc(labels[:, 0], values[:, 0]), ccc(labels[:, 1], values[:, 1])


def train(model, dataset: Dataset, config: TrainConfig, out_dir: str | Path | None = None) -> TrainResult:
    """Minimise the CCC loss with Adam for a fixed epoch budget; keep the best validation state.

    The returned model holds the parameters of the epoch with the highest
    validation mean CCC. With ``out_dir`` the config, per-epoch metrics,
    best checkpoint and a final report are written there.
    """
    config.validate()
    if model.seq_len != config.seq_len:
        raise ConfigError("seq_len", f"model expects {model.seq_len}-frame sequences, config says {config.seq_len}")
    seqs = dataset_sequences(dataset, config.train_split, config.seq_len)
    if not seqs:
        raise ValueError(f"split {config.train_split!r} has no utterances to train on")
    params = _trainable(model, config.freeze_backbone)
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    dropout = (config.dropout_dense, config.dropout_rnn)
    log: list[dict] = []
    best = (-math.inf, 0, model.state_dict())
    steps = 0
    recent: list[float] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(seqs))
        losses = []
        for b in range(0, len(order), config.batch_size):
            batch = [seqs[i] for i in order[b:b + config.batch_size]]
            loss = sequence_loss(model, dataset, batch, training=True, rng=rng, dropout=dropout)
            value = float(loss.data)
            recent = (recent + [value])[-5:]
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {steps + 1}; recent losses {recent}; "
                                       f"learning_rate={config.learning_rate}")
            grads = backward(loss, params)
            gnorm = clip_global_norm(grads, config.clip_norm)
            if not math.isfinite(gnorm):
                raise TrainingDiverged(f"non-finite gradient norm at epoch {epoch}, step {steps + 1}")
            opt.step(grads)
            losses.append(value)
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        row = {"epoch": epoch, "steps": steps, "train_loss": float(np.mean(losses))}
        if config.eval_train:
            row["train_ccc_v"], row["train_ccc_a"] = _quick_scores(model, dataset, config.train_split,
                                                                   config.reduction, config.eval_batch)
        row["val_ccc_v"], row["val_ccc_a"] = _quick_scores(model, dataset, config.val_split, config.reduction,
                                                           config.eval_batch)
        row["val_mean_ccc"] = (row["val_ccc_v"] + row["val_ccc_a"]) / 2.0
        log.append(row)
        logger.info("epoch %d: %s", epoch, row)
        if row["val_mean_ccc"] > best[0]:
            best = (row["val_mean_ccc"], epoch, model.state_dict())
        if config.max_steps is not None and steps >= config.max_steps:
            break
    model.load_state_dict(best[2])
    result = TrainResult(model, log, best[1], best[0], steps)
    if out_dir is not None:
        write_run(out_dir, result, config)
    return result


def write_run(out_dir: str | Path, result: TrainResult, config: TrainConfig) -> Path:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    keys = sorted({k for row in result.log for k in row}, key=lambda k: (k != "epoch", k != "steps", k))
    with open(root / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in result.log:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    save_checkpoint(root / "best.ckpt", result.model.state_dict())
    report = {"best_epoch": result.best_epoch, "best_val_mean_ccc": result.best_val_ccc, "steps": result.steps}
    (root / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return root


def write_predictions(path: str | Path, estimates: list[UtteranceEstimate]) -> None:
    """CSV with ``video_id, utterance_id, O_v, O_a`` per utterance."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "utterance_id", "O_v", "O_a"])
        for e in estimates:
            w.writerow([e.video_id, e.utterance_id, repr(float(e.value[0])), repr(float(e.value[1]))])
