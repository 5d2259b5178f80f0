"""From utterances to fixed-length sequences and back to one estimate per utterance.

Utterances are cut into consecutive windows; the last window is padded by
repeating its final frame and remembers how many frames are real. Per-frame
predictions are optionally median-filtered within each sequence, reduced per
sequence (mean or median over the real frames), averaged per utterance and
optionally blended with neighbouring utterances when an utterance is short.
Each post-processing step can be gated: kept only if it raises validation CCC.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .metrics import ccc

logger = logging.getLogger(__name__)


@dataclass
class FrameSequence:
    utterance_id: str
    sequence_index: int
    frame_indices: np.ndarray   # [seq_len] positions in the dataset frame array (padding repeats the last)
    valid_len: int
    label: tuple[float, float]

    @property
    def mask(self) -> np.ndarray:
        return np.arange(len(self.frame_indices)) < self.valid_len


def chunk_utterance(utterance, seq_len: int) -> list[FrameSequence]:
    """Split ``utterance`` (anything with ``id``, ``start``, ``stop``, ``label``) into sequences."""
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    n = utterance.stop - utterance.start
    if n < 1:
        raise ValueError(f"utterance {utterance.id} is empty")
    out = []
    for k, begin in enumerate(range(0, n, seq_len)):
        valid = min(seq_len, n - begin)
        idx = utterance.start + begin + np.minimum(np.arange(seq_len), valid - 1)
        out.append(FrameSequence(utterance.id, k, idx, valid, tuple(utterance.label)))
    return out


def reduce_sequence(per_frame, valid_len: int, mode: str = "median") -> np.ndarray:
    """Mean or median of the first ``valid_len`` per-frame ``[T, 2]`` predictions."""
    if valid_len < 1:
        raise ValueError(f"valid_len must be >= 1, got {valid_len}")
    vals = np.asarray(per_frame, dtype=np.float64)[:valid_len]
    if mode == "median":
        return np.median(vals, axis=0)
    if mode == "mean":
        return _shifted_mean(vals)
    raise ValueError(f"mode must be 'mean' or 'median', got {mode!r}")


def reduce_utterance(sequence_estimates) -> np.ndarray:
    est = np.asarray(sequence_estimates, dtype=np.float64).reshape(-1, 2)
    if len(est) == 0:
        raise ValueError("no sequence estimates to reduce")
    return _shifted_mean(est)


def _shifted_mean(vals: np.ndarray) -> np.ndarray:
    # mean about the first row: exact when all rows are equal
    return vals[0] + (vals - vals[0]).mean(axis=0)


def _median_1d(x: np.ndarray, window: int) -> np.ndarray:
    if window == 1 or len(x) == 0:
        return x.copy()
    half = window // 2
    padded = np.pad(x, half, mode="symmetric")  # mirror including the edge sample
    return np.median(sliding_window_view(padded, window), axis=-1)


def median_filter(track, window_v: int, window_a: int) -> np.ndarray:
    """Sliding median per dimension over a ``[T, 2]`` track, mirror-padded at both ends."""
    for w in (window_v, window_a):
        if w < 1 or w % 2 == 0:
            raise ValueError(f"median window must be odd and >= 1, got {w}")
    arr = np.asarray(track, dtype=np.float64).reshape(-1, 2)
    return np.stack([_median_1d(arr[:, 0], window_v), _median_1d(arr[:, 1], window_a)], axis=1)


@dataclass
class UtteranceEstimate:
    utterance_id: str
    video_id: str
    order: int
    n_frames: int
    value: np.ndarray           # (O_v, O_a)
    label: tuple[float, float] = (0.0, 0.0)


def smooth_short_utterances(estimates: list[UtteranceEstimate], min_frames: int, alpha: float) -> list[UtteranceEstimate]:
    """Blend each short utterance with the mean of its temporal neighbours in the same video.

    ``value <- alpha * own + (1 - alpha) * mean(previous, next)`` for utterances
    with fewer than ``min_frames`` frames. Neighbours contribute their unsmoothed
    values; an utterance without neighbours is left alone.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    by_video: dict[str, list[UtteranceEstimate]] = {}
    for e in estimates:
        by_video.setdefault(e.video_id, []).append(e)
    new_values = {}
    for items in by_video.values():
        items = sorted(items, key=lambda e: e.order)
        for i, e in enumerate(items):
            if e.n_frames >= min_frames:
                continue
            neigh = [items[j].value for j in (i - 1, i + 1) if 0 <= j < len(items)]
            if neigh:
                new_values[e.utterance_id] = alpha * e.value + (1.0 - alpha) * np.mean(neigh, axis=0)
    return [replace(e, value=new_values.get(e.utterance_id, e.value)) for e in estimates]


@dataclass
class SequencePrediction:
    sequence: FrameSequence
    per_frame: np.ndarray       # [seq_len, 2]


@dataclass
class PredictionTrack:
    """Per-frame predictions with their sequence and utterance lineage."""

    sequences: list[SequencePrediction] = field(default_factory=list)
    utterances: dict[str, object] = field(default_factory=dict)   # id -> Utterance

    def add(self, seq: FrameSequence, per_frame: np.ndarray) -> None:
        self.sequences.append(SequencePrediction(seq, np.asarray(per_frame, dtype=np.float64)))

    def frame_lineage(self) -> list[tuple[str, int, int]]:
        """``(utterance_id, sequence_index, frame_index)`` for every real predicted frame."""
        out = []
        for sp in self.sequences:
            u = self.utterances.get(sp.sequence.utterance_id)
            start = u.start if u is not None else 0
            for k in range(sp.sequence.valid_len):
                out.append((sp.sequence.utterance_id, sp.sequence.sequence_index,
                            int(sp.sequence.frame_indices[k]) - start))
        return out


@dataclass
class PostProcessing:
    """Settings of the post-processing chain; a window of 1 / alpha of 1 disables a step."""

    reduction: str = "median"
    window_v: int = 1
    window_a: int = 1
    smooth_min_frames: int = 0
    smooth_alpha: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def disabled(cls, reduction: str = "median") -> "PostProcessing":
        return cls(reduction=reduction)


def utterance_estimates(track: PredictionTrack, post: PostProcessing) -> list[UtteranceEstimate]:
    """Filter, reduce per sequence, average per utterance, smooth short utterances, clip to label ranges."""
    per_utt: dict[str, list[np.ndarray]] = {}
    for sp in track.sequences:
        seq = sp.sequence
        frames = sp.per_frame[:seq.valid_len]
        if post.window_v > 1 or post.window_a > 1:
            frames = median_filter(frames, post.window_v, post.window_a)
        per_utt.setdefault(seq.utterance_id, []).append((seq.sequence_index,
                                                        reduce_sequence(frames, seq.valid_len, post.reduction)))
    out = []
    for uid in sorted(per_utt):
        u = track.utterances[uid]
        ests = [v for _, v in sorted(per_utt[uid], key=lambda p: p[0])]
        out.append(UtteranceEstimate(uid, u.video_id, u.order, u.n_frames, reduce_utterance(ests), tuple(u.label)))
    if post.smooth_alpha < 1.0 and post.smooth_min_frames > 0:
        out = smooth_short_utterances(out, post.smooth_min_frames, post.smooth_alpha)
    return [replace(e, value=clip_to_ranges(e.value)) for e in out]


VALENCE_RANGE = (-1.0, 1.0)
AROUSAL_RANGE = (0.0, 1.0)


def clip_to_ranges(values) -> np.ndarray:
    """Clip ``[..., 2]`` estimates to the valence and arousal label ranges."""
    v = np.array(values, dtype=np.float64)
    v[..., 0] = np.clip(v[..., 0], *VALENCE_RANGE)
    v[..., 1] = np.clip(v[..., 1], *AROUSAL_RANGE)
    return v


def estimates_arrays(estimates: list[UtteranceEstimate]) -> tuple[np.ndarray, np.ndarray]:
    labels = np.array([e.label for e in estimates], dtype=np.float64).reshape(-1, 2)
    values = np.array([e.value for e in estimates], dtype=np.float64).reshape(-1, 2)
    return labels, values


def _dimension_ccc(track: PredictionTrack, post: PostProcessing) -> np.ndarray:
    labels, values = estimates_arrays(utterance_estimates(track, post))
    return np.array([ccc(labels[:, 0], values[:, 0]), ccc(labels[:, 1], values[:, 1])])


def fit_gate(track: PredictionTrack, candidate: PostProcessing, log: list | None = None) -> PostProcessing:
    """Keep each post-processing step only where it improves validation CCC.

    The median filter is judged per dimension; smoothing on the mean CCC.
    Decisions are appended to ``log`` as dicts.
    """
    log = log if log is not None else []
    chosen = replace(candidate, window_v=1, window_a=1, smooth_min_frames=0, smooth_alpha=1.0)
    base = _dimension_ccc(track, chosen)
    for dim, key in ((0, "window_v"), (1, "window_a")):
        window = getattr(candidate, key)
        if window <= 1:
            continue
        trial = replace(chosen, **{key: window})
        scores = _dimension_ccc(track, trial)
        keep = bool(scores[dim] > base[dim])
        log.append({"step": f"median_filter[{key}={window}]", "before": float(base[dim]),
                    "after": float(scores[dim]), "kept": keep})
        logger.info("gate %s=%d: %.4f -> %.4f (%s)", key, window, base[dim], scores[dim], "kept" if keep else "dropped")
        if keep:
            chosen, base = trial, scores
    if candidate.smooth_alpha < 1.0 and candidate.smooth_min_frames > 0:
        trial = replace(chosen, smooth_min_frames=candidate.smooth_min_frames, smooth_alpha=candidate.smooth_alpha)
        scores = _dimension_ccc(track, trial)
        keep = bool(scores.mean() > base.mean())
        log.append({"step": f"smoothing[min_frames={candidate.smooth_min_frames},alpha={candidate.smooth_alpha}]",
                    "before": float(base.mean()), "after": float(scores.mean()), "kept": keep})
        if keep:
            chosen = trial
    return chosen
