"""Synthetic affect videos and the on-disk dataset format.

Each frame is a rendered face glyph. Valence bends the mouth (smile or
frown with the corners fixed); arousal opens the eyes and mouth, lifts the
brows and drives small per-frame displacements of the features and of the
head pose. A per-utterance head pose (rotation, scale, shift) is the nuisance
that 5-anchor alignment removes. Landmarks are emitted analytically from the
same parameters that drive the render, plus Gaussian detector noise.

Dataset directory layout::

    index.csv       video_id,utterance_id,subject_id,frame_index,label_v,label_a,offset
    landmarks.csv   video_id,utterance_id,frame_index,x0,y0,...,x67,y67   (pixel units)
    frames.bin      float32 little-endian, frame after frame, HxWxC row-major
    manifest.json   generator settings, extent/channels, alignment flag, split lists

``offset`` is the byte offset of the frame inside ``frames.bin``. Labels and
landmark coordinates are written with ``repr`` so they round-trip exactly.
Raw intensities are in [0, 1]; :meth:`Dataset.model_inputs` rescales to [-1, 1].
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .geometry import (N_LANDMARKS, SimilarityTransform, align_frame,
                       normalize_landmarks)

FORMAT = "mtaffect-dataset"
SPLITS = ("train", "validation", "test")


class DatasetError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    seed: int = 0
    n_videos: int = 30
    utterances_per_video: tuple[int, int] = (4, 8)
    frames_per_utterance: tuple[int, int] = (16, 48)
    extent: int = 32
    channels: int = 1
    # Ornstein-Uhlenbeck latent trajectories: mean reversion, step noise, spread of per-video means
    reversion: float = 0.03
    step_noise: float = 0.12
    valence_spread: float = 0.7
    arousal_spread: float = 1.0
    head_rotation_deg: float = 12.0
    head_scale: tuple[float, float] = (0.85, 1.05)
    head_shift: float = 3.0
    tremor: float = 2.0
    pose_jitter_deg: float = 3.0
    pixel_noise: float = 0.03
    landmark_noise: float = 1.5          # detector error, canonical 96-px units
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def validate(self) -> None:
        def check_range(name, pair, low):
            if len(pair) != 2 or pair[0] < low or pair[1] < pair[0]:
                raise DatasetError(f"invalid range for {name}: {pair}")
        if self.n_videos < len(SPLITS):
            raise DatasetError(f"n_videos must be at least {len(SPLITS)}, got {self.n_videos}")
        check_range("utterances_per_video", self.utterances_per_video, 1)
        check_range("frames_per_utterance", self.frames_per_utterance, 1)
        check_range("head_scale", self.head_scale, 1e-3)
        for name in ("reversion", "step_noise", "valence_spread", "arousal_spread", "head_rotation_deg",
                     "head_shift", "tremor", "pose_jitter_deg", "pixel_noise", "landmark_noise"):
            if getattr(self, name) < 0:
                raise DatasetError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.extent < 8:
            raise DatasetError(f"extent must be at least 8, got {self.extent}")
        if self.channels not in (1, 3):
            raise DatasetError(f"channels must be 1 or 3, got {self.channels}")
        if len(self.split_fractions) != 3 or min(self.split_fractions) < 0 or \
                not math.isclose(sum(self.split_fractions), 1.0):
            raise DatasetError(f"split fractions must be three non-negative values summing to 1, got "
                               f"{self.split_fractions}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown synthetic spec keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class Identity:
    """Per-subject appearance."""

    width: float = 1.0
    height: float = 1.0
    skin: float = 0.7
    ink: float = 0.1
    background: float = 0.3
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass
class Utterance:
    id: str
    video_id: str
    subject_id: str
    order: int
    start: int
    stop: int
    label: tuple[float, float]

    @property
    def n_frames(self) -> int:
        return self.stop - self.start


# -- face model ------------------------------------------------------------------

def _arc(x0, x1, y, bulge, n):
    t = np.linspace(0.0, 1.0, n)
    return np.stack([x0 + (x1 - x0) * t, y - bulge * np.sin(np.pi * t)], axis=1)


def face_landmarks(valence: float, arousal: float, identity: Identity | None = None,
                   displacement: np.ndarray | None = None) -> np.ndarray:
    """68 landmarks on the 96x96 canonical frame for a given expression.

    ``displacement`` is an optional ``[3, 2]`` offset applied to the brows,
    the eyelids and the mouth interior; anchor points never move.
    """
    ident = identity or Identity()
    disp = np.zeros((3, 2)) if displacement is None else np.asarray(displacement, dtype=np.float64)
    pts = np.zeros((N_LANDMARKS, 2))
    k = np.arange(17)
    pts[0:17, 0] = 48.0 - 30.0 * ident.width * np.cos(k * np.pi / 16)
    pts[0:17, 1] = 50.0 + 38.0 * ident.height * np.sin(k * np.pi / 16)
    lift = 8.0 * arousal
    pts[17:22] = _arc(21.0, 41.0, 29.0 - lift, 3.0, 5) + disp[0]
    pts[22:27] = _arc(55.0, 75.0, 29.0 - lift, 3.0, 5) + disp[0]
    pts[27:31] = np.stack([np.full(4, 48.0), np.linspace(42.0, 58.0, 4)], axis=1)
    pts[31:36] = np.stack([np.linspace(42.0, 54.0, 5), 61.0 - np.array([0, 1, 1.5, 1, 0])], axis=1)
    opening = 1.5 + 8.0 * arousal
    for base, (left, right) in ((36, (26.0, 40.0)), (42, (56.0, 70.0))):
        xs = np.linspace(left, right, 4)
        pts[base] = (left, 38.0)
        pts[base + 1] = (xs[1], 38.0 - opening) + disp[1]
        pts[base + 2] = (xs[2], 38.0 - opening) + disp[1]
        pts[base + 3] = (right, 38.0)
        pts[base + 4] = (xs[2], 38.0 + 0.6 * opening) + disp[1]
        pts[base + 5] = (xs[1], 38.0 + 0.6 * opening) + disp[1]
    # mouth: corners fixed at the anchors, middle bent by valence
    upper_x = np.linspace(33.0, 63.0, 7)
    u = (upper_x - 48.0) / 15.0
    bend = 6.0 * valence * (1.0 - u * u)
    gap = (1.0 + 6.0 * arousal) * np.sqrt(np.clip(1.0 - u * u, 0.0, 1.0))
    upper = np.stack([upper_x, 72.0 + bend - 1.5 * (1.0 - u * u) - gap * 0.5], axis=1)
    lower = np.stack([upper_x, 72.0 + bend + 1.5 * (1.0 - u * u) + gap], axis=1)
    pts[48:55] = upper
    pts[55:60] = lower[5:0:-1]
    inner_x = upper_x[1:6]
    pts[60] = upper[0] + (1.0, 0.0)
    pts[61:64] = np.stack([inner_x[1:4], 72.0 + bend[2:5] - gap[2:5] * 0.3], axis=1)
    pts[64] = upper[6] - (1.0, 0.0)
    pts[65:68] = np.stack([inner_x[3:0:-1], 72.0 + bend[4:1:-1] + gap[4:1:-1] * 0.6], axis=1)
    interior = [i for i in range(48, 68) if i not in (48, 54)]
    pts[interior] += disp[2]
    return pts


_STROKES = [list(range(17, 22)), list(range(22, 27)), list(range(27, 31)), list(range(31, 36)),
            list(range(36, 42)) + [36], list(range(42, 48)) + [42],
            list(range(48, 60)) + [48], list(range(60, 68)) + [60]]


def _segment_distance(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = max(float(ab @ ab), 1e-12)
    t = np.clip(((px - a) @ ab) / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.sqrt(np.sum((px - closest) ** 2, axis=1))


def render_face(landmarks: np.ndarray, pose: SimilarityTransform, extent: int, identity: Identity,
                channels: int = 1, noise_rng: np.random.Generator | None = None,
                noise: float = 0.0) -> np.ndarray:
    """Rasterise a glyph whose canonical landmarks are mapped by ``pose`` onto an ``extent`` image.

    ``pose`` acts in 96-pixel canonical units; the result is scaled to ``extent``.
    """
    scale = extent / 96.0
    ys, xs = np.mgrid[0:extent, 0:extent].astype(np.float64)
    px = np.stack([xs.ravel(), ys.ravel()], axis=1)
    canon = pose.inverse().apply(px / scale)
    head = ((canon[:, 0] - 48.0) / (31.0 * identity.width)) ** 2 + \
           ((canon[:, 1] - 50.0) / (41.0 * identity.height)) ** 2 <= 1.0
    img = np.where(head, identity.skin, identity.background)
    pts = pose.apply(landmarks) * scale
    sigma = max(0.55, 1.2 * scale)
    ink = np.zeros(px.shape[0])
    for stroke in _STROKES:
        for i0, i1 in zip(stroke[:-1], stroke[1:]):
            d = _segment_distance(px, pts[i0], pts[i1])
            ink = np.maximum(ink, np.exp(-0.5 * (d / sigma) ** 2))
    for eye in (range(36, 42), range(42, 48)):
        centre = pts[list(eye)].mean(axis=0)
        height = np.linalg.norm(pts[eye.start + 1] - pts[eye.start + 5])
        radius = max(0.35 * height, 0.5 * scale)
        d = np.sqrt(np.sum((px - centre) ** 2, axis=1))
        ink = np.maximum(ink, np.clip(radius - d + 0.5, 0.0, 1.0))
    img = img - (img - identity.ink) * ink
    if noise_rng is not None and noise > 0:
        img = img + noise_rng.normal(0.0, noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0).reshape(extent, extent, 1)
    if channels == 3:
        img = np.clip(img * np.asarray(identity.tint), 0.0, 1.0)
    return img.astype(np.float32)


# -- dataset container -------------------------------------------------------------

@dataclass
class Dataset:
    frames: np.ndarray           # [F, H, W, C] raw intensities in [0, 1]
    landmarks: np.ndarray        # [F, 68, 2] pixel units
    utterances: list[Utterance]
    splits: dict[str, list[str]]
    extent: int
    channels: int
    aligned: bool = False
    spec: dict = field(default_factory=dict)
    _inputs: tuple | None = field(default=None, repr=False, compare=False)

    def split(self, name: str) -> list[Utterance]:
        if name == "all":
            return list(self.utterances)
        if name not in self.splits:
            raise DatasetError(f"unknown split {name!r}")
        videos = set(self.splits[name])
        return [u for u in self.utterances if u.video_id in videos]

    def utterance(self, uid: str) -> Utterance:
        for u in self.utterances:
            if u.id == uid:
                return u
        raise KeyError(uid)

    def iter_utterances(self, split: str = "all") -> Iterator[tuple[Utterance, np.ndarray, np.ndarray]]:
        for u in self.split(split):
            yield u, self.frames[u.start:u.stop], self.landmarks[u.start:u.stop]

    def model_inputs(self) -> tuple[np.ndarray, np.ndarray]:
        """Frames rescaled to [-1, 1] and landmark features ``[F, 136]``.

        Landmark coordinates are normalised to the image, then z-scored per
        coordinate with statistics of the training split (all frames when the
        training split is empty), so expression-driven offsets of a pixel or
        two are on the same scale as the image input.
        """
        if self._inputs is None:
            frames = (np.asarray(self.frames, dtype=np.float32) * 2.0 - 1.0).clip(-1.0, 1.0)
            lms = np.stack([normalize_landmarks(p, self.extent) for p in self.landmarks])
            train = self.split("train") if "train" in self.splits else []
            rows = np.concatenate([np.arange(u.start, u.stop) for u in train]) if train else slice(None)
            mean, std = lms[rows].mean(axis=0), np.maximum(lms[rows].std(axis=0), 1e-3)
            self._inputs = (frames, ((lms - mean) / std).astype(np.float32))
        return self._inputs

    def subset(self, utterance_ids) -> "Dataset":
        """A new dataset restricted to the given utterances (frames copied, splits kept)."""
        keep = [self.utterance(uid) for uid in utterance_ids]
        frames, lms, utts, cursor = [], [], [], 0
        for u in keep:
            frames.append(self.frames[u.start:u.stop])
            lms.append(self.landmarks[u.start:u.stop])
            utts.append(Utterance(u.id, u.video_id, u.subject_id, u.order, cursor, cursor + u.n_frames, u.label))
            cursor += u.n_frames
        return Dataset(np.concatenate(frames), np.concatenate(lms), utts, self.splits, self.extent,
                       self.channels, self.aligned, dict(self.spec))


def _ou_path(rng, n, mean, spec: SyntheticSpec):
    out = np.empty(n)
    x = mean + rng.normal(0.0, spec.step_noise / math.sqrt(2 * spec.reversion))
    for i in range(n):
        x += spec.reversion * (mean - x) + spec.step_noise * rng.normal()
        out[i] = x
    return out


def _about_centre(t: SimilarityTransform, centre=(48.0, 50.0)) -> SimilarityTransform:
    # re-express t so that it rotates and scales about the face centre
    c = np.asarray(centre)
    return SimilarityTransform(t.scale, t.rotation, t.translation + c - t.scale * t.rotation @ c)


def synthesize(spec: SyntheticSpec) -> Dataset:
    """Generate an in-memory synthetic dataset; identical spec gives identical arrays."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    frames, landmarks, utterances = [], [], []
    cursor = 0
    for vi in range(spec.n_videos):
        vid = f"v{vi:03d}"
        ident = Identity(width=rng.uniform(0.92, 1.08), height=rng.uniform(0.92, 1.08),
                         skin=rng.uniform(0.6, 0.85), ink=rng.uniform(0.05, 0.25),
                         background=rng.uniform(0.15, 0.4), tint=tuple(rng.uniform(0.8, 1.0, size=3)))
        n_utts = int(rng.integers(spec.utterances_per_video[0], spec.utterances_per_video[1] + 1))
        lengths = rng.integers(spec.frames_per_utterance[0], spec.frames_per_utterance[1] + 1, size=n_utts)
        total = int(lengths.sum())
        valence = np.tanh(_ou_path(rng, total, rng.normal(0.0, spec.valence_spread), spec))
        arousal = 1.0 / (1.0 + np.exp(-_ou_path(rng, total, rng.normal(0.0, spec.arousal_spread), spec)))
        pos = 0
        for ui, length in enumerate(lengths):
            length = int(length)
            pose = SimilarityTransform.from_params(
                rng.uniform(*spec.head_scale),
                math.radians(rng.uniform(-spec.head_rotation_deg, spec.head_rotation_deg)),
                *rng.uniform(-spec.head_shift, spec.head_shift, size=2))
            pose = _about_centre(pose)
            v_seg, a_seg = valence[pos:pos + length], arousal[pos:pos + length]
            for t in range(length):
                v, a = float(v_seg[t]), float(a_seg[t])
                disp = rng.normal(0.0, spec.tremor * a, size=(3, 2))
                jitter = _about_centre(SimilarityTransform.from_params(
                    1.0, math.radians(rng.normal(0.0, spec.pose_jitter_deg * a)), *rng.normal(0.0, a, size=2)))
                frame_pose = pose.compose(jitter) if a > 0 else pose
                canon = face_landmarks(v, a, ident, disp)
                frames.append(render_face(canon, frame_pose, spec.extent, ident, spec.channels, rng,
                                          spec.pixel_noise))
                detected = canon + rng.normal(0.0, spec.landmark_noise, size=canon.shape) \
                    if spec.landmark_noise > 0 else canon
                landmarks.append(frame_pose.apply(detected) * (spec.extent / 96.0))
            label = (float(v_seg.mean()), float(a_seg.mean()))
            utterances.append(Utterance(f"{vid}_u{ui:02d}", vid, f"s{vi:03d}", ui, cursor, cursor + length, label))
            cursor += length
            pos += length
    order = rng.permutation(spec.n_videos)
    n_train = max(1, int(round(spec.split_fractions[0] * spec.n_videos)))
    n_val = max(1, int(round(spec.split_fractions[1] * spec.n_videos)))
    n_train = min(n_train, spec.n_videos - n_val - 1)
    names = [f"v{i:03d}" for i in order]
    splits = {"train": sorted(names[:n_train]), "validation": sorted(names[n_train:n_train + n_val]),
              "test": sorted(names[n_train + n_val:])}
    return Dataset(np.stack(frames), np.stack(landmarks), utterances, splits, spec.extent, spec.channels,
                   False, _spec_dict(spec))


def _spec_dict(spec: SyntheticSpec) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}


def align_dataset(ds: Dataset) -> Dataset:
    """Warp every frame and its landmarks onto the reference anchor template."""
    if ds.aligned:
        return ds
    frames = np.empty_like(np.asarray(ds.frames))
    lms = np.empty_like(np.asarray(ds.landmarks))
    for i in range(len(frames)):
        frames[i], lms[i], _ = align_frame(ds.frames[i], ds.landmarks[i], ds.extent)
    return Dataset(frames, lms, list(ds.utterances), ds.splits, ds.extent, ds.channels, True, dict(ds.spec))


# -- disk format -------------------------------------------------------------------

def write_dataset(ds: Dataset, path: str | Path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    frame_bytes = ds.extent * ds.extent * ds.channels * 4
    with open(root / "index.csv", "w", newline="") as fi, open(root / "landmarks.csv", "w", newline="") as fl:
        wi, wl = csv.writer(fi, lineterminator="\n"), csv.writer(fl, lineterminator="\n")
        wi.writerow(["video_id", "utterance_id", "subject_id", "frame_index", "label_v", "label_a", "offset"])
        wl.writerow(["video_id", "utterance_id", "frame_index"] +
                    [f"{c}{i}" for i in range(N_LANDMARKS) for c in "xy"])
        for u in ds.utterances:
            for k, fidx in enumerate(range(u.start, u.stop)):
                wi.writerow([u.video_id, u.id, u.subject_id, k, repr(u.label[0]), repr(u.label[1]),
                             fidx * frame_bytes])
                wl.writerow([u.video_id, u.id, k] + [repr(float(c)) for c in ds.landmarks[fidx].reshape(-1)])
    np.ascontiguousarray(ds.frames, dtype="<f4").tofile(root / "frames.bin")
    manifest = {"format": FORMAT, "version": 1, "extent": ds.extent, "channels": ds.channels,
                "dtype": "float32", "aligned": ds.aligned, "n_frames": int(len(ds.frames)),
                "spec": ds.spec, "splits": ds.splits,
                "utterance_order": {u.id: u.order for u in ds.utterances}}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def generate(spec: SyntheticSpec, path: str | Path) -> Path:
    return write_dataset(synthesize(spec), path)


def _read_rows(path: Path, header_len: int):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != header_len:
            raise DatasetError(f"{path}:1: expected a {header_len}-column header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != header_len:
                raise DatasetError(f"{path}:{lineno}: expected {header_len} fields, got {len(row)}")
            yield lineno, row


def load_dataset(path: str | Path, lazy: bool = True) -> Dataset:
    """Read a dataset directory. With ``lazy`` the frame payload is memory-mapped."""
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{root}: missing manifest.json") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{root / 'manifest.json'}:{exc.lineno}: {exc.msg}") from None
    if manifest.get("format") != FORMAT:
        raise DatasetError(f"{root / 'manifest.json'}: not a {FORMAT} manifest")
    extent, channels = int(manifest["extent"]), int(manifest["channels"])
    frame_bytes = extent * extent * channels * 4
    order = manifest.get("utterance_order", {})

    utterances: list[Utterance] = []
    current: Utterance | None = None
    n = 0
    index_path = root / "index.csv"
    for lineno, row in _read_rows(index_path, 7):
        vid, uid, sid, k, lv, la, off = row
        try:
            k, lv, la, off = int(k), float(lv), float(la), int(off)
        except ValueError:
            raise DatasetError(f"{index_path}:{lineno}: malformed numeric field") from None
        if not (-1.0 <= lv <= 1.0 and 0.0 <= la <= 1.0):
            raise DatasetError(f"{index_path}:{lineno}: label ({lv}, {la}) out of range")
        if off != n * frame_bytes:
            raise DatasetError(f"{index_path}:{lineno}: offset {off} does not follow frame order")
        if current is None or current.id != uid:
            if k != 0:
                raise DatasetError(f"{index_path}:{lineno}: utterance {uid} does not start at frame 0")
            current = Utterance(uid, vid, sid, int(order.get(uid, len(utterances))), n, n, (lv, la))
            utterances.append(current)
        elif k != current.n_frames or (lv, la) != current.label:
            raise DatasetError(f"{index_path}:{lineno}: inconsistent frame index or label for {uid}")
        current.stop = n + 1
        n += 1
    if not utterances:
        raise DatasetError(f"{root}: no utterances")

    lms = np.empty((n, N_LANDMARKS, 2))
    lm_path = root / "landmarks.csv"
    count = 0
    for lineno, row in _read_rows(lm_path, 3 + 2 * N_LANDMARKS):
        if count >= n:
            raise DatasetError(f"{lm_path}:{lineno}: more landmark rows than frames")
        try:
            lms[count] = np.array([float(c) for c in row[3:]]).reshape(N_LANDMARKS, 2)
        except ValueError:
            raise DatasetError(f"{lm_path}:{lineno}: malformed coordinate") from None
        count += 1
    if count != n:
        raise DatasetError(f"{lm_path}: {count} landmark rows for {n} frames (truncated?)")

    bin_path = root / "frames.bin"
    size = bin_path.stat().st_size if bin_path.exists() else -1
    if size != n * frame_bytes:
        raise DatasetError(f"{bin_path}: expected {n * frame_bytes} bytes, found {size}")
    shape = (n, extent, extent, channels)
    frames = np.memmap(bin_path, dtype="<f4", mode="r", shape=shape) if lazy else \
        np.fromfile(bin_path, dtype="<f4").reshape(shape)
    return Dataset(frames, lms, utterances, {k: list(v) for k, v in manifest["splits"].items()},
                   extent, channels, bool(manifest.get("aligned", False)), manifest.get("spec", {}))


def histogram_2d(labels, bins: int | tuple[int, int] = 10) -> np.ndarray:
    """Counts of ``(valence, arousal)`` pairs on a grid over [-1, 1] x [0, 1]."""
    lab = np.asarray(labels, dtype=np.float64).reshape(-1, 2)
    counts, _, _ = np.histogram2d(lab[:, 0], lab[:, 1], bins=bins, range=[[-1.0, 1.0], [0.0, 1.0]])
    return counts.astype(np.int64)
