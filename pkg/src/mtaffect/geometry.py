"""Landmark alignment with a 5-anchor similarity Procrustes fit.

Points are ``(x, y)`` in pixel units with x along columns and y along rows.
The 68-point layout follows the common iBUG convention (jaw 0-16, brows
17-26, nose 27-35, eyes 36-47, mouth 48-67).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

N_LANDMARKS = 68

# outer corner of the image-left eye, outer corner of the image-right eye,
# nose tip, left mouth corner, right mouth corner
ANCHOR_INDICES = (36, 45, 30, 48, 54)

# Canonical frontal positions of the anchors on a 96x96 crop. Any fixed frontal
# template works; this one centres the face with the eyes at 40% height.
TEMPLATE_EXTENT = 96.0
REFERENCE_ANCHORS = np.array([
    [26.0, 38.0],
    [70.0, 38.0],
    [48.0, 58.0],
    [33.0, 72.0],
    [63.0, 72.0],
])


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityTransform:
    """``p -> scale * rotation @ p + translation``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(2), np.zeros(2))

    @classmethod
    def from_params(cls, scale: float, angle: float, tx: float = 0.0, ty: float = 0.0) -> "SimilarityTransform":
        c, s = np.cos(angle), np.sin(angle)
        return cls(float(scale), np.array([[c, -s], [s, c]]), np.array([tx, ty], dtype=np.float64))

    @property
    def angle(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * pts @ self.rotation.T + self.translation

    def inverse(self) -> "SimilarityTransform":
        rot_t = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rot_t, -(rot_t @ self.translation) / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Transform equal to applying ``other`` first, then ``self``."""
        return SimilarityTransform(self.scale * other.scale, self.rotation @ other.rotation,
                                   self.scale * self.rotation @ other.translation + self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(3)
        m[:2, :2] = self.scale * self.rotation
        m[:2, 2] = self.translation
        return m


def fit_procrustes(src, ref) -> SimilarityTransform:
    """Least-squares similarity transform taking ``src`` onto ``ref``.

    Closed form: remove centroids, take the rotation as the polar factor of
    the 2x2 cross-covariance (sign-corrected so det = +1), then the scale that
    minimises the residual for that rotation.
    """
    src = np.asarray(src, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if src.shape != ref.shape or src.ndim != 2 or src.shape[1] != 2:
        raise GeometryError(f"expected matching [K,2] point sets, got {src.shape} and {ref.shape}")
    mu_s, mu_r = src.mean(axis=0), ref.mean(axis=0)
    s, r = src - mu_s, ref - mu_r
    spread = float(np.sum(s * s))
    if spread <= 1e-12 * max(1.0, float(np.sum(r * r))):
        raise GeometryError("degenerate anchor configuration")
    cov = r.T @ s
    u, sig, vt = np.linalg.svd(cov)
    d = np.diag([1.0, np.sign(np.linalg.det(u @ vt)) or 1.0])
    rotation = u @ d @ vt
    scale = float(np.trace(np.diag(sig) @ d) / spread)
    translation = mu_r - scale * rotation @ mu_s
    return SimilarityTransform(scale, rotation, translation)


def alignment_residual(t: SimilarityTransform, src, ref) -> float:
    """Sum of squared distances between ``t(src)`` and ``ref``."""
    return float(np.sum((t.apply(src) - np.asarray(ref, dtype=np.float64)) ** 2))


def apply_transform(t: SimilarityTransform, points) -> np.ndarray:
    return t.apply(points)


def reference_anchors(extent: int) -> np.ndarray:
    return REFERENCE_ANCHORS * (extent / TEMPLATE_EXTENT)


def normalize_landmarks(points, extent: int, return_clipped: bool = False):
    """Map pixel coordinates from ``[0, extent]`` to ``[-1, 1]`` and flatten as x0,y0,x1,y1,...

    Out-of-frame points are clamped; how many coordinates were clamped is
    logged and optionally returned.
    """
    if extent <= 0:
        raise GeometryError(f"image extent must be positive, got {extent}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape != (N_LANDMARKS, 2):
        raise GeometryError(f"expected {N_LANDMARKS} landmarks, got shape {pts.shape}")
    flat = (2.0 * pts / extent - 1.0).reshape(-1)
    clipped = int(np.count_nonzero((flat < -1.0) | (flat > 1.0)))
    if clipped:
        logger.warning("%d landmark coordinates fell outside the frame and were clamped", clipped)
        flat = np.clip(flat, -1.0, 1.0)
    return (flat, clipped) if return_clipped else flat


def warp_image(image: np.ndarray, t: SimilarityTransform, extent: int | None = None) -> np.ndarray:
    """Resample ``image[H,W,C]`` so that output pixel ``p`` takes the value at ``t^-1(p)``.

    Bilinear interpolation; samples outside the source read as 0.
    """
    img = np.asarray(image)
    h, w = img.shape[:2]
    out_h = out_w = extent or h
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    src = t.inverse().apply(np.stack([xs.ravel(), ys.ravel()], axis=1))
    sx, sy = src[:, 0], src[:, 1]
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros((out_h * out_w, img.shape[2]), dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = padded[np.clip(yi, -1, h) + 1, np.clip(xi, -1, w) + 1]
            out += (wy * wx * inside)[:, None] * vals
    return out.reshape(out_h, out_w, img.shape[2]).astype(img.dtype)


def align_frame(image: np.ndarray, landmarks, extent: int | None = None):
    """Align one frame to the reference template; returns ``(image, landmarks, transform)``."""
    pts = np.asarray(landmarks, dtype=np.float64)
    size = extent or image.shape[0]
    t = fit_procrustes(pts[list(ANCHOR_INDICES)], reference_anchors(size))
    return warp_image(image, t, size), t.apply(pts), t
