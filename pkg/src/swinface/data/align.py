"""Five-point similarity alignment onto the 112x112 crop template."""
from __future__ import annotations

from typing import Optional

import cv2
import numpy as np
from skimage.transform import SimilarityTransform

from ..errors import AlignmentError

OUTPUT_SIZE = 112
# eyes, nose tip, mouth corners in the standard 112x112 recognition crop
TEMPLATE = np.array([
    [38.2946, 51.6963],
    [73.5318, 51.5014],
    [56.0252, 71.7366],
    [41.5493, 92.3655],
    [70.7299, 92.2041],
], dtype=np.float64)
EXTENDED_SCALE = 1.3
EXTENDED_SHIFT = 0.05  # fraction of the output height the face moves down


def extended_template(scale: float = EXTENDED_SCALE, shift: float = EXTENDED_SHIFT) -> np.ndarray:
    """Template shrunk about the crop center so a larger source region is kept,
    nudged downward so more of the region lies above the face (hair)."""
    center = np.array([OUTPUT_SIZE / 2, OUTPUT_SIZE / 2])
    return center + (TEMPLATE - center) / scale + np.array([0.0, shift * OUTPUT_SIZE])


def fit_similarity(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares similarity transform mapping ``src`` points onto ``dst``; 2x3 matrix."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise AlignmentError("landmarks and template must both be (N, 2)")
    centered = src - src.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] < 1e-9 or sv[1] < 1e-6 * sv[0]:
        raise AlignmentError("degenerate landmarks (coincident or collinear)")
    tform = SimilarityTransform()
    if not tform.estimate(src, dst):
        raise AlignmentError("similarity estimation failed")
    return tform.params[:2].copy()


def align_face(image: np.ndarray, landmarks: Optional[np.ndarray], mode: str = "recognition",
               output_size: int = OUTPUT_SIZE) -> np.ndarray:
    """Warp ``image`` to an ``output_size`` square crop.

    ``recognition`` maps the five landmarks onto the template; ``extended``
    keeps a 1.3x larger region (hair and neck). Without landmarks, extended
    mode falls back to the largest centered square of the image.
    """
    if mode not in ("recognition", "extended"):
        raise AlignmentError(f"unknown alignment mode {mode!r}")
    scale = output_size / OUTPUT_SIZE
    if landmarks is None:
        if mode == "recognition":
            raise AlignmentError("recognition alignment requires five landmarks")
        h, w = image.shape[:2]
        side = min(h, w)
        top, left = (h - side) // 2, (w - side) // 2
        crop = image[top:top + side, left:left + side]
        return cv2.resize(crop, (output_size, output_size), interpolation=cv2.INTER_AREA)
    lm = np.asarray(landmarks, dtype=np.float64)
    if lm.shape != (5, 2):
        raise AlignmentError("expected five (x, y) landmarks")
    template = TEMPLATE if mode == "recognition" else extended_template()
    M = fit_similarity(lm, template * scale)
    return cv2.warpAffine(image, M, (output_size, output_size), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0)
