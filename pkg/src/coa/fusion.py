"""Modality-aware embeddings: a unit-norm convex blend of image and text directions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from coa.errors import DegenerateFusionError, ShapeError

NORM_TOL = 1e-6
# below this a fused vector is treated as having no direction
_DEGENERATE = 1e-12


@dataclass(frozen=True, eq=False)
class ModalityAwareEmbedding:
    values: np.ndarray
    alpha_used: float

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim != 1:
            raise ShapeError(f"embedding must be a vector, got shape {v.shape}")
        if abs(np.linalg.norm(v) - 1.0) > NORM_TOL:
            raise ValueError(f"embedding is not unit norm (|v| = {np.linalg.norm(v)})")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def dot(self, other: "ModalityAwareEmbedding") -> float:
        if other.dim != self.dim:
            raise ShapeError(f"dimension mismatch: {self.dim} vs {other.dim}")
        return float(self.values @ other.values)


def unit(v: np.ndarray) -> np.ndarray:
    """v / |v|, or the zero vector when v is zero."""
    n = float(np.linalg.norm(v))
    return v / n if n > 0 else np.zeros_like(v, dtype=np.float64)


def fuse_modalities(img_emb: np.ndarray, txt_emb: np.ndarray, alpha: float) -> ModalityAwareEmbedding:
    """Normalize both embeddings, blend ``alpha * img + (1 - alpha) * txt``, renormalize.

    Raises DegenerateFusionError if the blend has no direction, e.g. antipodal
    inputs at alpha = 0.5 or a zero embedding carrying all the weight.
    """
    img = np.asarray(img_emb, dtype=np.float64)
    txt = np.asarray(txt_emb, dtype=np.float64)
    if img.shape != txt.shape or img.ndim != 1:
        raise ShapeError(f"cannot fuse embeddings of shapes {img.shape} and {txt.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    fused = alpha * unit(img) + (1.0 - alpha) * unit(txt)
    n = float(np.linalg.norm(fused))
    if n < _DEGENERATE:
        raise DegenerateFusionError(f"fused embedding has zero norm (alpha={alpha})")
    return ModalityAwareEmbedding(fused / n, float(alpha))
