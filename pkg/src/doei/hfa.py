"""Hybrid feature alignment of attention weights.

The patch-patch block of every head's attention matrix is blended with the
elementwise product of an RGB similarity field and a patch-embedding cosine
similarity field, then each row is renormalised. Class rows and columns are
left as they are.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class HfaFeatures:
    d_rgb: np.ndarray  # (..., N^2, N^2), constant
    d_emb: Tensor  # (..., N^2, N^2), tracked through the patch embedding

    @property
    def product(self) -> Tensor:
        return self.d_emb * self.d_rgb


def patch_mean_rgb(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., S, S, 3) images -> (..., N^2, 3) per-patch mean colour, row-major patch order."""
    images = np.asarray(images, dtype=np.float64)
    *lead, h, w, ch = images.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch_size}")
    n = h // patch_size
    blocks = images.reshape(*lead, n, patch_size, w // patch_size, patch_size, ch)
    return blocks.mean(axis=(-4, -2)).reshape(*lead, n * (w // patch_size), ch)


def rgb_similarity(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(1 + cos)/2 between patch mean colours; two black patches count as identical."""
    rgb = patch_mean_rgb(images, patch_size)
    norm = np.linalg.norm(rgb, axis=-1, keepdims=True)
    zero = norm[..., 0] <= T.COSINE_EPS
    unit = rgb / np.maximum(norm, T.COSINE_EPS)
    sim = 0.5 * (1.0 + unit @ np.swapaxes(unit, -1, -2))
    both_zero = zero[..., :, None] & zero[..., None, :]
    sim = np.where(both_zero, 1.0, sim)
    # eps-guarded self similarity of a black patch would otherwise be 0.5
    idx = np.arange(sim.shape[-1])
    sim[..., idx, idx] = 1.0
    return np.clip(sim, 0.0, 1.0)


def emb_similarity(features: Tensor) -> Tensor:
    """(1 + cos)/2 between rows of (..., N^2, D) patch-embedding features."""
    unit = T.l2_normalize_rows(features)
    cos = unit @ T.transpose(unit)
    return T.scale(cos + 1.0, 0.5)


def compute_features(images: np.ndarray, patch_features: Tensor, patch_size: int) -> HfaFeatures:
    return HfaFeatures(d_rgb=rgb_similarity(images, patch_size), d_emb=emb_similarity(patch_features))


def refine_attention(weights: Tensor, feats, alpha: float, num_classes: int) -> Tensor:
    """Blend the patch block of (..., H, T, T) weights with the similarity product.

    ``feats`` is an :class:`HfaFeatures` or a (..., N^2, N^2) similarity
    product (array or tensor) without the head axis.
    """
    if alpha == 0.0:
        return weights
    sim = feats.product if isinstance(feats, HfaFeatures) else T.as_tensor(feats)
    c = num_classes
    tt = weights.shape[-1]
    n2 = tt - c
    if sim.shape[-1] != n2:
        raise T.ShapeError(f"similarity block {sim.shape} does not match {n2} patches")
    lead = sim.shape[:-2]
    sim = T.reshape(sim, (*lead, 1, n2, n2))
    zeros_left = Tensor(np.zeros((*lead, 1, n2, c)))
    zeros_top = Tensor(np.zeros((*lead, 1, c, tt)))
    padded = T.concat([zeros_top, T.concat([zeros_left, sim], axis=-1)], axis=-2)
    keep = np.ones((tt, tt))
    keep[c:, c:] = 1.0 - alpha
    blended = weights * keep + T.scale(padded, alpha)
    return T.normalize_rows_sum(blended)
