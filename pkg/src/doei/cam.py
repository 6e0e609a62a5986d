"""Class activation maps, contrast thresholding and heatmap export."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import pnm
from .tensor import Tensor, minmax_normalize


@dataclass(frozen=True)
class CamConfig:
    beta: float = 0.5

    def validate(self) -> "CamConfig":
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        return self


@dataclass
class CamResult:
    maps: np.ndarray  # (C, N, N) in [0, 1]
    label_map: np.ndarray  # (N, N), 0 background, c = class c


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def generate_cam(features, head_w) -> np.ndarray:
    """relu(F W) per class, min-max normalised per class.

    ``features`` is (N, N, D) or (N^2, D) with square N^2; ``head_w`` is (D, C).
    Returns (C, N, N).
    """
    f = _arr(features)
    w = _arr(head_w)
    if f.ndim == 2:
        n = int(round(np.sqrt(f.shape[0])))
        if n * n != f.shape[0]:
            raise ValueError(f"{f.shape[0]} patch rows do not form a square grid")
        f = f.reshape(n, n, -1)
    raw = np.maximum(np.einsum("ijd,dc->cij", f, w), 0.0)
    return np.stack([minmax_normalize(m).data for m in raw])


def threshold_labels(maps, beta: float) -> np.ndarray:
    """Foreground iff the per-cell class maximum reaches ``beta``; lowest class wins ties."""
    CamConfig(beta).validate()
    m = _arr(maps)
    best = m.argmax(axis=0)
    return np.where(m.max(axis=0) >= beta, best + 1, 0).astype(np.uint8)


def upsample_labels(label_map, image_size: int) -> np.ndarray:
    label_map = np.asarray(label_map)
    n = label_map.shape[0]
    if image_size % n:
        raise ValueError(f"image size {image_size} not divisible by grid {n}")
    k = image_size // n
    return np.repeat(np.repeat(label_map, k, axis=0), k, axis=1)


def cam_result(features, head_w, beta: float, present=None) -> CamResult:
    """CAM plus label map; classes outside ``present`` (multi-hot) are zeroed."""
    maps = generate_cam(features, head_w)
    if present is not None:
        maps = maps * (np.asarray(present).reshape(-1, 1, 1) > 0)
    return CamResult(maps, threshold_labels(maps, beta))


# --------------------------------------------------------------------------
# heatmap export


def _colormap() -> np.ndarray:
    """256-entry blue -> cyan -> green -> yellow -> red table."""
    x = np.linspace(0.0, 1.0, 256)
    r = np.clip(np.minimum(4 * x - 2, 1.0), 0, 1)
    g = np.clip(np.minimum(4 * x, 4 - 4 * x), 0, 1)
    b = np.clip(np.minimum(2 - 4 * x, 1.0), 0, 1)
    return np.round(np.stack([r, g, b], axis=1) * 255).astype(np.uint8)


COLORMAP = _colormap()


def heatmap_rgb(cam_map, image_size: int | None = None) -> np.ndarray:
    m = np.clip(_arr(cam_map), 0.0, 1.0)
    idx = np.round(m * 255).astype(np.intp)
    rgb = COLORMAP[idx]
    if image_size is not None and image_size != m.shape[0]:
        k = image_size // m.shape[0]
        rgb = np.repeat(np.repeat(rgb, k, axis=0), k, axis=1)
    return rgb


def write_heatmap(path, cam_map, image_size: int | None = None) -> None:
    pnm.write_ppm(path, heatmap_rgb(cam_map, image_size))
