"""Confidence-partitioned amplification/suppression of token couplings.

Two residual updates are applied to the token state of a transformer
layer:

* patch update: class-token embeddings flow into each patch token, weighted
  by patch-to-class couplings; the top-``t`` couplings of every class row are
  amplified by ``af_p2c`` and the rest are scaled by ``sf_p2c``.
* class update: the same scheme over class-to-class couplings (diagonal
  excluded), moving information between class tokens.

``t`` shrinks with depth so early layers treat more couplings as confident.
Candidate masks are constants for differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Invalid hyper-parameter combination."""


@dataclass(frozen=True)
class DoeiConfig:
    st_p2c: float = 0.1
    st_c2c: float = 0.25
    af_p2c: float = 1.0
    af_c2c: float = 1.0
    sf_p2c: float = -1.0
    sf_c2c: float = -1.0
    alpha: float = 0.35
    active_layers: frozenset[int] = field(default_factory=frozenset)
    ppdo_enabled: bool = True
    cpdo_enabled: bool = True
    hfa_enabled: bool = True
    coupling_source: str = "weights"
    hfa_scope: str = "full"
    allow_positive_sf: bool = False

    def __post_init__(self):
        object.__setattr__(self, "active_layers", frozenset(int(i) for i in self.active_layers))

    def validate(self, depth: int | None = None) -> "DoeiConfig":
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.st_p2c <= 0 or self.st_c2c <= 0:
            raise ConfigError("selective thresholds must be positive")
        if self.af_p2c < 0 or self.af_c2c < 0:
            raise ConfigError("augment factors must be >= 0")
        if not self.allow_positive_sf and (self.sf_p2c > 0 or self.sf_c2c > 0):
            raise ConfigError("suppression factors must be <= 0 (set allow_positive_sf to override)")
        if self.coupling_source not in ("weights", "logits"):
            raise ConfigError(f"coupling_source must be 'weights' or 'logits', got {self.coupling_source!r}")
        if self.hfa_scope not in ("full", "selection_only"):
            raise ConfigError(f"hfa_scope must be 'full' or 'selection_only', got {self.hfa_scope!r}")
        if depth is not None and any(not 1 <= i <= depth for i in self.active_layers):
            raise ConfigError(f"active_layers {sorted(self.active_layers)} outside 1..{depth}")
        return self

    def with_(self, **kw) -> "DoeiConfig":
        return replace(self, **kw)

    def is_active(self, layer: int) -> bool:
        return layer in self.active_layers and (self.ppdo_enabled or self.cpdo_enabled or self.hfa_enabled)

    def hfa_active(self, layer: int) -> bool:
        return self.hfa_enabled and layer in self.active_layers and self.alpha > 0.0


@dataclass
class CouplingScores:
    patch_to_class: Tensor  # (..., C, N^2)
    class_to_class: Tensor  # (..., C, C)
    source_layer: int


@dataclass
class CandidateMasks:
    confident: np.ndarray
    non_confident: np.ndarray


def progressive_threshold(n: int, depth: int, layer: int, st: float) -> int:
    """Number of confident candidates per row at ``layer`` (1-based) of ``depth``."""
    if not 1 <= layer <= depth:
        raise ValueError(f"layer {layer} outside 1..{depth}")
    raw = n * (depth - layer) * st
    return int(min(max(math.floor(raw + 0.5), 0), n))


def select_candidates(scores, t: int, exclude_diagonal: bool = False) -> CandidateMasks:
    """Split every row into its ``t`` largest entries and the remainder.

    Ties go to the lower column index. With ``exclude_diagonal`` entry (r, r)
    lands in neither mask and at most ``n - 1`` entries can be confident.
    """
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    rows, n = s.shape[-2], s.shape[-1]
    if not 0 <= t <= n:
        raise ValueError(f"t={t} outside 0..{n}")
    key = -s
    valid = np.ones(s.shape, dtype=bool)
    if exclude_diagonal:
        diag = np.eye(rows, n, dtype=bool)
        valid = np.broadcast_to(~diag, s.shape)
        key = np.where(valid, key, np.inf)
    order = np.argsort(key, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(n), order.shape), axis=-1)
    confident = (rank < t) & valid
    non_confident = valid & ~confident
    return CandidateMasks(confident.astype(np.float64), non_confident.astype(np.float64))


def coupling_scores(attn: Tensor, num_classes: int, layer: int) -> CouplingScores:
    """Symmetrised class/patch coupling blocks of a head-averaged (..., T, T) matrix."""
    c = num_classes
    cls_rows = attn[..., :c, :]
    a_cp = cls_rows[..., :, c:]
    a_pc = attn[..., c:, :c]
    a_cc = cls_rows[..., :, :c]
    return CouplingScores(
        patch_to_class=a_cp + T.transpose(a_pc),
        class_to_class=a_cc + T.transpose(a_cc),
        source_layer=layer,
    )


def _masked_terms(scores: Tensor, masks: CandidateMasks, af: float, sf: float):
    terms = []
    if af != 0.0:
        terms.append(T.scale(scores * masks.confident, af))
    if sf != 0.0:
        terms.append(T.scale(scores * masks.non_confident, sf))
    if not terms:
        return None
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def ppdo(patch_tokens: Tensor, class_tokens: Tensor, scores: CouplingScores, cfg: DoeiConfig, layer: int, depth: int) -> Tensor:
    """Patch update: X_p + (AF * P*Mcs + SF * P*Mns)^T X_cls."""
    p = scores.patch_to_class
    t = progressive_threshold(p.shape[-1], depth, layer, cfg.st_p2c)
    weights = _masked_terms(p, select_candidates(p, t), cfg.af_p2c, cfg.sf_p2c)
    if weights is None:
        return patch_tokens
    return patch_tokens + T.transpose(weights) @ class_tokens


def cpdo(class_tokens: Tensor, scores: CouplingScores, cfg: DoeiConfig, layer: int, depth: int) -> Tensor:
    """Class update: X_cls + (AF * C*Mcs + SF * C*Mns) X_cls, diagonal excluded."""
    cm = scores.class_to_class
    n = cm.shape[-1] - 1
    if n < 1:
        return class_tokens
    t = progressive_threshold(n, depth, layer, cfg.st_c2c)
    weights = _masked_terms(cm, select_candidates(cm, t, exclude_diagonal=True), cfg.af_c2c, cfg.sf_c2c)
    if weights is None:
        return class_tokens
    return class_tokens + weights @ class_tokens


def apply_doei(tokens: Tensor, record, cfg: DoeiConfig, layer: int, depth: int, num_classes: int) -> Tensor:
    """Token state handed to layer ``layer + 1``.

    ``tokens`` is (..., C + N^2, D) with class tokens first; ``record`` is the
    layer's :class:`~doei.encoder.AttentionRecord`.
    """
    if layer not in cfg.active_layers or not (cfg.ppdo_enabled or cfg.cpdo_enabled):
        return tokens
    source = record.head_mean_logits if cfg.coupling_source == "logits" else record.head_mean_refined
    scores = coupling_scores(source, num_classes, layer)
    c = num_classes
    x_cls = tokens[..., :c, :]
    x_patch = tokens[..., c:, :]
    new_patch = ppdo(x_patch, x_cls, scores, cfg, layer, depth) if cfg.ppdo_enabled else x_patch
    new_cls = cpdo(x_cls, scores, cfg, layer, depth) if cfg.cpdo_enabled else x_cls
    if new_patch is x_patch and new_cls is x_cls:
        return tokens
    return T.concat([new_cls, new_patch], axis=-2)
