"""Miniature multi-class-token ViT classifier.

Token layout is fixed everywhere: rows ``0..C-1`` are class tokens, rows
``C..C+N^2-1`` are patch tokens in row-major patch order. All forward
functions take a leading batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import hfa
from . import tensor as T
from .doei import ConfigError, DoeiConfig, apply_doei
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    num_classes: int = 5
    dim: int = 32
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    seed: int = 0
    block_style: str = "paper"
    init_std: float | None = None  # None: 1/sqrt(fan_in) per matrix
    pixel_mean: float = 0.5  # inputs are standardised before patch embedding
    pixel_std: float = 0.25

    def validate(self) -> "ModelConfig":
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.pixel_std <= 0:
            raise ConfigError("pixel_std must be positive")
        if self.block_style not in ("paper", "standard"):
            raise ConfigError(f"block_style must be 'paper' or 'standard', got {self.block_style!r}")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def num_tokens(self) -> int:
        return self.num_classes + self.num_patches

    @property
    def hidden(self) -> int:
        return max(1, int(round(self.dim * self.mlp_ratio)))


@dataclass
class TokenState:
    tokens: Tensor  # (B, C + N^2, D)
    layer_index: int


@dataclass
class AttentionRecord:
    logits: Tensor  # (B, H, T, T)
    weights: Tensor
    refined_weights: Tensor | None
    head_mean_refined: Tensor  # (B, T, T)

    @property
    def head_mean_logits(self) -> Tensor:
        return T.mean(self.logits, axis=-3)


@dataclass
class ForwardResult:
    loss: Tensor
    sample_losses: np.ndarray
    y_token: Tensor
    y_patch: Tensor
    final: TokenState
    records: list[AttentionRecord] = field(default_factory=list)

    def patch_features(self, cfg: ModelConfig) -> Tensor:
        return self.final.tokens[:, cfg.num_classes :, :]


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param_names(cfg: ModelConfig) -> list[str]:
    names = ["patch_w", "patch_b", "cls_tokens", "pos_embed"]
    for i in range(1, cfg.depth + 1):
        names += [f"blk{i}.{n}" for n in ("wq", "wk", "wv", "wo", "bo", "ln_g", "ln_b")]
        if cfg.block_style == "standard":
            names += [f"blk{i}.ln2_g", f"blk{i}.ln2_b"]
        names += [f"blk{i}.{n}" for n in ("fc1_w", "fc1_b", "fc2_w", "fc2_b")]
    names.append("head_w")
    return names


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """Truncated-normal weights, zero biases, unit layer-norm gains.

    Weight std is ``cfg.init_std`` when set, otherwise 1/sqrt(fan_in) of the
    matrix (token tables use the embedding fan-in).
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, h = cfg.dim, cfg.hidden
    pdim = cfg.patch_size**2 * 3
    shapes = {
        "patch_w": (pdim, d),
        "patch_b": (d,),
        "cls_tokens": (cfg.num_classes, d),
        "pos_embed": (cfg.num_tokens, d),
        "head_w": (d, cfg.num_classes),
    }
    for i in range(1, cfg.depth + 1):
        for n in ("wq", "wk", "wv", "wo"):
            shapes[f"blk{i}.{n}"] = (d, d)
        shapes[f"blk{i}.bo"] = (d,)
        for ln in ("ln", "ln2"):
            shapes[f"blk{i}.{ln}_g"] = (d,)
            shapes[f"blk{i}.{ln}_b"] = (d,)
        shapes[f"blk{i}.fc1_w"] = (d, h)
        shapes[f"blk{i}.fc1_b"] = (h,)
        shapes[f"blk{i}.fc2_w"] = (h, d)
        shapes[f"blk{i}.fc2_b"] = (d,)
    params = {}
    for name in param_names(cfg):
        shape = shapes[name]
        if name.endswith("_g"):
            arr = np.ones(shape)
        elif name.endswith(("_b", ".bo")):
            arr = np.zeros(shape)
        else:
            std = cfg.init_std if cfg.init_std is not None else 1.0 / np.sqrt(shape[0] if len(shape) == 2 and name not in ("cls_tokens", "pos_embed") else cfg.dim)
            arr = _trunc_normal(rng, shape, std)
        params[name] = Tensor(arr, requires_grad=True)
    return params


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, S, S, 3) -> (B, N^2, P*P*3), patches row-major."""
    b, s, s2, ch = images.shape
    n = s // patch_size
    x = images.reshape(b, n, patch_size, n, patch_size, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, n * n, patch_size * patch_size * ch)


def _check_images(images, cfg: ModelConfig) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise T.ShapeError(f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}, 3), got {images.shape}")
    return images


def embed(images, params: dict[str, Tensor], cfg: ModelConfig) -> tuple[TokenState, Tensor]:
    """Layer-0 token state plus the pre-position-encoding patch projections."""
    images = _check_images(images, cfg)
    b = images.shape[0]
    patches = Tensor(patchify(images, cfg.patch_size))
    patch_feats = patches @ params["patch_w"] + params["patch_b"]
    cls = Tensor(np.zeros((b, cfg.num_classes, cfg.dim))) + params["cls_tokens"]
    tokens = T.concat([cls, patch_feats], axis=1) + params["pos_embed"]
    return TokenState(tokens, 0), patch_feats


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return T.swapaxes(T.reshape(x, (b, t, heads, d // heads)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return T.reshape(T.swapaxes(x, 1, 2), (b, t, h * dh))


def block_forward(
    state: TokenState,
    layer: int,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    doei: DoeiConfig | None = None,
    feats: hfa.HfaFeatures | None = None,
    trace: dict | None = None,
) -> tuple[TokenState, AttentionRecord]:
    """One encoder block, returning X_i before any DOEI update."""
    if state.layer_index != layer - 1:
        raise ValueError(f"block {layer} expects layer-{layer - 1} tokens, got layer {state.layer_index}")
    p = lambda n: params[f"blk{layer}.{n}"]  # noqa: E731
    x = state.tokens
    attn_in = x
    if cfg.block_style == "standard":
        attn_in = T.layer_norm(x, p("ln_g"), p("ln_b"))
    dh = cfg.dim // cfg.heads
    q = _split_heads(attn_in @ p("wq"), cfg.heads)
    k = _split_heads(attn_in @ p("wk"), cfg.heads)
    v = _split_heads(attn_in @ p("wv"), cfg.heads)
    logits = T.scale(q @ T.transpose(k), 1.0 / math.sqrt(dh))
    weights = T.softmax_rows(logits)

    refined = None
    if doei is not None and feats is not None and doei.hfa_active(layer):
        refined = hfa.refine_attention(weights, feats, doei.alpha, cfg.num_classes)
    agg = weights if refined is None or doei.hfa_scope == "selection_only" else refined
    attn_out = _merge_heads(agg @ v) @ p("wo") + p("bo")

    if cfg.block_style == "paper":
        h = T.layer_norm(attn_out + x, p("ln_g"), p("ln_b"))
        out = T.gelu(h @ p("fc1_w") + p("fc1_b")) @ p("fc2_w") + p("fc2_b")
    else:
        h = x + attn_out
        hn = T.layer_norm(h, p("ln2_g"), p("ln2_b"))
        out = h + T.gelu(hn @ p("fc1_w") + p("fc1_b")) @ p("fc2_w") + p("fc2_b")
    if trace is not None:
        trace["pre_mlp"] = h
    mean_src = weights if refined is None else refined
    record = AttentionRecord(logits, weights, refined, T.mean(mean_src, axis=1))
    return TokenState(out, layer), record


def class_token_scores(final: TokenState, cfg: ModelConfig) -> Tensor:
    """Mean over channels of each class token: (B, C)."""
    return T.mean(final.tokens[:, : cfg.num_classes, :], axis=-1)


def patch_scores(final: TokenState, head_w: Tensor, cfg: ModelConfig) -> Tensor:
    """Average-pooled patch tokens through the CAM weight matrix: (B, C)."""
    pooled = T.mean(final.tokens[:, cfg.num_classes :, :], axis=1)
    return pooled @ head_w


def mlsm_loss(y: Tensor, labels) -> Tensor:
    """Multi-label soft margin loss averaged over classes; (..., C) -> (...)."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != y.shape:
        raise T.ShapeError(f"labels {labels.shape} vs scores {y.shape}")
    # -[l log s(x) + (1-l) log(1-s(x))] = softplus(x) - l x
    return T.mean(T.softplus(y) - y * labels, axis=-1)


def model_forward(
    images,
    labels,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    doei: DoeiConfig | None = None,
) -> ForwardResult:
    """Loss is the batch mean of token-path plus patch-path MLSM losses."""
    images = _check_images(images, cfg)
    labels = np.asarray(labels, dtype=np.float64).reshape(images.shape[0], cfg.num_classes)
    if doei is not None:
        doei.validate(cfg.depth)
    state, patch_feats = embed((images - cfg.pixel_mean) / cfg.pixel_std, params, cfg)
    feats = None
    if doei is not None and any(doei.hfa_active(i) for i in range(1, cfg.depth + 1)):
        feats = hfa.compute_features(images, patch_feats, cfg.patch_size)
    records = []
    for i in range(1, cfg.depth + 1):
        state, rec = block_forward(state, i, params, cfg, doei, feats)
        records.append(rec)
        if doei is not None and doei.is_active(i):
            state = TokenState(apply_doei(state.tokens, rec, doei, i, cfg.depth, cfg.num_classes), i)
    y_token = class_token_scores(state, cfg)
    y_patch = patch_scores(state, params["head_w"], cfg)
    per_sample = mlsm_loss(y_token, labels) + mlsm_loss(y_patch, labels)
    loss = T.mean(per_sample)
    return ForwardResult(loss, per_sample.data.copy(), y_token, y_patch, state, records)
