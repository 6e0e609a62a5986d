"""SGD training, checkpoints and CAM evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import cam, metrics
from . import tensor as T
from .doei import DoeiConfig
from .encoder import ModelConfig, init_params, model_forward, param_names
from .scenes import SceneSample, stack
from .tensor import Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DOEICKPT"


class NonFiniteLoss(FloatingPointError):
    def __init__(self, sample_index: int, epoch: int, value: float):
        super().__init__(f"non-finite loss {value} at sample {sample_index} (epoch {epoch})")
        self.sample_index = sample_index
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 20
    seed: int = 0
    clip_norm: float = 2.0  # global gradient-norm cap; 0 disables

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be >= 0 and momentum in [0, 1)")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")
        return self


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    epoch_losses: list[float]
    initial_loss: float


def train(
    samples: list[SceneSample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    doei: DoeiConfig | None = None,
    params: dict[str, Tensor] | None = None,
) -> TrainResult:
    """Minibatch SGD with momentum on the summed token/patch MLSM loss.

    Deterministic for fixed configs: parameter init uses ``model_cfg.seed``
    and the epoch shuffles use ``train_cfg.seed``.
    """
    if not samples:
        raise ValueError("empty training set")
    train_cfg.validate()
    params = init_params(model_cfg) if params is None else dict(params)
    images, labels = stack(samples)
    rng = np.random.default_rng(train_cfg.seed)
    velocity = {k: np.zeros(v.shape) for k, v in params.items()}
    epoch_losses = []
    initial = None
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            with T.Tape() as tape:
                res = model_forward(images[idx], labels[idx], params, model_cfg, doei)
            bad = ~np.isfinite(res.sample_losses)
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                raise NonFiniteLoss(int(idx[k]), epoch, float(res.sample_losses[k]))
            if initial is None:
                initial = float(res.loss.data)
            total += float(res.sample_losses.sum())
            if train_cfg.lr == 0.0:
                continue
            T.backward(res.loss, tape)
            grads = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}
            norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
            log.debug("grad norm %.4g", norm)
            scale = train_cfg.clip_norm / norm if 0 < train_cfg.clip_norm < norm else 1.0
            new = {}
            for k, p in params.items():
                g = grads[k] * scale if scale != 1.0 else grads[k]
                velocity[k] = train_cfg.momentum * velocity[k] + g
                new[k] = Tensor(p.data - train_cfg.lr * velocity[k], requires_grad=True)
            params = new
        epoch_losses.append(total / len(samples))
        log.info("epoch %d mean loss %.6f", epoch + 1, epoch_losses[-1])
    if initial is None:
        initial = evaluate_loss(samples, params, model_cfg, doei)
    return TrainResult(params, epoch_losses, initial)


def evaluate_loss(samples, params, model_cfg: ModelConfig, doei: DoeiConfig | None = None, batch_size: int = 50) -> float:
    images, labels = stack(samples)
    total = 0.0
    for s in range(0, len(samples), batch_size):
        res = model_forward(images[s : s + batch_size], labels[s : s + batch_size], params, model_cfg, doei)
        total += float(res.sample_losses.sum())
    return total / len(samples)


def write_loss_csv(path, epoch_losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(epoch_losses, 1):
            w.writerow([i, repr(float(v))])


# --------------------------------------------------------------------------
# checkpoints: magic, text manifest of "name rank dims...", END, then tensor dumps


def save_checkpoint(path, params: dict[str, Tensor], order: list[str] | None = None) -> None:
    names = list(params) if order is None else order
    lines = [f"{len(names)}"]
    for n in names:
        shape = params[n].shape
        lines.append(" ".join([n, str(len(shape)), *map(str, shape)]))
    header = CKPT_MAGIC + b"\n" + ("\n".join(lines) + "\nEND\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        for n in names:
            fh.write(T.dump_bytes(params[n]))


def load_checkpoint(path) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(CKPT_MAGIC + b"\n"):
        raise ValueError(f"{path}: not a checkpoint")
    end = buf.find(b"\nEND\n")
    if end < 0:
        raise ValueError(f"{path}: missing manifest terminator")
    lines = buf[len(CKPT_MAGIC) + 1 : end].decode("ascii").split("\n")
    count = int(lines[0])
    entries = []
    for line in lines[1 : 1 + count]:
        name, rank, *dims = line.split()
        entries.append((name, tuple(int(d) for d in dims[: int(rank)])))
    pos = end + len(b"\nEND\n")
    params = {}
    for name, shape in entries:
        t, pos = T.load_bytes(buf, pos)
        if t.shape != shape:
            raise ValueError(f"{path}: {name} has shape {t.shape}, manifest says {shape}")
        params[name] = Tensor(t.data, requires_grad=True)
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes")
    return params


def check_params(params: dict[str, Tensor], cfg: ModelConfig) -> None:
    expected = param_names(cfg)
    if list(params) != expected:
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        raise ValueError(f"checkpoint does not match model config (missing {sorted(missing)}, extra {sorted(extra)})")


# --------------------------------------------------------------------------
# CAM evaluation


@dataclass
class EvalResult:
    confusion: metrics.Confusion
    miou: float
    fp: float
    fn: float
    texture_fp: float
    cams: list[cam.CamResult]
    pseudo_masks: list[np.ndarray]


def predict_cams(samples, params, model_cfg: ModelConfig, doei: DoeiConfig | None, beta: float, batch_size: int = 50) -> list[cam.CamResult]:
    """CAMs gated by each sample's image-level labels."""
    images, labels = stack(samples)
    head_w = params["head_w"]
    out = []
    for s in range(0, len(samples), batch_size):
        res = model_forward(images[s : s + batch_size], labels[s : s + batch_size], params, model_cfg, doei)
        feats = res.patch_features(model_cfg).data
        for f, lab in zip(feats, labels[s : s + batch_size]):
            out.append(cam.cam_result(f, head_w, beta, present=lab))
    return out


def evaluate(samples, params, model_cfg: ModelConfig, doei: DoeiConfig | None, beta: float) -> EvalResult:
    cams = predict_cams(samples, params, model_cfg, doei, beta)
    conf = metrics.Confusion(model_cfg.num_classes)
    masks = []
    for c, s in zip(cams, samples):
        pred = cam.upsample_labels(c.label_map, model_cfg.image_size)
        masks.append(pred)
        conf.accumulate(pred, s.gt_mask)
    m, _ = metrics.miou(conf)
    fp, fn = metrics.fp_fn_rates(conf)
    tfp = metrics.texture_fp(masks, [s.texture_mask for s in samples])
    return EvalResult(conf, m, fp, fn, tfp, cams, masks)
