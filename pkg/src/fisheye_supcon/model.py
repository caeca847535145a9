"""MLP encoder, projection head, hand-written backprop and the
contrastive pre-training loop.

The encoder ``f`` maps a flattened patch to a representation ``r``; the
projection head ``G`` (affine, ReLU, affine) maps ``r`` to an embedding
that is l2-normalized into ``z``. Only ``z`` feeds the loss; downstream
probes read ``r`` and the head is discardable.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .contrastive import LossConfig, combine, supcon_from_arrays
from .dataset import LabeledPatch, resample_region
from .errors import (
    DegenerateEmbeddingError,
    DegenerateLabelsError,
    ParseError,
    StaleCacheError,
    ValidationError,
)
from .rng import substream

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FECK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 32 * 32
    hidden_dims: tuple[int, ...] = (256, 256)
    representation_dim: int = 128
    projection_hidden: Optional[int] = None  # defaults to representation_dim
    embedding_dim: int = 128

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.representation_dim, self.embedding_dim)
        if any(int(d) != d or d < 1 for d in dims):
            raise ValidationError("all layer widths must be positive integers")

    @classmethod
    def wide(cls, input_dim: int = 32 * 32) -> "ModelConfig":
        """512-dim representation, 128-dim embedding."""
        return cls(input_dim=input_dim, representation_dim=512, embedding_dim=128)

    @property
    def head_hidden(self) -> int:
        return self.projection_hidden or self.representation_dim

    def encoder_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.representation_dim]

    def projection_dims(self) -> list[int]:
        return [self.representation_dim, self.head_hidden, self.embedding_dim]


@dataclass(eq=False)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)


@dataclass(eq=False)
class EncoderModel:
    config: ModelConfig
    encoder: list[Layer]
    projection: list[Layer]
    step: int = 0

    def layers(self) -> list[Layer]:
        return self.encoder + self.projection

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for layer in self.layers():
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "EncoderModel":
        def dup(ls):
            return [Layer(l.weight.copy(), l.bias.copy()) for l in ls]

        return EncoderModel(self.config, dup(self.encoder), dup(self.projection), self.step)


def _init_layers(dims: Sequence[int], rng: np.random.Generator) -> list[Layer]:
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append(Layer(w, b))
    return layers


def init_model(config: ModelConfig, seed: int) -> EncoderModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init from the ``init`` substream."""
    rng = substream(seed, "init")
    return EncoderModel(config, _init_layers(config.encoder_dims(), rng), _init_layers(config.projection_dims(), rng))


@dataclass(eq=False)
class ForwardCache:
    model_id: int
    model_step: int
    inputs: list[np.ndarray]      # input to each layer
    pre_acts: list[np.ndarray]    # affine output of each layer
    u: np.ndarray                 # unnormalized embedding
    norms: np.ndarray
    z: np.ndarray


def _flatten(model: EncoderModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    if x.shape[1] != model.config.input_dim:
        raise ValidationError(f"input has {x.shape[1]} features, model expects {model.config.input_dim}")
    return x


def _run_stack(layers: list[Layer], h: np.ndarray, inputs, pre_acts) -> np.ndarray:
    """Affine layers with ReLU between them (none after the last)."""
    for k, layer in enumerate(layers):
        inputs.append(h)
        a = h @ layer.weight.T + layer.bias
        pre_acts.append(a)
        h = np.maximum(a, 0.0) if k < len(layers) - 1 else a
    return h


def encode(model: EncoderModel, x) -> np.ndarray:
    """Representations ``r`` only (the projection head is not run)."""
    return _run_stack(model.encoder, _flatten(model, x), [], [])


def forward(model: EncoderModel, x):
    """Return ``(r, z, cache)`` for a batch of patches or flat vectors."""
    h = _flatten(model, x)
    inputs, pre_acts = [], []
    r = _run_stack(model.encoder, h, inputs, pre_acts)
    u = _run_stack(model.projection, r, inputs, pre_acts)
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise DegenerateEmbeddingError("projection output has zero (or non-finite) norm; cannot normalize")
    z = u / norms[:, None]
    cache = ForwardCache(id(model), model.step, inputs, pre_acts, u, norms, z)
    return r, z, cache


def backward(model: EncoderModel, cache: ForwardCache, dz) -> list[np.ndarray]:
    """Parameter gradients (same order as ``model.parameters()``)."""
    if cache.model_id != id(model) or cache.model_step != model.step:
        raise StaleCacheError("forward cache was produced by a different model state")
    dz = np.asarray(dz, dtype=np.float64)
    z, norms = cache.z, cache.norms
    # Jacobian of u / |u|
    grad = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / norms[:, None]
    layers = model.layers()
    n_enc = len(model.encoder)
    grads: list[np.ndarray] = [None] * (2 * len(layers))
    for k in range(len(layers) - 1, -1, -1):
        last_of_stack = k == n_enc - 1 or k == len(layers) - 1
        if not last_of_stack:
            grad = grad * (cache.pre_acts[k] > 0)
        grads[2 * k] = grad.T @ cache.inputs[k]
        grads[2 * k + 1] = grad.sum(axis=0)
        if k > 0:
            grad = grad @ layers[k].weight
    return grads


# ---------------------------------------------------------------- optimizer


@dataclass(eq=False)
class OptimizerState:
    lr: float = 0.001
    weight_decay: float = 0.0001
    momentum: float = 0.9
    velocities: Optional[list[np.ndarray]] = None

    def __post_init__(self):
        if not self.lr > 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValidationError("need lr > 0, weight_decay >= 0 and momentum in [0, 1)")


def sgd_step(model: EncoderModel, grads: Sequence[np.ndarray], opt: OptimizerState) -> EncoderModel:
    """In-place SGD with momentum and coupled weight decay.

    ``v <- momentum * v + g + weight_decay * p``; ``p <- p - lr * v``.
    """
    params = model.parameters()
    if len(grads) != len(params):
        raise ValidationError("gradient list does not match the model parameters")
    if opt.velocities is None:
        opt.velocities = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, opt.velocities):
        if g.shape != p.shape or v.shape != p.shape:
            raise ValidationError("gradient/velocity shape mismatch")
        v *= opt.momentum
        v += g
        if opt.weight_decay:
            v += opt.weight_decay * p
        p -= opt.lr * v
    model.step += 1
    return model


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    jitter: float = 0.2
    mean: tuple[float, ...] = (0.5,)
    std: tuple[float, ...] = (0.25,)

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValidationError("crop_scale must lie within (0, 1]")
        if not 0 < self.crop_ratio[0] <= self.crop_ratio[1]:
            raise ValidationError("crop_ratio must be an ordered positive range")
        if not 0 <= self.flip_prob <= 1:
            raise ValidationError("flip_prob must lie in [0, 1]")
        if not 0 <= self.jitter < 1:
            raise ValidationError("jitter amplitude must lie in [0, 1)")
        if len(self.mean) != len(self.std) or min(self.std) <= 0:
            raise ValidationError("normalization mean/std must match in length with positive std")

    def with_stats(self, mean, std) -> "AugmentationConfig":
        return AugmentationConfig(self.crop_scale, self.crop_ratio, self.flip_prob, self.jitter,
                                  tuple(float(m) for m in mean), tuple(float(s) for s in std))


def pool_channel_stats(pixels: np.ndarray) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Global per-channel mean and std over an ``(N, h, w, ch)`` stack."""
    flat = pixels.reshape(-1, pixels.shape[-1])
    std = flat.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return tuple(float(m) for m in flat.mean(axis=0)), tuple(float(s) for s in std)


def hflip(patch: np.ndarray) -> np.ndarray:
    return patch[:, ::-1, :]


def normalize(patch: np.ndarray, cfg: AugmentationConfig) -> np.ndarray:
    return (patch - np.asarray(cfg.mean)) / np.asarray(cfg.std)


def augment_view(patch: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Random resized crop, horizontal flip, brightness/contrast jitter,
    then normalization."""
    patch = np.asarray(patch, dtype=np.float64)
    h, w = patch.shape[:2]
    area = h * w * rng.uniform(*cfg.crop_scale)
    ratio = math.exp(rng.uniform(math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1])))
    cw = min(w, max(1, int(round(math.sqrt(area * ratio)))))
    ch = min(h, max(1, int(round(math.sqrt(area / ratio)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    if (ch, cw) != (h, w):
        patch = resample_region(patch, top, left, top + ch, left + cw, (h, w))
    if rng.random() < cfg.flip_prob:
        patch = hflip(patch)
    if cfg.jitter > 0:
        brightness = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter)
        contrast = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter)
        patch = patch * brightness
        m = patch.mean()
        patch = np.clip((patch - m) * contrast + m, 0.0, 1.0)
    return normalize(patch, cfg)


def augment_pair(patch, cfg: AugmentationConfig, rng: np.random.Generator):
    """Two independent augmented views of one patch."""
    return augment_view(patch, cfg, rng), augment_view(patch, cfg, rng)


# ---------------------------------------------------------------- training


OBJECTIVES = ("combined", "semantic", "distortion", "infonce")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    batch_size: int = 64
    lr: float = 0.001
    weight_decay: float = 0.0001
    momentum: float = 0.9
    seed: int = 0
    objective: str = "combined"
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        if self.objective not in OBJECTIVES:
            raise ValidationError(f"objective must be one of {OBJECTIVES}")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")
        OptimizerState(self.lr, self.weight_decay, self.momentum)


@dataclass(eq=False)
class TrainResult:
    model: EncoderModel
    epoch_losses: list[float]
    batch_losses: list[float]
    skipped_batches: int
    loss_config: LossConfig
    train_config: TrainConfig


def batch_loss(z: np.ndarray, semantic: np.ndarray, distortion: np.ndarray, pairs: np.ndarray,
               objective: str, loss_cfg: LossConfig):
    tau = loss_cfg.temperature
    if objective == "combined":
        return combine(loss_cfg.alpha,
                       lambda: supcon_from_arrays(z, distortion, tau),
                       lambda: supcon_from_arrays(z, semantic, tau))
    if objective == "semantic":
        return supcon_from_arrays(z, semantic, tau)
    if objective == "distortion":
        return supcon_from_arrays(z, distortion, tau)
    return supcon_from_arrays(z, pairs, tau)


def pretrain(pool: Sequence[LabeledPatch], model_cfg: Optional[ModelConfig] = None,
             loss_cfg: LossConfig = LossConfig(), run_cfg: TrainConfig = TrainConfig(),
             checkpoint: Optional[str] = None) -> TrainResult:
    """Contrastive pre-training over a patch pool.

    Each batch of N patches becomes 2N augmented views (views ``2k`` and
    ``2k + 1`` come from patch ``k``). Epoch order, initialization and
    augmentation all come from named substreams of ``run_cfg.seed``.
    """
    if not pool:
        raise ValidationError("cannot pre-train on an empty pool")
    pixels = np.stack([p.pixels for p in pool]).astype(np.float64)
    semantic = np.array([p.semantic_class for p in pool], dtype=np.int64)
    distortion = np.array([p.distortion_class for p in pool], dtype=np.int64)
    if model_cfg is None:
        model_cfg = ModelConfig(input_dim=int(np.prod(pixels.shape[1:])))
    if model_cfg.input_dim != int(np.prod(pixels.shape[1:])):
        raise ValidationError("model input_dim does not match the patch size")

    mean, std = pool_channel_stats(pixels)
    aug = run_cfg.augmentation.with_stats(mean, std)
    model = init_model(model_cfg, run_cfg.seed)
    opt = OptimizerState(run_cfg.lr, run_cfg.weight_decay, run_cfg.momentum)
    n = len(pool)
    epoch_losses, batch_losses, skipped = [], [], 0
    for epoch in range(run_cfg.epochs):
        order = substream(run_cfg.seed, "shuffle", epoch).permutation(n)
        aug_rng = substream(run_cfg.seed, "augment", epoch)
        losses = []
        for start in range(0, n, run_cfg.batch_size):
            idx = order[start:start + run_cfg.batch_size]
            views = np.empty((2 * len(idx),) + pixels.shape[1:])
            for k, j in enumerate(idx):
                views[2 * k], views[2 * k + 1] = augment_pair(pixels[j], aug, aug_rng)
            sem = np.repeat(semantic[idx], 2)
            dcl = np.repeat(distortion[idx], 2)
            pairs = np.repeat(np.arange(len(idx)), 2)
            _, z, cache = forward(model, views)
            try:
                out = batch_loss(z, sem, dcl, pairs, run_cfg.objective, loss_cfg)
            except DegenerateLabelsError:
                log.warning("epoch %d: skipping batch at %d with a degenerate label partition", epoch + 1, start)
                skipped += 1
                continue
            sgd_step(model, backward(model, cache, out.gradient), opt)
            losses.append(out.value)
            batch_losses.append(out.value)
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        epoch_losses.append(epoch_loss)
        log.info("epoch %d/%d loss %.6f", epoch + 1, run_cfg.epochs, epoch_loss)

    result = TrainResult(model, epoch_losses, batch_losses, skipped, loss_cfg, run_cfg)
    if checkpoint is not None:
        save_checkpoint(checkpoint, model, meta=checkpoint_meta(result, aug))
    return result


# ---------------------------------------------------------------- checkpoints


def checkpoint_meta(result: TrainResult, aug: AugmentationConfig) -> dict:
    run = asdict(result.train_config)
    run.pop("augmentation")
    return {
        "temperature": result.loss_config.temperature,
        "alpha": result.loss_config.alpha,
        "train": run,
        "augmentation": asdict(aug),
        "epoch_losses": result.epoch_losses,
    }


def save_checkpoint(path, model: EncoderModel, meta: Optional[dict] = None) -> None:
    """Binary checkpoint.

    ``FECK``, version u32, layer count u32, (out u32, in u32) per layer,
    float64 weights then bias per layer, then a u32-length-prefixed UTF-8
    JSON trailer with the model config and ``meta``.
    """
    layers = model.layers()
    buf = bytearray(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(layers)))
    for layer in layers:
        buf += struct.pack("<II", *layer.weight.shape)
    for layer in layers:
        buf += np.ascontiguousarray(layer.weight, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(layer.bias, dtype="<f8").tobytes()
    cfg = asdict(model.config)
    trailer = {
        "model": cfg,
        "encoder_layers": len(model.encoder),
        "projection_layers": len(model.projection),
        "projection_discardable": True,
        "step": model.step,
        "meta": meta or {},
    }
    text = json.dumps(trailer, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(text)) + text
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[EncoderModel, dict]:
    data = Path(path).read_bytes()
    try:
        return _decode_checkpoint(data, str(path))
    except (struct.error, ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        if isinstance(exc, (ParseError, ValidationError)):
            raise
        raise ParseError(f"corrupt or truncated checkpoint ({exc})", source=str(path)) from None


def _decode_checkpoint(data: bytes, source: str) -> tuple[EncoderModel, dict]:
    magic, version, count = struct.unpack_from("<4sII", data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ParseError(f"bad magic {magic!r}", source=source)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", source=source)
    off = 12
    shapes = []
    for _ in range(count):
        shapes.append(struct.unpack_from("<II", data, off))
        off += 8
    layers = []
    for out_dim, in_dim in shapes:
        w = np.frombuffer(data, dtype="<f8", count=out_dim * in_dim, offset=off).reshape(out_dim, in_dim)
        off += 8 * out_dim * in_dim
        b = np.frombuffer(data, dtype="<f8", count=out_dim, offset=off)
        off += 8 * out_dim
        layers.append(Layer(w.astype(np.float64), b.astype(np.float64)))
    (n,) = struct.unpack_from("<I", data, off)
    if off + 4 + n != len(data):
        raise ParseError("checkpoint trailer length does not match the file size", source=source)
    trailer = json.loads(data[off + 4:].decode("utf-8"))
    cfg = dict(trailer["model"])
    cfg["hidden_dims"] = tuple(cfg["hidden_dims"])
    config = ModelConfig(**cfg)
    ne = trailer["encoder_layers"]
    model = EncoderModel(config, layers[:ne], layers[ne:], trailer.get("step", 0))
    if [l.weight.shape for l in model.layers()] != list(zip(config.encoder_dims()[1:], config.encoder_dims()[:-1])) + \
            list(zip(config.projection_dims()[1:], config.projection_dims()[:-1])):
        raise ParseError("checkpoint layer shapes do not match its model config", source=source)
    return model, trailer
