"""Toy differentiable encoder/projection-head/decoder stack with an EMA teacher.

Miniature stand-in for an encoder-decoder segmentation network: dense
downsampling blocks summarize the image into a d-dimensional feature, a
two-layer LeakyReLU head maps it to the embedding space (unit-normalized),
and a dense decoder with one concatenated skip recovers per-pixel class
logits. Everything is float64 on the autodiff tape; parameters are plain
named Tensors so training loops, EMA shadows, and checkpoints stay dumb.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, l2_normalize_rows
from .errors import InvalidConfig, ShapeMismatch

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_shape: tuple[int, int] = (16, 16)
    num_classes: int = 2
    arch: str = "conv"  # "conv": weight-shared downsampling blocks; "dense": flat projections
    conv_channels: tuple[int, int] = (6, 12)
    encoder_widths: tuple[int, ...] = (64, 32)  # dense arch only
    head_hidden: int = 64
    embed_dim: int = 32
    decoder_width: int = 64
    skip_width: int = 16  # dense arch only; conv skips at full resolution
    leaky_slope: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ("conv", "dense"):
            raise InvalidConfig(f"arch must be 'conv' or 'dense', got {self.arch!r}")
        if len(self.encoder_widths) < 1:
            raise InvalidConfig("need at least one encoder block")
        if self.num_classes < 2:
            raise InvalidConfig("need at least two classes")
        if self.arch == "conv" and any(s % 4 for s in self.image_shape):
            raise InvalidConfig("conv arch downsamples twice; image dims must be divisible by 4")

    @property
    def num_pixels(self) -> int:
        return int(np.prod(self.image_shape))

    @property
    def feature_dim(self) -> int:
        return self.encoder_widths[-1] if self.arch == "dense" else 32


def _init_params(config: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(config.seed)

    def dense(name, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{name}.w"] = Tensor(
            rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=f"{name}.w"
        )
        params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")

    params: dict[str, Tensor] = {}
    if config.arch == "conv":
        c1, c2 = config.conv_channels
        h, w = config.image_shape
        bottleneck = (h // 4) * (w // 4) * c2
        dense("enc.c0", 9 * 1, c1)
        dense("enc.c1", 9 * c1, c2)
        dense("enc.proj", bottleneck, config.feature_dim)
        dense("head.0", config.feature_dim, config.head_hidden)
        dense("head.1", config.head_hidden, config.embed_dim)
        dense("dec.proj", config.feature_dim, bottleneck)
        dense("dec.c0", 9 * c2, c1)
        dense("dec.out", 1 * (c1 + c1), config.num_classes)  # 1x1 conv over concat with skip
    else:
        sizes = [config.num_pixels, *config.encoder_widths]
        for i, (fi, fo) in enumerate(zip(sizes, sizes[1:])):
            dense(f"enc.{i}", fi, fo)
        dense("head.0", config.feature_dim, config.head_hidden)
        dense("head.1", config.head_hidden, config.embed_dim)
        dense("dec.0", config.feature_dim, config.decoder_width)
        if config.skip_width > 0:
            dense("dec.skip", config.encoder_widths[0], config.skip_width)
        dense("dec.out", config.decoder_width + config.skip_width, config.num_pixels * config.num_classes)
    return params


class ParamModel:
    """Encoder E, head g, decoder D as one named-parameter collection."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else _init_params(config)

    # -- forward passes (functional over self.params; teacher reuses them) --

    def _flatten(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
        h, w = self.config.image_shape
        if x.ndim == 2 and x.shape == (h, w):
            x = x.reshape(1, h * w)
        elif x.ndim == 3 and x.shape[1:] == (h, w):
            x = x.reshape(x.shape[0], h * w)
        else:
            raise ShapeMismatch(f"expected (H, W) or (B, H, W) with H,W={self.config.image_shape}, got {x.shape}")
        return x

    def _conv_block(self, x: Tensor, name: str, hw: tuple[int, int]) -> Tensor:
        from .autodiff import conv2d

        out = conv2d(x, self.params[f"{name}.w"], hw)
        b = self.params[f"{name}.b"]
        c = b.shape[0]
        n = out.shape[0] * out.shape[1] // c
        return (out.reshape(n, c) + b).reshape(out.shape).leaky_relu(self.config.leaky_slope)

    def encode(self, images) -> tuple[Tensor, Tensor]:
        """Feature vectors and the full-resolution first-block skip activations."""
        x = self._flatten(images)
        if self.config.arch == "conv":
            from .autodiff import avg_pool2x

            h, w = self.config.image_shape
            a1 = self._conv_block(x, "enc.c0", (h, w))
            skip = a1
            p1 = avg_pool2x(a1, (h, w))
            a2 = self._conv_block(p1, "enc.c1", (h // 2, w // 2))
            p2 = avg_pool2x(a2, (h // 2, w // 2))
            feat = (p2 @ self.params["enc.proj.w"] + self.params["enc.proj.b"]).leaky_relu(
                self.config.leaky_slope
            )
            return feat, skip
        h = x
        skip = None
        for i in range(len(self.config.encoder_widths)):
            h = (h @ self.params[f"enc.{i}.w"] + self.params[f"enc.{i}.b"]).leaky_relu(
                self.config.leaky_slope
            )
            if i == 0:
                skip = h
        return h, skip

    def embed_batch(self, images) -> Tensor:
        """Unit-norm embeddings z = normalize(g(E(x))), shape (B, embed_dim)."""
        feat, _ = self.encode(images)
        h = (feat @ self.params["head.0.w"] + self.params["head.0.b"]).leaky_relu(
            self.config.leaky_slope
        )
        z = h @ self.params["head.1.w"] + self.params["head.1.b"]
        return l2_normalize_rows(z)

    def segment_batch(self, images) -> Tensor:
        """Per-pixel class logits, shape (B, H, W, num_classes)."""
        feat, skip = self.encode(images)
        h, w = self.config.image_shape
        if self.config.arch == "conv":
            from .autodiff import conv2d, upsample2x

            c1, c2 = self.config.conv_channels
            u = (feat @ self.params["dec.proj.w"] + self.params["dec.proj.b"]).leaky_relu(
                self.config.leaky_slope
            )
            u = upsample2x(u, (h // 4, w // 4))
            u = self._conv_block(u, "dec.c0", (h // 2, w // 2))
            u = upsample2x(u, (h // 2, w // 2))
            b = u.shape[0]
            cat = concat([u.reshape(b, h * w, c1), skip.reshape(b, h * w, c1)], axis=2)
            cat = cat.reshape(b, h * w * 2 * c1)
            logits = conv2d(cat, self.params["dec.out.w"], (h, w))
            bias = self.params["dec.out.b"]
            logits = (logits.reshape(b * h * w, self.config.num_classes) + bias).reshape(
                b, h * w * self.config.num_classes
            )
        else:
            u = (feat @ self.params["dec.0.w"] + self.params["dec.0.b"]).leaky_relu(
                self.config.leaky_slope
            )
            if self.config.skip_width > 0:
                shortcut = (skip @ self.params["dec.skip.w"] + self.params["dec.skip.b"]).leaky_relu(
                    self.config.leaky_slope
                )
                u = concat([u, shortcut], axis=1)
            logits = u @ self.params["dec.out.w"] + self.params["dec.out.b"]
        return logits.reshape(logits.shape[0], h, w, self.config.num_classes)

    # -- parameter bookkeeping --

    def encoder_head_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(("enc.", "head."))}

    def decoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("dec.")}

    def parameter_counts(self) -> dict[str, int]:
        return {
            "encoder_head": sum(v.data.size for v in self.encoder_head_params().values()),
            "decoder": sum(v.data.size for v in self.decoder_params().values()),
        }

    def reset_decoder(self, seed: int | None = None) -> None:
        """Fresh decoder init (used when moving from pre-training to segmentation)."""
        fresh = _init_params(
            ModelConfig(**{**self.config.__dict__, "seed": self.config.seed if seed is None else seed})
        )
        for k in list(self.params):
            if k.startswith("dec."):
                self.params[k] = fresh[k]

    def copy(self) -> "ParamModel":
        return ParamModel(self.config, dict(self.params))

    # -- persistence --

    def save(self, path) -> None:
        arrays = {k: v.data for k, v in self.params.items()}
        meta = json.dumps(
            {"format_version": CHECKPOINT_FORMAT_VERSION, "config": _config_dict(self.config)}
        )
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "ParamModel":
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise InvalidConfig(f"unsupported checkpoint format: {meta.get('format_version')}")
            cfg_d = meta["config"]
            cfg = ModelConfig(
                image_shape=tuple(cfg_d["image_shape"]),
                num_classes=cfg_d["num_classes"],
                arch=cfg_d["arch"],
                conv_channels=tuple(cfg_d["conv_channels"]),
                encoder_widths=tuple(cfg_d["encoder_widths"]),
                head_hidden=cfg_d["head_hidden"],
                embed_dim=cfg_d["embed_dim"],
                decoder_width=cfg_d["decoder_width"],
                skip_width=cfg_d["skip_width"],
                leaky_slope=cfg_d["leaky_slope"],
                seed=cfg_d["seed"],
            )
            params = {
                k: Tensor(data[k], requires_grad=True, name=k) for k in data.files if k != "__meta__"
            }
        return cls(cfg, params)


def _config_dict(config: ModelConfig) -> dict:
    return {
        "image_shape": list(config.image_shape),
        "num_classes": config.num_classes,
        "arch": config.arch,
        "conv_channels": list(config.conv_channels),
        "encoder_widths": list(config.encoder_widths),
        "head_hidden": config.head_hidden,
        "embed_dim": config.embed_dim,
        "decoder_width": config.decoder_width,
        "skip_width": config.skip_width,
        "leaky_slope": config.leaky_slope,
        "seed": config.seed,
    }


def embed(model: ParamModel, image) -> Tensor:
    """Single-image embedding, shape (embed_dim,)."""
    return model.embed_batch(np.asarray(image)[None]).reshape(model.config.embed_dim)


def segment(model: ParamModel, image) -> Tensor:
    """Single-image logits, shape (H, W, num_classes)."""
    h, w = model.config.image_shape
    return model.segment_batch(np.asarray(image)[None]).reshape(h, w, model.config.num_classes)


class EmaTeacher:
    """Exponential-moving-average shadow of a model's parameters.

    Never updated by gradients; ema_update pulls it toward the student.
    """

    def __init__(self, student: ParamModel, decay: float = 0.99):
        if not (0.0 <= decay < 1.0):
            raise InvalidConfig(f"decay must be in [0, 1), got {decay}")
        self.decay = float(decay)
        self.config = student.config
        self.shadow: dict[str, np.ndarray] = {k: np.array(v.data) for k, v in student.params.items()}

    def as_model(self) -> ParamModel:
        """Frozen view for inference: constant tensors, no gradient tracking."""
        return ParamModel(
            self.config, {k: Tensor(v, requires_grad=False, name=k) for k, v in self.shadow.items()}
        )


def ema_update(teacher: EmaTeacher, student: ParamModel, decay: float | None = None) -> EmaTeacher:
    """teacher <- decay * teacher + (1 - decay) * student, parameter-wise."""
    a = teacher.decay if decay is None else float(decay)
    if not (0.0 <= a < 1.0):
        raise InvalidConfig(f"decay must be in [0, 1), got {a}")
    for k, s in student.params.items():
        t = teacher.shadow.get(k)
        if t is None or t.shape != s.shape:
            raise ShapeMismatch(f"teacher/student mismatch on {k!r}")
        teacher.shadow[k] = a * t + (1.0 - a) * s.data
    return teacher
