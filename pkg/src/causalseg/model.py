"""Segmentation network: frozen convolutional encoder, trainable residual
adapter, projection head into the style-embedding space, and a decoder whose
stages carry per-channel affine (FiLM) modulation hooks.

The encoder is deliberately parameter-heavy in its cheap 8x8 stage and is
trained once on a style-to-clean reconstruction pretask over the full style
space, then frozen; everything downstream stays under a tenth of the total
parameter count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .optim import Adam
from .styletext import EMBED_DIM, AttributeCodebook
from .util import array_sha256, rng_from

SNAPSHOT_VERSION = "CSLM1"


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    num_classes: int = 4
    enc_channels: tuple = (24, 48, 96)
    enc_extra_convs: tuple = (1, 1, 4)  # 3x3 convs after each stage's strided conv
    bottleneck_channels: int = 64
    adapter_channels: int = 64
    proj_hidden: int = 128
    embed_dim: int = EMBED_DIM
    dec_channels: tuple = (24, 12, 8)
    dec_kernel: int = 3

    def validate(self) -> "ModelConfig":
        if len(self.enc_channels) != 3 or len(self.dec_channels) != 3:
            raise ValueError("encoder/decoder must have 3 stages")
        if self.image_size % 8 != 0:
            raise ValueError("image_size must be divisible by 8")
        return self

    @property
    def bottleneck_hw(self) -> int:
        return self.image_size // 8

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "num_classes": self.num_classes,
            "enc_channels": list(self.enc_channels),
            "enc_extra_convs": list(self.enc_extra_convs),
            "bottleneck_channels": self.bottleneck_channels,
            "adapter_channels": self.adapter_channels,
            "proj_hidden": self.proj_hidden,
            "embed_dim": self.embed_dim,
            "dec_channels": list(self.dec_channels),
            "dec_kernel": self.dec_kernel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            image_size=int(d["image_size"]),
            num_classes=int(d["num_classes"]),
            enc_channels=tuple(d["enc_channels"]),
            enc_extra_convs=tuple(d["enc_extra_convs"]),
            bottleneck_channels=int(d["bottleneck_channels"]),
            adapter_channels=int(d["adapter_channels"]),
            proj_hidden=int(d["proj_hidden"]),
            embed_dim=int(d["embed_dim"]),
            dec_channels=tuple(d["dec_channels"]),
            dec_kernel=int(d.get("dec_kernel", 3)),
        ).validate()


class FilmWidthError(ValueError):
    pass


@dataclass
class FiLMParams:
    """Per-decoder-stage channel-wise scale and shift."""

    gammas: tuple
    betas: tuple

    GAMMA_CLAMP = (0.25, 4.0)
    BETA_CLAMP = (-2.0, 2.0)

    @classmethod
    def identity(cls, widths) -> "FiLMParams":
        return cls(
            gammas=tuple(np.ones(w) for w in widths),
            betas=tuple(np.zeros(w) for w in widths),
        )

    @classmethod
    def from_compact(cls, compact, widths) -> "FiLMParams":
        """Expand 2*L scalars (gamma scales then beta shifts) per-channel."""
        compact = np.asarray(compact, dtype=np.float64)
        L = len(widths)
        if compact.shape != (2 * L,):
            raise FilmWidthError(f"compact vector must have {2*L} entries")
        return cls(
            gammas=tuple(np.full(w, compact[i]) for i, w in enumerate(widths)),
            betas=tuple(np.full(w, compact[L + i]) for i, w in enumerate(widths)),
        )

    def validate(self, widths) -> "FiLMParams":
        got = tuple(len(g) for g in self.gammas)
        gotb = tuple(len(b) for b in self.betas)
        if got != tuple(widths) or gotb != tuple(widths):
            raise FilmWidthError(
                f"FiLM widths {got}/{gotb} do not match decoder widths {tuple(widths)}"
            )
        return self

    def clamped(self) -> "FiLMParams":
        lo_g, hi_g = self.GAMMA_CLAMP
        lo_b, hi_b = self.BETA_CLAMP
        return FiLMParams(
            gammas=tuple(np.clip(g, lo_g, hi_g) for g in self.gammas),
            betas=tuple(np.clip(b, lo_b, hi_b) for b in self.betas),
        )

    def is_identity(self, tol: float = 0.0) -> bool:
        return all(np.abs(g - 1.0).max() <= tol for g in self.gammas) and all(
            np.abs(b).max() <= tol for b in self.betas
        )

    def summary(self) -> dict:
        return {
            "gamma_mean": [float(g.mean()) for g in self.gammas],
            "gamma_min": [float(g.min()) for g in self.gammas],
            "gamma_max": [float(g.max()) for g in self.gammas],
            "beta_mean": [float(b.mean()) for b in self.betas],
        }


# ---------------------------------------------------------------------------
# parameter containers


def _he_conv(rng, c_out, c_in, kh, kw):
    std = np.sqrt(2.0 / (c_in * kh * kw))
    return T.Tensor(rng.normal(0.0, std, size=(c_out, c_in, kh, kw)), requires_grad=True)


def _he_linear(rng, d_in, d_out):
    std = np.sqrt(2.0 / d_in)
    return T.Tensor(rng.normal(0.0, std, size=(d_in, d_out)), requires_grad=True)


def _zeros(*shape):
    return T.Tensor(np.zeros(shape), requires_grad=True)


def init_encoder(cfg: ModelConfig, seed: int) -> dict:
    rng = rng_from(seed, "encoder-init")
    p = {}
    c_in = 1
    for i, (c_out, extra) in enumerate(zip(cfg.enc_channels, cfg.enc_extra_convs)):
        p[f"s{i}.down.w"] = _he_conv(rng, c_out, c_in, 3, 3)
        p[f"s{i}.down.b"] = _zeros(c_out)
        for j in range(extra):
            p[f"s{i}.c{j}.w"] = _he_conv(rng, c_out, c_out, 3, 3)
            p[f"s{i}.c{j}.b"] = _zeros(c_out)
        c_in = c_out
    p["neck.w"] = _he_conv(rng, cfg.bottleneck_channels, c_in, 3, 3)
    p["neck.b"] = _zeros(cfg.bottleneck_channels)
    return p


def init_adapter(cfg: ModelConfig, seed: int) -> dict:
    rng = rng_from(seed, "adapter-init")
    c = cfg.bottleneck_channels
    return {
        "c1.w": _he_conv(rng, cfg.adapter_channels, c, 1, 1),
        "c1.b": _zeros(cfg.adapter_channels),
        # zero-init residual branch output: initial f == raw features
        "c2.w": _zeros(c, cfg.adapter_channels, 1, 1),
        "c2.b": _zeros(c),
    }


def init_proj(cfg: ModelConfig, seed: int) -> dict:
    rng = rng_from(seed, "proj-init")
    return {
        "fc1.w": _he_linear(rng, cfg.bottleneck_channels, cfg.proj_hidden),
        "fc1.b": _zeros(cfg.proj_hidden),
        "fc2.w": _he_linear(rng, cfg.proj_hidden, cfg.embed_dim),
        "fc2.b": _zeros(cfg.embed_dim),
    }


def init_decoder(cfg: ModelConfig, seed: int) -> dict:
    rng = rng_from(seed, "decoder-init")
    p = {}
    c_in = cfg.bottleneck_channels
    kk = cfg.dec_kernel
    for i, c_out in enumerate(cfg.dec_channels):
        p[f"st{i}.w"] = _he_conv(rng, c_out, c_in, kk, kk)
        p[f"st{i}.b"] = _zeros(c_out)
        c_in = c_out
    p["head.w"] = _he_conv(rng, cfg.num_classes, c_in, 1, 1)
    p["head.b"] = _zeros(cfg.num_classes)
    return p


def init_grl_head(cfg: ModelConfig, n_domains: int, seed: int) -> dict:
    rng = rng_from(seed, "grl-init")
    return {
        "fc1.w": _he_linear(rng, cfg.bottleneck_channels, 32),
        "fc1.b": _zeros(32),
        "fc2.w": _he_linear(rng, 32, n_domains),
        "fc2.b": _zeros(n_domains),
    }


def init_recon_decoder(cfg: ModelConfig, seed: int) -> dict:
    rng = rng_from(seed, "recon-init")
    p = {}
    c_in = cfg.bottleneck_channels
    for i, c_out in enumerate((24, 12, 8)):
        p[f"st{i}.w"] = _he_conv(rng, c_out, c_in, 3, 3)
        p[f"st{i}.b"] = _zeros(c_out)
        c_in = c_out
    p["head.w"] = _he_conv(rng, 1, c_in, 1, 1)
    p["head.b"] = _zeros(1)
    return p


def param_list(params: dict) -> list:
    return [params[k] for k in sorted(params)]


def n_params(params: dict) -> int:
    return sum(p.size for p in params.values())


def params_hash(params: dict) -> str:
    return array_sha256(*(params[k].data for k in sorted(params)))


def set_requires_grad(params: dict, flag: bool) -> None:
    for p in params.values():
        p.requires_grad = flag


def copy_params(params: dict) -> dict:
    out = {}
    for k, p in params.items():
        q = T.Tensor(p.data.copy(), requires_grad=p.requires_grad)
        out[k] = q
    return out


# ---------------------------------------------------------------------------
# forward passes (all batched NCHW)


def _conv_block(x, w, b, stride=1, padding=1):
    return T.relu(T.add(T.conv2d(x, w, stride=stride, padding=padding), b))


def encoder_forward(p: dict, cfg: ModelConfig, x: T.Tensor) -> T.Tensor:
    h = x
    for i, extra in enumerate(cfg.enc_extra_convs):
        h = _conv_block(h, p[f"s{i}.down.w"], p[f"s{i}.down.b"], stride=2)
        for j in range(extra):
            h = _conv_block(h, p[f"s{i}.c{j}.w"], p[f"s{i}.c{j}.b"])
    h = _conv_block(h, p["neck.w"], p["neck.b"])
    if "norm.scale" in p:
        # freeze-time output standardization (fixed affine, part of the
        # frozen encoder): keeps downstream optimization well-conditioned
        h = T.add(T.mul(h, p["norm.scale"]), p["norm.shift"])
    return h


def adapter_forward(p: dict, raw: T.Tensor) -> T.Tensor:
    h = _conv_block(raw, p["c1.w"], p["c1.b"], padding=0)
    res = T.add(T.conv2d(h, p["c2.w"], stride=1, padding=0), p["c2.b"])
    return T.add(raw, res)


def proj_forward(p: dict, f: T.Tensor) -> T.Tensor:
    pooled = T.reduce_mean(f, axes=(2, 3))
    h = T.relu(T.add(T.matmul(pooled, p["fc1.w"]), p["fc1.b"]))
    z = T.add(T.matmul(h, p["fc2.w"]), p["fc2.b"])
    return T.l2_normalize(z, axis=-1)


def decoder_forward(
    p: dict, cfg: ModelConfig, f: T.Tensor, film: Optional[FiLMParams] = None
) -> T.Tensor:
    if film is not None:
        film.validate(cfg.dec_channels)
    h = f
    pad = cfg.dec_kernel // 2
    for i in range(len(cfg.dec_channels)):
        h = T.upsample_nearest(h, 2)
        h = _conv_block(h, p[f"st{i}.w"], p[f"st{i}.b"], padding=pad)
        if film is not None:
            h = T.add(T.mul(h, T.Tensor(film.gammas[i])), T.Tensor(film.betas[i]))
    return T.add(T.conv2d(h, p["head.w"], stride=1, padding=0), p["head.b"])


def recon_forward(p: dict, cfg: ModelConfig, f: T.Tensor) -> T.Tensor:
    h = f
    for i in range(3):
        h = T.upsample_nearest(h, 2)
        h = _conv_block(h, p[f"st{i}.w"], p[f"st{i}.b"])
    return T.add(T.conv2d(h, p["head.w"], stride=1, padding=0), p["head.b"])


def grl_head_forward(p: dict, pooled: T.Tensor, lambda_grl: float) -> T.Tensor:
    h = T.grad_reverse(pooled, lambda_grl)
    h = T.relu(T.add(T.matmul(h, p["fc1.w"]), p["fc1.b"]))
    return T.add(T.matmul(h, p["fc2.w"]), p["fc2.b"])


# ---------------------------------------------------------------------------
# the bundled model


def as_batch(images) -> np.ndarray:
    """[S,S] | [N,S,S] | [N,1,S,S] -> float64 [N,1,S,S]."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    elif arr.ndim != 4:
        raise T.ShapeError(f"expected image(s), got shape {arr.shape}")
    return arr


@dataclass
class SegModel:
    cfg: ModelConfig
    encoder: dict
    adapter: dict
    proj: dict
    decoder: dict
    grl_head: Optional[dict] = None
    encoder_frozen: bool = False

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int, encoder: Optional[dict] = None,
                   n_grl_domains: int = 0) -> "SegModel":
        cfg.validate()
        enc = encoder if encoder is not None else init_encoder(cfg, seed)
        return cls(
            cfg=cfg,
            encoder=enc,
            adapter=init_adapter(cfg, seed),
            proj=init_proj(cfg, seed),
            decoder=init_decoder(cfg, seed),
            grl_head=init_grl_head(cfg, n_grl_domains, seed) if n_grl_domains else None,
            encoder_frozen=encoder is not None,
        )

    # -- contracts ---------------------------------------------------------

    def freeze_encoder(self) -> None:
        set_requires_grad(self.encoder, False)
        self.encoder_frozen = True

    def encoder_hash(self) -> str:
        return params_hash(self.encoder)

    def trainable_params(self) -> dict:
        out = {}
        for prefix, group in (
            ("adapter", self.adapter),
            ("proj", self.proj),
            ("decoder", self.decoder),
        ):
            for k, v in group.items():
                out[f"{prefix}.{k}"] = v
        if self.grl_head is not None:
            for k, v in self.grl_head.items():
                out[f"grl.{k}"] = v
        return out

    def parameter_budget(self) -> dict:
        trainable = n_params(self.adapter) + n_params(self.proj) + n_params(self.decoder)
        total = trainable + n_params(self.encoder)
        return {
            "trainable": trainable,
            "frozen": n_params(self.encoder),
            "total": total,
            "trainable_ratio": trainable / total,
        }

    # -- forward -----------------------------------------------------------

    def encode(self, images) -> T.Tensor:
        if not self.encoder_frozen:
            raise RuntimeError("encode() requires a frozen encoder")
        batch = as_batch(images)
        s = self.cfg.image_size
        if batch.shape[2:] != (s, s):
            raise T.ShapeError(f"expected {s}x{s} images, got {batch.shape[2:]}")
        return encoder_forward(self.encoder, self.cfg, T.Tensor(batch))

    def adapt(self, raw: T.Tensor) -> T.Tensor:
        return adapter_forward(self.adapter, raw)

    def project(self, f: T.Tensor) -> T.Tensor:
        return proj_forward(self.proj, f)

    def decode(self, f: T.Tensor, film: Optional[FiLMParams] = None) -> T.Tensor:
        return decoder_forward(self.decoder, self.cfg, f, film)

    def forward_full(self, image, film: Optional[FiLMParams] = None):
        """Single image -> (logits [K,S,S], z_image [D])."""
        f = self.adapt(self.encode(image))
        logits = self.decode(f, film)
        z = self.project(f)
        return (
            T.Tensor(logits.data[0]),
            T.Tensor(z.data[0]),
        )

    def predict_mask(self, image, film: Optional[FiLMParams] = None) -> np.ndarray:
        f = self.adapt(self.encode(image))
        logits = self.decode(f, film)
        return np.argmax(logits.data, axis=1).astype(np.uint8)[0]


# ---------------------------------------------------------------------------
# encoder pretraining (style -> clean reconstruction pretask)


def pretrain_encoder(pool, cfg: ModelConfig, epochs: int = 6, seed: int = 0,
                     batch_size: int = 16, lr: float = 1e-3):
    """Train encoder + throwaway reconstruction decoder, then freeze.

    pool: (styled, clean, mask) triples spanning the style space. Returns
    (frozen encoder params, log dict); the reconstruction decoder is
    discarded. The log records held-out reconstruction MSE before/after.
    """
    if len(pool) < 200:
        raise ValueError(f"pretraining pool too small: {len(pool)} < 200")
    n_holdout = max(8, len(pool) // 10)
    fit, holdout = pool[:-n_holdout], pool[-n_holdout:]

    encoder = init_encoder(cfg, seed)
    recon = init_recon_decoder(cfg, seed)
    params = param_list(encoder) + param_list(recon)
    opt = Adam(params, lr=lr)

    def heldout_mse():
        total = 0.0
        for i in range(0, len(holdout), batch_size):
            chunk = holdout[i : i + batch_size]
            x = T.Tensor(as_batch(np.stack([c[0] for c in chunk])))
            target = as_batch(np.stack([c[1] for c in chunk]))
            pred = recon_forward(recon, cfg, encoder_forward(encoder, cfg, x))
            total += float(((pred.data - target) ** 2).mean()) * len(chunk)
        return total / len(holdout)

    mse_before = heldout_mse()
    order_rng = rng_from(seed, "pretrain-order")
    losses = []
    for _epoch in range(epochs):
        idx = order_rng.permutation(len(fit))
        for start in range(0, len(fit) - batch_size + 1, batch_size):
            chunk = [fit[j] for j in idx[start : start + batch_size]]
            x = T.Tensor(as_batch(np.stack([c[0] for c in chunk])))
            target = T.Tensor(as_batch(np.stack([c[1] for c in chunk])))
            opt.zero_grad()
            with T.Tape():
                pred = recon_forward(recon, cfg, encoder_forward(encoder, cfg, x))
                err = T.sub(pred, target)
                loss = T.reduce_mean(T.mul(err, err))
                T.backward(loss)
            opt.step()
            losses.append(loss.item())
    mse_after = heldout_mse()

    # per-channel standardization of the bottleneck, estimated on the pool
    # and frozen with the encoder
    acc = []
    for i in range(0, min(len(pool), 128), batch_size):
        chunk = pool[i : i + batch_size]
        x = T.Tensor(as_batch(np.stack([c[0] for c in chunk])))
        acc.append(encoder_forward(encoder, cfg, x).data)
    feats = np.concatenate(acc, axis=0)
    mu = feats.mean(axis=(0, 2, 3))
    sigma = np.maximum(feats.std(axis=(0, 2, 3)), 1e-3)
    encoder["norm.scale"] = T.Tensor(1.0 / sigma)
    encoder["norm.shift"] = T.Tensor(-mu / sigma)

    set_requires_grad(encoder, False)
    log = {
        "pool_size": len(pool),
        "epochs": epochs,
        "heldout_mse_before": mse_before,
        "heldout_mse_after": mse_after,
        "final_train_loss": losses[-1] if losses else None,
    }
    return encoder, log


def encode_images(model: SegModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Frozen-encoder features for a stack of [N,S,S] images, no recording."""
    outs = []
    for i in range(0, len(images), batch_size):
        outs.append(model.encode(images[i : i + batch_size]).data)
    return np.concatenate(outs, axis=0)
