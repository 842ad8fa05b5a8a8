"""Training loops, run configuration, and snapshot persistence.

One hierarchically-split RNG per run: data order, weight init, and
augmentation draw from independent streams, so toggling one source of
randomness never shifts the others. NaN losses abort with a diagnostic
rather than skipping steps.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .losses import (
    LossReport,
    grl_domain_loss,
    mixstyle_augment,
    seg_loss,
    total_loss,
)
from .metrics import dice_score
from .model import (
    FiLMParams,
    ModelConfig,
    SegModel,
    copy_params,
    encode_images,
    params_hash,
    set_requires_grad,
)
from .optim import Adam, adam_step  # noqa: F401  (adam_step is part of the public surface)
from .snapshot import (
    MODEL_MAGIC,
    read_container,
    weights_from_bytes,
    weights_to_bytes,
    write_container,
)
from .styletext import AttributeCodebook, embed_descriptor
from .synthgen import SplitSet
from .util import canonical_json, derive_seed, rng_from

METHODS = ("lad", "erm_lambda0", "grl", "mixstyle")

CONTRAST_BIN_EDGES = (0.8, 1.3)


class NumericAbort(RuntimeError):
    """Raised when a loss term goes non-finite; carries (step, term)."""

    def __init__(self, step: int, term: str, value: float):
        super().__init__(f"non-finite loss at step {step}: {term} = {value}")
        self.step = step
        self.term = term


@dataclass(frozen=True)
class TrainConfig:
    method: str = "lad"
    lam: float = 0.1
    lambda_grl: float = 0.2
    mixstyle_alpha: float = 0.3
    dis_mode: str = "signed"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    epochs: int = 12
    batch_size: int = 16
    seed: int = 0
    val_fraction: float = 0.1
    token_dropout: float = 0.0

    def validate(self) -> "TrainConfig":
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.method == "grl" and self.lambda_grl <= 0:
            raise ValueError("grl method requires lambda_grl > 0")
        if self.method == "mixstyle" and self.mixstyle_alpha <= 0:
            raise ValueError("mixstyle method requires mixstyle_alpha > 0")
        if self.lam < 0 or not 0 < self.val_fraction < 0.5:
            raise ValueError("bad lambda or val_fraction")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        return self

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d).validate()


@dataclass
class ModelSnapshot:
    model: SegModel
    codebook: AttributeCodebook
    config_echo: dict
    seeds: dict
    version: str = "CSLM1"


def pseudo_domain_labels(samples):
    """Style-bin pseudo-domain labels for the GRL baseline.

    Bins are contrast tercile x noise kind; the strict protocol has one
    source domain, so its internal style spread provides the adversary's
    domain signal.
    """
    raw = []
    for s in samples:
        d = s.descriptor
        if d.contrast < CONTRAST_BIN_EDGES[0]:
            c = 0
        elif d.contrast < CONTRAST_BIN_EDGES[1]:
            c = 1
        else:
            c = 2
        n = {"none": 0, "gaussian": 1, "speckle": 2}[d.noise_kind]
        raw.append(c * 3 + n)
    present = sorted(set(raw))
    remap = {b: i for i, b in enumerate(present)}
    return np.array([remap[b] for b in raw]), len(present)


def foreground_dice(pred_masks, true_masks, num_classes: int) -> float:
    vals = [
        dice_score(p, g, k)
        for p, g in zip(pred_masks, true_masks)
        for k in range(1, num_classes)
    ]
    return float(np.mean(vals))


def train(cfg: TrainConfig, dataset: SplitSet, encoder: dict,
          model_cfg: ModelConfig, codebook: AttributeCodebook):
    """Returns (ModelSnapshot, runlog rows, timing dict).

    The runlog rows are fully deterministic; wall-clock lives only in the
    timing dict so artifact bytes stay reproducible.
    """
    cfg.validate()
    t_start = time.monotonic()
    set_requires_grad(encoder, False)

    n_val = max(1, int(round(cfg.val_fraction * len(dataset.train))))
    fit = dataset.train[:-n_val]
    val = dataset.train[-n_val:]

    if cfg.method == "grl":
        labels, n_bins = pseudo_domain_labels(fit)
        if n_bins < 2:
            raise ValueError("grl needs >= 2 style-bin pseudo-domains in training data")
    else:
        labels, n_bins = None, 0

    model = SegModel.initialize(
        model_cfg,
        seed=derive_seed(cfg.seed, "init"),
        encoder=encoder,
        n_grl_domains=n_bins,
    )
    enc_hash_before = model.encoder_hash()
    cb_hash_before = codebook.content_hash()

    fit_images = np.stack([s.image for s in fit])
    fit_masks = np.stack([s.mask for s in fit])
    val_images = np.stack([s.image for s in val])
    val_masks = np.stack([s.mask for s in val])
    fit_feats = encode_images(model, fit_images)
    val_feats = encode_images(model, val_images)

    aug_rng = rng_from(cfg.seed, "aug")
    order_rng = rng_from(cfg.seed, "order")
    if cfg.token_dropout > 0.0:
        z_styles = None
    else:
        z_styles = np.stack([embed_descriptor(s.descriptor, codebook) for s in fit])

    trainable = model.trainable_params()
    opt = Adam([trainable[k] for k in sorted(trainable)], lr=cfg.lr, betas=cfg.betas)

    lam_eff = 0.0 if cfg.method == "erm_lambda0" else cfg.lam
    runlog = []
    best = {"val_dice": -1.0, "epoch": -1, "weights": None}
    step = 0
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(fit))
        for start in range(0, len(fit) - cfg.batch_size + 1, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            raw = T.Tensor(fit_feats[idx])
            masks = fit_masks[idx]
            opt.zero_grad()
            with T.Tape():
                f = model.adapt(raw)
                if cfg.method == "mixstyle":
                    f = mixstyle_augment(f, cfg.mixstyle_alpha, aug_rng)
                logits = model.decode(f)
                if cfg.method in ("lad", "erm_lambda0"):
                    z_img = model.project(f)
                    if z_styles is None:
                        zs = np.stack(
                            [
                                embed_descriptor(
                                    fit[j].descriptor, codebook,
                                    token_dropout=cfg.token_dropout, rng=aug_rng,
                                )
                                for j in idx
                            ]
                        )
                    else:
                        zs = z_styles[idx]
                    loss, report = total_loss(
                        logits, masks, z_img, zs, lam_eff, dis_mode=cfg.dis_mode
                    )
                elif cfg.method == "grl":
                    segl, parts = seg_loss(logits, masks)
                    dom = grl_domain_loss(f, labels[idx], model.grl_head, cfg.lambda_grl)
                    loss = T.add(segl, dom)
                    report = LossReport(
                        l_seg=segl.item(), l_dis=0.0, l_total=loss.item(),
                        lam=0.0, aux={"grl_ce": dom.item()}, detail=parts,
                    )
                else:  # mixstyle
                    loss, parts = seg_loss(logits, masks)
                    report = LossReport(
                        l_seg=loss.item(), l_dis=0.0, l_total=loss.item(),
                        lam=0.0, detail=parts,
                    )
                if not np.isfinite(report.l_total):
                    raise NumericAbort(step, "l_total", report.l_total)
                T.backward(loss)
            opt.step()
            runlog.append({"type": "step", "step": step, "epoch": epoch,
                           **report.to_dict()})
            step += 1

        val_pred = _predict_from_feats(model, val_feats)
        val_dice = foreground_dice(val_pred, val_masks, model_cfg.num_classes)
        runlog.append({"type": "epoch", "epoch": epoch, "val_dice": val_dice})
        if val_dice > best["val_dice"]:
            best.update(
                val_dice=val_dice,
                epoch=epoch,
                weights={
                    "adapter": copy_params(model.adapter),
                    "proj": copy_params(model.proj),
                    "decoder": copy_params(model.decoder),
                    "grl_head": copy_params(model.grl_head) if model.grl_head else None,
                },
            )

    if best["weights"] is not None:
        model.adapter = best["weights"]["adapter"]
        model.proj = best["weights"]["proj"]
        model.decoder = best["weights"]["decoder"]
        model.grl_head = best["weights"]["grl_head"]
    runlog.append({"type": "final", "best_epoch": best["epoch"],
                   "best_val_dice": best["val_dice"]})

    if model.encoder_hash() != enc_hash_before:
        raise RuntimeError("frozen encoder was mutated during training")
    if codebook.content_hash() != cb_hash_before:
        raise RuntimeError("style codebook was mutated during training")

    snapshot = ModelSnapshot(
        model=model,
        codebook=codebook,
        config_echo={"train": cfg.to_dict(), "model": model_cfg.to_dict()},
        seeds={"train_seed": cfg.seed},
    )
    timing = {"wall_seconds": time.monotonic() - t_start, "steps": step}
    return snapshot, runlog, timing


def _predict_from_feats(model: SegModel, feats: np.ndarray,
                        film: FiLMParams | None = None,
                        batch_size: int = 64) -> np.ndarray:
    outs = []
    for i in range(0, len(feats), batch_size):
        f = model.adapt(T.Tensor(feats[i : i + batch_size]))
        logits = model.decode(f, film)
        outs.append(np.argmax(logits.data, axis=1).astype(np.uint8))
    return np.concatenate(outs, axis=0)


def predict_masks(model: SegModel, images: np.ndarray,
                  film: FiLMParams | None = None, batch_size: int = 64) -> np.ndarray:
    feats = encode_images(model, images, batch_size)
    return _predict_from_feats(model, feats, film, batch_size)


def pooled_adapter_features(model: SegModel, images: np.ndarray,
                            batch_size: int = 64) -> np.ndarray:
    """Spatially averaged adapter features, the probe's input."""
    feats = encode_images(model, images, batch_size)
    outs = []
    for i in range(0, len(feats), batch_size):
        f = model.adapt(T.Tensor(feats[i : i + batch_size]))
        outs.append(f.data.mean(axis=(2, 3)))
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# snapshot persistence


def save_snapshot(snap: ModelSnapshot, path) -> None:
    sections = {
        "meta": canonical_json(
            {"version": snap.version, "seeds": snap.seeds,
             "encoder_frozen": snap.model.encoder_frozen}
        ).encode("utf-8"),
        "config": canonical_json(
            {**snap.config_echo, "model": snap.model.cfg.to_dict()}
        ).encode("utf-8"),
        "encoder": weights_to_bytes(snap.model.encoder),
        "adapter": weights_to_bytes(snap.model.adapter),
        "proj": weights_to_bytes(snap.model.proj),
        "decoder": weights_to_bytes(snap.model.decoder),
        "codebook": snap.codebook.to_bytes(),
    }
    if snap.model.grl_head is not None:
        sections["grl_head"] = weights_to_bytes(snap.model.grl_head)
    write_container(path, MODEL_MAGIC, sections)


def load_snapshot(path) -> ModelSnapshot:
    sections = read_container(path, MODEL_MAGIC)
    meta = json.loads(sections["meta"].decode("utf-8"))
    config_echo = json.loads(sections["config"].decode("utf-8"))
    model_cfg = ModelConfig.from_dict(config_echo["model"])
    model = SegModel(
        cfg=model_cfg,
        encoder=weights_from_bytes(sections["encoder"]),
        adapter=weights_from_bytes(sections["adapter"]),
        proj=weights_from_bytes(sections["proj"]),
        decoder=weights_from_bytes(sections["decoder"]),
        grl_head=weights_from_bytes(sections["grl_head"]) if "grl_head" in sections else None,
        encoder_frozen=bool(meta["encoder_frozen"]),
    )
    codebook = AttributeCodebook.from_bytes(sections["codebook"])
    return ModelSnapshot(
        model=model,
        codebook=codebook,
        config_echo={k: v for k, v in config_echo.items() if k != "model"},
        seeds=meta["seeds"],
        version=meta["version"],
    )
