"""Training objectives: Dice+BCE segmentation loss, the cosine
disentanglement penalty, and the two baseline regularizers (domain
adversary behind a gradient-reversal layer, MixStyle feature statistics
interpolation)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import grl_head_forward

DICE_EPS = 1e-6
UNIT_NORM_TOL = 1e-6


@dataclass
class LossReport:
    """aux holds additive baseline terms only, so that
    l_total == l_seg + lam*l_dis + sum(aux) within 1e-12;
    detail carries non-additive breakdowns (dice/bce parts)."""

    l_seg: float
    l_dis: float
    l_total: float
    lam: float
    aux: dict = field(default_factory=dict)
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "l_seg": self.l_seg,
            "l_dis": self.l_dis,
            "l_total": self.l_total,
            "lambda": self.lam,
            "aux": dict(self.aux),
            "detail": dict(self.detail),
        }


def _as_batched(arr_or_tensor, mask):
    probs = arr_or_tensor if isinstance(arr_or_tensor, T.Tensor) else T.Tensor(arr_or_tensor)
    mask = np.asarray(mask)
    if probs.ndim == 3:
        # single sample: logically [1,K,S,S]; leave tensor alone, lift mask
        if mask.ndim != 2:
            raise T.ShapeError(f"mask shape {mask.shape} does not match probs {probs.shape}")
        return probs, mask[None], True
    if probs.ndim == 4:
        if mask.ndim != 3:
            raise T.ShapeError(f"mask shape {mask.shape} does not match probs {probs.shape}")
        return probs, mask, False
    raise T.ShapeError(f"probs must be [K,S,S] or [N,K,S,S], got {probs.shape}")


def one_hot(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """[N,S,S] int labels -> [N,K,S,S] float64 indicator."""
    out = np.zeros((mask.shape[0], num_classes, *mask.shape[1:]))
    for k in range(num_classes):
        out[:, k] = mask == k
    return out


def _check_probs(probs_data: np.ndarray) -> None:
    sums = probs_data.sum(axis=-3)
    if np.abs(sums - 1.0).max() > UNIT_NORM_TOL:
        raise ValueError("probs are not softmax outputs (pixel sums deviate from 1)")


def dice_loss(probs, mask) -> T.Tensor:
    """Soft Dice over all classes: 1 - mean_k (2*sum(p*g)+eps)/(sum p + sum g + eps)."""
    probs, mask, single = _as_batched(probs, mask)
    _check_probs(probs.data)
    k = probs.shape[-3]
    g = one_hot(mask, k)
    if single:
        g = g[0]
        axes = (1, 2)
    else:
        axes = (2, 3)
    gt = T.Tensor(g)
    inter = T.reduce_sum(T.mul(probs, gt), axes=axes)
    psum = T.reduce_sum(probs, axes=axes)
    gsum = T.reduce_sum(gt, axes=axes)
    dice = T.div(
        T.add(T.mul(inter, 2.0), DICE_EPS),
        T.add(T.add(psum, gsum), DICE_EPS),
    )
    return T.sub(1.0, T.reduce_mean(dice))


def bce_loss(probs, mask) -> T.Tensor:
    """Mean over pixels of -log p_true, with the engine's log guard."""
    probs, mask, single = _as_batched(probs, mask)
    _check_probs(probs.data)
    k = probs.shape[-3]
    g = one_hot(mask, k)
    if single:
        g = g[0]
    picked = T.reduce_sum(T.mul(T.log(probs), T.Tensor(g)), axes=(-3 % probs.ndim,))
    return T.neg(T.reduce_mean(picked))


def seg_loss(logits, mask):
    """Softmax then 0.5*Dice + 0.5*BCE; returns (loss, {'dice':..,'bce':..})."""
    logits = logits if isinstance(logits, T.Tensor) else T.Tensor(logits)
    probs = T.softmax(logits, axis=logits.ndim - 3)
    d = dice_loss(probs, mask)
    b = bce_loss(probs, mask)
    loss = T.add(T.mul(d, 0.5), T.mul(b, 0.5))
    return loss, {"dice": d.item(), "bce": b.item()}


def dis_loss(z_image, z_style, mode: str = "signed") -> T.Tensor:
    """Cosine alignment of unit vectors: the dot product (batch-averaged).

    mode="squared" penalizes cos^2 instead; the signed form is the default.
    """
    zi = z_image if isinstance(z_image, T.Tensor) else T.Tensor(z_image)
    zs = np.asarray(z_style.data if isinstance(z_style, T.Tensor) else z_style)
    if zi.shape != zs.shape:
        raise T.ShapeError(f"embedding shapes differ: {zi.shape} vs {zs.shape}")
    for name, arr in (("z_image", zi.data), ("z_style", zs)):
        norms = np.sqrt((arr * arr).sum(axis=-1))
        if np.abs(norms - 1.0).max() > UNIT_NORM_TOL:
            raise ValueError(f"{name} is not unit-norm (max dev {np.abs(norms-1).max():.2e})")
    prod = T.mul(zi, T.Tensor(zs))
    row = T.reduce_sum(prod, axes=(zi.ndim - 1,))
    if mode == "squared":
        row = T.mul(row, row)
    elif mode != "signed":
        raise ValueError(f"unknown dis_loss mode {mode!r}")
    return T.reduce_mean(row)


def total_loss(logits, mask, z_image, z_style, lam: float,
               dis_mode: str = "signed"):
    """L_total = L_seg + lambda * L_dis; returns (loss tensor, LossReport)."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    seg, parts = seg_loss(logits, mask)
    dis = dis_loss(z_image, z_style, mode=dis_mode)
    total = T.add(seg, T.mul(dis, float(lam)))
    report = LossReport(
        l_seg=seg.item(),
        l_dis=dis.item(),
        l_total=total.item(),
        lam=float(lam),
        detail=parts,
    )
    return total, report


def grl_domain_loss(f, domain_labels, head: dict, lambda_grl: float) -> T.Tensor:
    """Cross-entropy of a small domain classifier fed through grad_reverse."""
    labels = np.asarray(domain_labels, dtype=int)
    pooled = T.reduce_mean(f, axes=(2, 3))
    logits = grl_head_forward(head, pooled, lambda_grl)
    n_dom = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_dom:
        raise ValueError(f"domain label outside [0,{n_dom})")
    g = np.zeros(logits.shape)
    g[np.arange(len(labels)), labels] = 1.0
    p = T.softmax(logits, axis=1)
    picked = T.reduce_sum(T.mul(T.log(p), T.Tensor(g)), axes=(1,))
    return T.neg(T.reduce_mean(picked))


def mixstyle_apply(feats: T.Tensor, lam: float, perm: np.ndarray) -> T.Tensor:
    """Interpolate per-channel (mu, sigma) with a partner instance.

    Statistics are detached constants; gradient flows through the
    normalized content term only.
    """
    mu, sig = T.instance_stats(feats)
    mu, sig = mu.data, sig.data
    mu_mix = lam * mu[perm] + (1.0 - lam) * mu
    sig_mix = lam * sig[perm] + (1.0 - lam) * sig
    scale = sig_mix / sig
    shift = mu_mix - mu * scale
    return T.instance_affine(feats, scale, shift)


def mixstyle_augment(feats: T.Tensor, alpha: float, rng: np.random.Generator) -> T.Tensor:
    """Training-time MixStyle: applied with probability 0.5 per batch,
    lam ~ Beta(alpha, alpha), random permutation pairing."""
    n = feats.shape[0]
    if n < 2:
        raise ValueError("mixstyle needs batch size >= 2")
    if alpha <= 0:
        raise ValueError("mixstyle alpha must be > 0")
    if rng.uniform() >= 0.5:
        return feats
    lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(n)
    return mixstyle_apply(feats, lam, perm)
