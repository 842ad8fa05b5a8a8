"""Evaluation metrics with brute-force-checkable definitions.

hd95 follows the pooled-symmetric convention: the 95th percentile (linear
interpolation) over the union of both directed boundary-distance sets.
The per-direction-then-max alternative is available via mode flag for
sensitivity analysis. Empty boundary sets yield a NaN sentinel that
aggregators exclude and count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .util import rng_from


@dataclass
class EvalRecord:
    sample_index: int
    domain: str
    class_id: int
    dice: float
    hd95: float  # NaN when either boundary set is empty

    def to_dict(self) -> dict:
        return {
            "sample_index": self.sample_index,
            "domain": self.domain,
            "class_id": self.class_id,
            "dice": self.dice,
            "hd95": None if np.isnan(self.hd95) else self.hd95,
        }


def dice_score(pred_mask: np.ndarray, true_mask: np.ndarray, class_id: int) -> float:
    """2|P∩G| / (|P|+|G|); both empty -> 1.0, one empty -> 0.0."""
    p = pred_mask == class_id
    g = true_mask == class_id
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    inter = int((p & g).sum())
    return 2.0 * inter / (np_ + ng)


def boundary_pixels(mask: np.ndarray, class_id: int) -> np.ndarray:
    """[M,2] (y,x) coordinates of class pixels touching a non-class pixel
    (4-connectivity) or the image border."""
    sel = mask == class_id
    padded = np.pad(sel, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    boundary = sel & ~interior
    ys, xs = np.nonzero(boundary)
    return np.stack([ys, xs], axis=1) if len(ys) else np.empty((0, 2), dtype=int)


def _directed_min_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """min Euclidean distance from each point of a to the set b."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff.astype(np.float64) ** 2).sum(axis=2)).min(axis=1)


def hd95(
    pred_mask: np.ndarray,
    true_mask: np.ndarray,
    class_id: int,
    mode: str = "pooled",
) -> float:
    bp = boundary_pixels(pred_mask, class_id)
    bg = boundary_pixels(true_mask, class_id)
    if len(bp) == 0 or len(bg) == 0:
        return float("nan")
    d_pg = _directed_min_distances(bp, bg)
    d_gp = _directed_min_distances(bg, bp)
    if mode == "pooled":
        return float(np.percentile(np.concatenate([d_pg, d_gp]), 95))
    if mode == "per_direction_max":
        return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))
    raise ValueError(f"unknown hd95 mode {mode!r}")


def evaluate_masks(pred_masks, true_masks, num_classes: int, domain: str = "") -> list:
    """Per-sample, per-foreground-class EvalRecords."""
    records = []
    for i, (p, g) in enumerate(zip(pred_masks, true_masks)):
        for k in range(1, num_classes):
            records.append(
                EvalRecord(
                    sample_index=i,
                    domain=domain,
                    class_id=k,
                    dice=dice_score(p, g, k),
                    hd95=hd95(p, g, k),
                )
            )
    return records


def aggregate_records(records) -> dict:
    """Means over classes-then-samples; NaN hd95 sentinels excluded, counted."""
    dices = np.array([r.dice for r in records])
    hds = np.array([r.hd95 for r in records])
    finite = np.isfinite(hds)
    return {
        "dice": float(dices.mean()) if len(dices) else float("nan"),
        "hd95": float(hds[finite].mean()) if finite.any() else float("nan"),
        "hd95_sentinels": int((~finite).sum()),
        "n_records": len(records),
    }


# ---------------------------------------------------------------------------
# linear domain probe


def domain_probe(
    features: np.ndarray,
    labels: np.ndarray,
    split_seed: int,
    train_frac: float = 0.7,
    iters: int = 300,
    lr: float = 0.5,
) -> float:
    """Held-out accuracy of a multinomial linear classifier on pooled
    features; lower accuracy means less residual domain information."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("domain probe needs >= 2 domains")
    counts = np.array([(labels == c).sum() for c in classes])
    if counts.min() < 40:
        raise ValueError(f"domain probe needs >= 40 samples per domain, got {counts}")
    if counts.max() / counts.min() > 10:
        raise ValueError("domain probe class imbalance exceeds 10:1")

    rng = rng_from(split_seed, "probe-split")
    train_idx, test_idx = [], []
    for c in classes:
        idx = np.nonzero(labels == c)[0]
        idx = idx[rng.permutation(len(idx))]
        cut = int(round(train_frac * len(idx)))
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:])
    train_idx, test_idx = np.array(train_idx), np.array(test_idx)

    mu = features[train_idx].mean(axis=0)
    sd = np.maximum(features[train_idx].std(axis=0), 1e-8)
    xtr = (features[train_idx] - mu) / sd
    xte = (features[test_idx] - mu) / sd
    remap = {c: i for i, c in enumerate(classes)}
    ytr = np.array([remap[v] for v in labels[train_idx]])
    yte = np.array([remap[v] for v in labels[test_idx]])

    n, d = xtr.shape
    k = len(classes)
    w = np.zeros((d + 1, k))
    xb = np.concatenate([xtr, np.ones((n, 1))], axis=1)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), ytr] = 1.0
    for _ in range(iters):
        logits = xb @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * (xb.T @ (p - onehot)) / n
    xte_b = np.concatenate([xte, np.ones((len(xte), 1))], axis=1)
    pred = np.argmax(xte_b @ w, axis=1)
    return float((pred == yte).mean())


# ---------------------------------------------------------------------------
# 2-D PCA projection export


def _power_top2(cov: np.ndarray, iters: int = 500):
    d = cov.shape[0]
    comps, eigvals = [], []
    c = cov.copy()
    for j in range(2):
        v = rng_from("pca-power-init", j).normal(size=d)
        v /= np.linalg.norm(v)
        for _ in range(iters):
            v = c @ v
            for u in comps:  # keep deflation numerically clean
                v -= (v @ u) * u
            norm = np.linalg.norm(v)
            if norm < 1e-300:
                break
            v /= norm
        lam = float(v @ cov @ v)
        comps.append(v)
        eigvals.append(lam)
        c = c - lam * np.outer(v, v)
    return np.stack(comps), np.array(eigvals)


def pca2d_export(features: np.ndarray, labels=None):
    """Project onto the top-2 principal components (iterated power method
    on the centered covariance). Returns a list of (x, y, label) rows."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] < 3:
        raise ValueError("pca2d_export needs >= 3 samples")
    if labels is None:
        labels = [""] * x.shape[0]
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    comps, _ = _power_top2(cov)
    coords = centered @ comps.T
    return [(float(cx), float(cy), lab) for (cx, cy), lab in zip(coords, labels)]


def pca2d_components(features: np.ndarray):
    """(components [2,D], eigenvalues [2]) for verification."""
    x = np.asarray(features, dtype=np.float64)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    return _power_top2(cov)
