import numpy as np
import pytest

from causalseg import metrics as MX


# ---------------------------------------------------------------------------
# brute-force oracles (independent of the implementation path)


def dice_oracle(p_mask, g_mask, k):
    p = {tuple(c) for c in np.argwhere(p_mask == k)}
    g = {tuple(c) for c in np.argwhere(g_mask == k)}
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    return 2.0 * len(p & g) / (len(p) + len(g))


def boundary_oracle(mask, k):
    h, w = mask.shape
    pts = []
    for y in range(h):
        for x in range(w):
            if mask[y, x] != k:
                continue
            if y == 0 or x == 0 or y == h - 1 or x == w - 1:
                pts.append((y, x))
                continue
            if (
                mask[y - 1, x] != k
                or mask[y + 1, x] != k
                or mask[y, x - 1] != k
                or mask[y, x + 1] != k
            ):
                pts.append((y, x))
    return pts


def hd95_oracle(p_mask, g_mask, k):
    bp = boundary_oracle(p_mask, k)
    bg = boundary_oracle(g_mask, k)
    if not bp or not bg:
        return float("nan")
    pooled = []
    for a, bset in ((bp, bg), (bg, bp)):
        for y, x in a:
            pooled.append(
                min(np.sqrt((y - yy) ** 2 + (x - xx) ** 2) for yy, xx in bset)
            )
    return float(np.percentile(pooled, 95))


def random_mask_pair(seed, size=32):
    rng = np.random.default_rng(seed)
    masks = []
    for _ in range(2):
        m = np.zeros((size, size), dtype=np.uint8)
        for _blob in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(4, size - 4, size=2)
            r = rng.uniform(2, 7)
            yy, xx = np.mgrid[0:size, 0:size]
            m[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1
        masks.append(m)
    return masks


# ---------------------------------------------------------------------------
# dice


def test_dice_identical_masks():
    m = (np.random.default_rng(0).uniform(size=(8, 8)) > 0.5).astype(np.uint8)
    assert MX.dice_score(m, m, 1) == 1.0


def test_dice_disjoint_masks():
    a = np.zeros((6, 6), dtype=np.uint8)
    b = np.zeros((6, 6), dtype=np.uint8)
    a[:2, :2] = 1
    b[4:, 4:] = 1
    assert MX.dice_score(a, b, 1) == 0.0


def test_dice_shifted_square_half():
    a = np.zeros((8, 8), dtype=np.uint8)
    b = np.zeros((8, 8), dtype=np.uint8)
    a[2:4, 2:4] = 1
    b[2:4, 3:5] = 1  # overlap 2 of 4 -> 2*2/(4+4) = 0.5
    assert MX.dice_score(a, b, 1) == 0.5


def test_dice_empty_conventions():
    e = np.zeros((5, 5), dtype=np.uint8)
    f = np.zeros((5, 5), dtype=np.uint8)
    f[1, 1] = 1
    assert MX.dice_score(e, e, 1) == 1.0
    assert MX.dice_score(e, f, 1) == 0.0
    assert MX.dice_score(f, e, 1) == 0.0


def test_dice_symmetry_random():
    for seed in range(10):
        a, b = random_mask_pair(seed)
        assert MX.dice_score(a, b, 1) == MX.dice_score(b, a, 1)


def test_dice_matches_oracle_random():
    for seed in range(25):
        a, b = random_mask_pair(seed)
        assert MX.dice_score(a, b, 1) == pytest.approx(dice_oracle(a, b, 1), abs=1e-12)


# ---------------------------------------------------------------------------
# hd95


def test_hd95_identical_masks_zero():
    a, _ = random_mask_pair(3)
    assert MX.hd95(a, a, 1) == 0.0


def test_hd95_two_single_pixels():
    a = np.zeros((10, 10), dtype=np.uint8)
    b = np.zeros((10, 10), dtype=np.uint8)
    a[4, 2] = 1
    b[4, 7] = 1
    assert MX.hd95(a, b, 1) == pytest.approx(5.0)


def test_hd95_matches_bruteforce_oracle():
    checked = 0
    for seed in range(30):
        a, b = random_mask_pair(seed)
        got = MX.hd95(a, b, 1)
        want = hd95_oracle(a, b, 1)
        if np.isnan(want):
            assert np.isnan(got)
        else:
            assert got == pytest.approx(want, abs=1e-9)
            checked += 1
    assert checked >= 20


def test_hd95_symmetric():
    for seed in range(8):
        a, b = random_mask_pair(seed)
        x, y = MX.hd95(a, b, 1), MX.hd95(b, a, 1)
        if np.isnan(x):
            assert np.isnan(y)
        else:
            assert x == pytest.approx(y, abs=1e-12)


def test_hd95_empty_sentinel():
    a = np.zeros((6, 6), dtype=np.uint8)
    b = np.zeros((6, 6), dtype=np.uint8)
    b[2, 2] = 1
    assert np.isnan(MX.hd95(a, b, 1))
    assert np.isnan(MX.hd95(a, a, 1))


def test_metrics_translation_invariant_for_interior_shapes():
    a = np.zeros((20, 20), dtype=np.uint8)
    b = np.zeros((20, 20), dtype=np.uint8)
    a[4:8, 4:9] = 1
    b[5:9, 3:8] = 1
    d0, h0 = MX.dice_score(a, b, 1), MX.hd95(a, b, 1)
    at = np.roll(np.roll(a, 3, axis=0), 4, axis=1)
    bt = np.roll(np.roll(b, 3, axis=0), 4, axis=1)
    assert MX.dice_score(at, bt, 1) == d0
    assert MX.hd95(at, bt, 1) == pytest.approx(h0, abs=1e-12)


def test_hd95_per_direction_mode_exists():
    a, b = random_mask_pair(1)
    v = MX.hd95(a, b, 1, mode="per_direction_max")
    assert np.isfinite(v) or np.isnan(v)


def test_aggregate_counts_sentinels():
    recs = [
        MX.EvalRecord(0, "d", 1, 1.0, 0.0),
        MX.EvalRecord(0, "d", 2, 0.5, float("nan")),
    ]
    agg = MX.aggregate_records(recs)
    assert agg["dice"] == pytest.approx(0.75)
    assert agg["hd95"] == 0.0
    assert agg["hd95_sentinels"] == 1


# ---------------------------------------------------------------------------
# domain probe


def test_probe_shuffled_labels_near_chance():
    rng = np.random.default_rng(42)
    feats = rng.normal(size=(180, 16))
    accs = []
    for seed in range(5):
        labels = np.repeat([0, 1, 2], 60)
        np.random.default_rng(seed).shuffle(labels)
        accs.append(MX.domain_probe(feats, labels, split_seed=seed))
    assert abs(np.mean(accs) - 1.0 / 3.0) < 0.07


def test_probe_separable_features_high_accuracy():
    labels = np.repeat([0, 1, 2], 50)
    feats = np.zeros((150, 8))
    feats[np.arange(150), labels] = 1.0
    acc = MX.domain_probe(feats, labels, split_seed=0)
    assert acc >= 0.99


def test_probe_rejects_small_or_imbalanced():
    feats = np.zeros((50, 4))
    with pytest.raises(ValueError, match=">= 40"):
        MX.domain_probe(feats, np.repeat([0, 1], 25), split_seed=0)
    feats = np.zeros((540, 4))
    labels = np.array([0] * 500 + [1] * 40)
    with pytest.raises(ValueError, match="imbalance"):
        MX.domain_probe(feats, labels, split_seed=0)


# ---------------------------------------------------------------------------
# pca export


def test_pca_rank_one_data_second_component_vanishes():
    rng = np.random.default_rng(1)
    direction = rng.normal(size=6)
    direction /= np.linalg.norm(direction)
    data = np.outer(rng.normal(size=40), direction)
    rows = MX.pca2d_export(data)
    ys = np.array([r[1] for r in rows])
    assert ys.var() < 1e-18


def test_pca_components_orthonormal():
    rng = np.random.default_rng(2)
    comps, _ = MX.pca2d_components(rng.normal(size=(60, 10)))
    gram = comps @ comps.T
    assert np.abs(gram - np.eye(2)).max() < 1e-8


def test_pca_matches_dense_eigensolver_oracle():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(50, 8)) @ np.diag([5, 3, 2, 1, 1, 0.5, 0.2, 0.1])
    comps, eigvals = MX.pca2d_components(data)
    centered = data - data.mean(axis=0)
    cov = centered.T @ centered / (len(data) - 1)
    true_vals = np.sort(np.linalg.eigvalsh(cov))[::-1][:2]
    assert np.abs(eigvals - true_vals).max() < 1e-6
    # projection variance equals the top-2 eigenvalues
    proj = centered @ comps.T
    got_var = proj.var(axis=0, ddof=1)
    assert np.abs(got_var - true_vals).max() < 1e-6


def test_pca_needs_three_samples():
    with pytest.raises(ValueError, match=">= 3"):
        MX.pca2d_export(np.zeros((2, 4)))
