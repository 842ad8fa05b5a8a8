"""Synthetic 2-D segmentation data with causally independent content and style.

Content (blob shapes + mask) is a pure function of a content seed; style
(modality LUT, gamma, bias field, artifacts, noise) acts on intensities
only and never sees the mask. That construction makes the confounding
between appearance and anatomy fully controllable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .util import derive_seed, read_json, write_json

MODALITY_TAGS = ("ct_like", "t1_like", "t2_like", "inverted")
NOISE_KINDS = ("none", "gaussian", "speckle")
ARTIFACT_TAGS = ("motion_streak", "signal_dropout")

CONTRAST_RANGE = (0.3, 2.5)
NOISE_LEVEL_RANGE = (0.0, 0.3)
BIAS_RANGE = (0.0, 0.6)

BACKGROUND_INTENSITY = 0.15
INTENSITY_JITTER = 0.1
MIN_CLASS_PIXELS = 20

CORRUPTION_KINDS = ("boundary_blur", "heavy_noise", "bright_streak", "dropout_patch")

DATASET_MAGIC = b"CSL1"


class StyleRangeError(ValueError):
    """Descriptor field outside its declared range."""


@dataclass(frozen=True)
class StyleDescriptor:
    """Structured ground truth for everything the style transform does."""

    modality_tag: str = "ct_like"
    contrast: float = 1.0
    noise_kind: str = "none"
    noise_level: float = 0.0
    bias_strength: float = 0.0
    artifact_tags: frozenset = frozenset()

    def validate(self) -> "StyleDescriptor":
        if self.modality_tag not in MODALITY_TAGS:
            raise StyleRangeError(f"unknown modality_tag {self.modality_tag!r}")
        if self.noise_kind not in NOISE_KINDS:
            raise StyleRangeError(f"unknown noise_kind {self.noise_kind!r}")
        if not CONTRAST_RANGE[0] <= self.contrast <= CONTRAST_RANGE[1]:
            raise StyleRangeError(f"contrast {self.contrast} outside {CONTRAST_RANGE}")
        if not NOISE_LEVEL_RANGE[0] <= self.noise_level <= NOISE_LEVEL_RANGE[1]:
            raise StyleRangeError(
                f"noise_level {self.noise_level} outside {NOISE_LEVEL_RANGE}"
            )
        if not BIAS_RANGE[0] <= self.bias_strength <= BIAS_RANGE[1]:
            raise StyleRangeError(
                f"bias_strength {self.bias_strength} outside {BIAS_RANGE}"
            )
        for tag in self.artifact_tags:
            if tag not in ARTIFACT_TAGS:
                raise StyleRangeError(f"unknown artifact tag {tag!r}")
        return self

    @classmethod
    def identity(cls) -> "StyleDescriptor":
        return cls()

    def to_dict(self) -> dict:
        return {
            "modality_tag": self.modality_tag,
            "contrast": self.contrast,
            "noise_kind": self.noise_kind,
            "noise_level": self.noise_level,
            "bias_strength": self.bias_strength,
            "artifact_tags": sorted(self.artifact_tags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StyleDescriptor":
        return cls(
            modality_tag=d["modality_tag"],
            contrast=float(d["contrast"]),
            noise_kind=d["noise_kind"],
            noise_level=float(d["noise_level"]),
            bias_strength=float(d["bias_strength"]),
            artifact_tags=frozenset(d["artifact_tags"]),
        ).validate()


@dataclass(frozen=True)
class DomainSpec:
    """Named sampling distribution over style descriptors.

    Ranges must be sub-ranges of the descriptor's global ranges; weights
    are (value, weight) pairs, artifact entries independent Bernoullis.
    """

    name: str
    modalities: tuple = (("ct_like", 1.0),)
    contrast: tuple = (1.0, 1.0)
    noise_kinds: tuple = (("none", 1.0),)
    noise_level: tuple = (0.0, 0.0)
    bias_strength: tuple = (0.0, 0.0)
    artifact_probs: tuple = ()
    seed: int = 0

    def validate(self) -> "DomainSpec":
        def check_sub(r, glob, what):
            if not (glob[0] <= r[0] <= r[1] <= glob[1]):
                raise StyleRangeError(
                    f"domain {self.name!r}: {what} range {r} not inside {glob}"
                )

        check_sub(self.contrast, CONTRAST_RANGE, "contrast")
        check_sub(self.noise_level, NOISE_LEVEL_RANGE, "noise_level")
        check_sub(self.bias_strength, BIAS_RANGE, "bias_strength")
        for tag, _ in self.modalities:
            if tag not in MODALITY_TAGS:
                raise StyleRangeError(f"domain {self.name!r}: bad modality {tag!r}")
        for kind, _ in self.noise_kinds:
            if kind not in NOISE_KINDS:
                raise StyleRangeError(f"domain {self.name!r}: bad noise kind {kind!r}")
        for tag, p in self.artifact_probs:
            if tag not in ARTIFACT_TAGS or not 0.0 <= p <= 1.0:
                raise StyleRangeError(f"domain {self.name!r}: bad artifact {tag!r}")
        return self

    def sample_descriptor(self, rng: np.random.Generator) -> StyleDescriptor:
        def weighted(pairs):
            values = [v for v, _ in pairs]
            w = np.array([p for _, p in pairs], dtype=float)
            return values[int(rng.choice(len(values), p=w / w.sum()))]

        modality = weighted(self.modalities)
        contrast = float(rng.uniform(*self.contrast))
        kind = weighted(self.noise_kinds)
        level = float(rng.uniform(*self.noise_level)) if kind != "none" else 0.0
        bias = float(rng.uniform(*self.bias_strength))
        tags = frozenset(
            tag for tag, p in self.artifact_probs if rng.uniform() < p
        )
        return StyleDescriptor(modality, contrast, kind, level, bias, tags).validate()


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # float64 [S,S] in [0,1]
    mask: np.ndarray  # uint8 [S,S] labels in {0..K-1}
    descriptor: StyleDescriptor
    domain: str
    content_seed: int


@dataclass(frozen=True)
class CorruptionInfo:
    kind: str
    severity: float


@dataclass(frozen=True)
class DatasetConfig:
    image_size: int = 64
    num_classes: int = 4
    samples_per_domain: int = 2000
    test_samples_per_domain: int = 150
    source_domains: tuple = ()
    ood_domains: tuple = ()
    master_seed: int = 0
    min_class_pixels: int = MIN_CLASS_PIXELS  # scaled down only for tiny debug grids
    blob_radius: tuple = (0.12, 0.28)  # fraction of image size
    blob_wobble: tuple = (0.18, 0.10)  # boundary deformation amplitudes

    def validate(self) -> "DatasetConfig":
        src = {d.name for d in self.source_domains}
        ood = {d.name for d in self.ood_domains}
        if len(src) != len(self.source_domains) or len(ood) != len(self.ood_domains):
            raise ValueError("duplicate domain names")
        overlap = src & ood
        if overlap:
            raise ValueError(f"source and OOD domain names overlap: {sorted(overlap)}")
        for d in (*self.source_domains, *self.ood_domains):
            d.validate()
        return self

    def class_intensities(self) -> np.ndarray:
        """Canonical intensity per class; index 0 is background."""
        fg = np.linspace(0.45, 0.85, self.num_classes - 1)
        return np.concatenate([[BACKGROUND_INTENSITY], fg])


@dataclass
class SplitSet:
    train: list
    id_test: list
    ood_tests: dict


# ---------------------------------------------------------------------------
# content


def render_content(content_seed: int, cfg: DatasetConfig):
    """Place wobbly-ellipse blobs; return (clean_image, mask).

    Deterministic in (content_seed, cfg). Every foreground class covers
    at least MIN_CLASS_PIXELS pixels (regenerated until it does).
    """
    s = cfg.image_size
    k = cfg.num_classes
    rng = np.random.Generator(np.random.PCG64(content_seed))
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    base_intensity = cfg.class_intensities()

    for _attempt in range(64):
        n_blobs = int(rng.integers(max(2, k - 1), 5))
        classes = list(range(1, k))
        while len(classes) < n_blobs:
            classes.append(int(rng.integers(1, k)))
        rng.shuffle(classes)

        mask = np.zeros((s, s), dtype=np.uint8)
        for cls in classes:
            cx, cy = rng.uniform(0.25 * s, 0.75 * s, size=2)
            rx, ry = rng.uniform(cfg.blob_radius[0] * s, cfg.blob_radius[1] * s, size=2)
            theta = rng.uniform(0.0, np.pi)
            a1 = rng.uniform(0.0, cfg.blob_wobble[0])
            a2 = rng.uniform(0.0, cfg.blob_wobble[1])
            p1, p2 = rng.uniform(0.0, 2 * np.pi, size=2)

            dx, dy = xx - cx, yy - cy
            u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
            v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
            rho = np.sqrt(u * u + v * v)
            phi = np.arctan2(v, u)
            boundary = 1.0 + a1 * np.sin(2 * phi + p1) + a2 * np.sin(3 * phi + p2)
            mask[rho <= boundary] = cls

        counts = np.bincount(mask.ravel(), minlength=k)
        if np.all(counts[1:] >= cfg.min_class_pixels):
            break
    else:
        raise RuntimeError(f"content seed {content_seed}: blob layout never satisfied")

    jitter = 1.0 + rng.uniform(-INTENSITY_JITTER, INTENSITY_JITTER, size=k)
    jitter[0] = 1.0  # background stays put
    levels = np.clip(base_intensity * jitter, 0.0, 1.0)
    clean = levels[mask]
    return clean, mask


# ---------------------------------------------------------------------------
# style


def _modality_lut(x: np.ndarray, tag: str) -> np.ndarray:
    if tag == "ct_like":
        return x
    if tag == "t1_like":
        return 0.5 * (1.0 - np.cos(np.pi * x))  # contrast-boosting S-curve
    if tag == "t2_like":
        return (2.0 / np.pi) * np.arcsin(np.sqrt(np.clip(x, 0.0, 1.0)))
    if tag == "inverted":
        return 1.0 - x
    raise StyleRangeError(f"unknown modality_tag {tag!r}")


def _shift_replicate(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = img
    if dy:
        out = np.roll(out, dy, axis=0)
        if dy > 0:
            out[:dy] = out[dy]
        else:
            out[dy:] = out[dy - 1]
    if dx:
        out = np.roll(out, dx, axis=1)
        if dx > 0:
            out[:, :dx] = out[:, dx : dx + 1]
        else:
            out[:, dx:] = out[:, dx - 1 : dx]
    return out


def _bias_field(shape, strength: float, rng: np.random.Generator) -> np.ndarray:
    s = shape[0]
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / s
    b = np.zeros(shape)
    for _ in range(2):
        fx, fy = rng.uniform(0.5, 1.5, size=2)
        phase = rng.uniform(0.0, 2 * np.pi)
        b += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    peak = np.abs(b).max()
    if peak > 0:
        b /= peak
    return 1.0 + strength * b


def apply_style(clean_image: np.ndarray, d: StyleDescriptor, seed: int) -> np.ndarray:
    """Intensity-only style transform, fixed order: LUT, gamma, bias,
    artifacts, noise, clip. Deterministic in (d, seed); mask-blind by
    construction (there is no mask argument)."""
    d.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    x = np.asarray(clean_image, dtype=np.float64)

    x = _modality_lut(x, d.modality_tag)
    if d.contrast != 1.0:
        x = np.power(np.clip(x, 0.0, 1.0), d.contrast)
    if d.bias_strength > 0.0:
        x = x * _bias_field(x.shape, d.bias_strength, rng)
    if "motion_streak" in d.artifact_tags:
        angle = rng.uniform(0.0, np.pi)
        step = (int(round(2 * np.sin(angle))), int(round(2 * np.cos(angle))))
        ghosts = [_shift_replicate(x, i * step[0], i * step[1]) for i in (1, 2, 3)]
        x = 0.65 * x + 0.35 * np.mean(ghosts, axis=0)
    if "signal_dropout" in d.artifact_tags:
        s = x.shape[0]
        cy, cx = rng.uniform(0.2 * s, 0.8 * s, size=2)
        r = rng.uniform(0.12 * s, 0.25 * s)
        yy, xx2 = np.mgrid[0 : x.shape[0], 0 : x.shape[1]].astype(np.float64)
        soft = np.exp(-3.0 * (((yy - cy) ** 2 + (xx2 - cx) ** 2) / (r * r)))
        x = x * (1.0 - 0.75 * soft)
    if d.noise_kind == "gaussian" and d.noise_level > 0.0:
        x = x + rng.normal(0.0, d.noise_level, size=x.shape)
    elif d.noise_kind == "speckle" and d.noise_level > 0.0:
        x = x + x * rng.normal(0.0, 2.0 * d.noise_level, size=x.shape)
    return np.clip(x, 0.0, 1.0)


# ---------------------------------------------------------------------------
# dataset assembly


def _make_samples(domain: DomainSpec, cfg: DatasetConfig, split: str, count: int):
    out = []
    for i in range(count):
        content_seed = derive_seed(cfg.master_seed, "content", split, i)
        clean, mask = render_content(content_seed, cfg)
        style_rng = np.random.Generator(
            np.random.PCG64(derive_seed(cfg.master_seed, "descr", domain.name, split, i, domain.seed))
        )
        descriptor = domain.sample_descriptor(style_rng)
        style_seed = derive_seed(cfg.master_seed, "style", domain.name, split, i)
        image = apply_style(clean, descriptor, style_seed)
        out.append(Sample(image, mask, descriptor, domain.name, content_seed))
    return out


def generate_dataset(cfg: DatasetConfig) -> SplitSet:
    """Single-source-protocol splits, a pure function of cfg."""
    cfg.validate()
    if not cfg.source_domains:
        raise ValueError("at least one source domain required")
    train, id_test = [], []
    for dom in cfg.source_domains:
        train.extend(_make_samples(dom, cfg, f"train:{dom.name}", cfg.samples_per_domain))
        id_test.extend(
            _make_samples(dom, cfg, f"id_test:{dom.name}", cfg.test_samples_per_domain)
        )
    train_seeds = {s.content_seed for s in train}
    test_seeds = {s.content_seed for s in id_test}
    if train_seeds & test_seeds:
        raise RuntimeError("content-seed collision between train and id_test")
    ood_tests = {}
    for dom in cfg.ood_domains:
        ood_tests[dom.name] = _make_samples(
            dom, cfg, f"ood:{dom.name}", cfg.test_samples_per_domain
        )
    return SplitSet(train=train, id_test=id_test, ood_tests=ood_tests)


def make_extra_samples(cfg: DatasetConfig, domain: DomainSpec, count: int, tag: str):
    """Fresh samples from one domain in a private content-seed namespace
    (disjoint from train/test); used e.g. for intervention-pair synthesis."""
    return _make_samples(domain, cfg, f"extra:{tag}:{domain.name}", count)


def make_pretrain_pool(cfg: DatasetConfig, count: int, seed: int):
    """(styled, clean, mask) triples spanning the global style space.

    Content seeds live in their own namespace, disjoint from every
    train/test split of the same master seed.
    """
    items = []
    for i in range(count):
        content_seed = derive_seed(cfg.master_seed, "content", "pool", seed, i)
        clean, mask = render_content(content_seed, cfg)
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "pool-style", i)))
        descriptor = StyleDescriptor(
            modality_tag=MODALITY_TAGS[int(rng.integers(0, len(MODALITY_TAGS)))],
            contrast=float(rng.uniform(0.4, 2.2)),
            noise_kind=NOISE_KINDS[int(rng.integers(0, len(NOISE_KINDS)))],
            noise_level=float(rng.uniform(0.0, 0.25)),
            bias_strength=float(rng.uniform(0.0, 0.5)),
            artifact_tags=frozenset(
                tag for tag in ARTIFACT_TAGS if rng.uniform() < 0.15
            ),
        ).validate()
        styled = apply_style(clean, descriptor, derive_seed(seed, "pool-noise", i))
        items.append((styled, clean, mask))
    return items


def default_benchmark_config(
    master_seed: int = 2024,
    samples_per_domain: int = 2000,
    test_samples_per_domain: int = 150,
    image_size: int = 64,
) -> DatasetConfig:
    """One mild CT-like source; two OOD axes (noisy T2-like, inverted+bias)."""
    source = DomainSpec(
        name="ct_mild",
        modalities=(("ct_like", 1.0),),
        contrast=(0.75, 1.35),
        noise_kinds=(("none", 0.35), ("gaussian", 0.65)),
        noise_level=(0.01, 0.08),
        bias_strength=(0.0, 0.15),
    )
    ood_t2 = DomainSpec(
        name="t2_noisy",
        modalities=(("t2_like", 1.0),),
        contrast=(0.6, 1.8),
        noise_kinds=(("gaussian", 0.6), ("speckle", 0.4)),
        noise_level=(0.12, 0.25),
        bias_strength=(0.0, 0.2),
        artifact_probs=(("motion_streak", 0.3),),
    )
    ood_inv = DomainSpec(
        name="inverted_bias",
        modalities=(("inverted", 1.0),),
        contrast=(0.7, 1.5),
        noise_kinds=(("none", 0.5), ("gaussian", 0.5)),
        noise_level=(0.01, 0.1),
        bias_strength=(0.3, 0.6),
        artifact_probs=(("signal_dropout", 0.3),),
    )
    return DatasetConfig(
        image_size=image_size,
        num_classes=4,
        samples_per_domain=samples_per_domain,
        test_samples_per_domain=test_samples_per_domain,
        source_domains=(source,),
        ood_domains=(ood_t2, ood_inv),
        master_seed=master_seed,
    ).validate()


# ---------------------------------------------------------------------------
# induced corruptions for the intervention study


def _box_blur(img: np.ndarray, radius: int = 2, passes: int = 2) -> np.ndarray:
    out = img.astype(np.float64)
    size = 2 * radius + 1
    kernel = np.ones(size) / size
    for _ in range(passes):
        padded = np.pad(out, radius, mode="edge")
        out = np.apply_along_axis(
            lambda r: np.convolve(r, kernel, mode="valid"), 0, padded
        )
        out = np.apply_along_axis(
            lambda r: np.convolve(r, kernel, mode="valid"), 1, out
        )
    return out


def corrupt_for_intervention(sample: Sample, kind: str, severity: float):
    """Degrade the image only; geometry is fixed per (sample, kind) so the
    severity knob scales amplitude monotonically."""
    if kind not in CORRUPTION_KINDS:
        raise ValueError(f"unknown corruption kind {kind!r}; known: {CORRUPTION_KINDS}")
    if not 0.0 < severity <= 1.0:
        raise ValueError(f"severity must lie in (0,1], got {severity}")
    img = sample.image
    s = img.shape[0]
    rng = np.random.Generator(
        np.random.PCG64(derive_seed(sample.content_seed, "corrupt", kind))
    )

    if kind == "boundary_blur":
        corrupted = (1.0 - severity) * img + severity * _box_blur(img)
    elif kind == "heavy_noise":
        eta = rng.normal(0.0, 0.35, size=img.shape)
        corrupted = np.clip(img + severity * eta, 0.0, 1.0)
    elif kind == "bright_streak":
        angle = rng.uniform(0.0, np.pi)
        offset = rng.uniform(0.3 * s, 0.7 * s)
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
        dist = np.abs(np.cos(angle) * yy + np.sin(angle) * xx - offset)
        width = 0.09 * s
        stripe = np.clip(1.0 - dist / width, 0.0, 1.0)
        corrupted = img + severity * stripe * (1.0 - img)
    else:  # dropout_patch
        frac = rng.uniform(0.06, 0.14)
        aspect = rng.uniform(0.6, 1.6)
        w = int(round(s * np.sqrt(frac * aspect)))
        h = int(round(s * np.sqrt(frac / aspect)))
        w, h = min(w, s - 2), min(h, s - 2)
        top = int(rng.integers(0, s - h))
        left = int(rng.integers(0, s - w))
        rect = np.zeros_like(img)
        rect[top : top + h, left : left + w] = 1.0
        corrupted = img * (1.0 - severity * rect)

    corrupted = np.clip(corrupted, 0.0, 1.0)
    out = replace(sample, image=corrupted, mask=sample.mask.copy())
    return out, CorruptionInfo(kind=kind, severity=float(severity))


# ---------------------------------------------------------------------------
# binary container ("CSL1") + JSON sidecar


def _pack_descriptor(d: StyleDescriptor) -> bytes:
    bits = 0
    for i, tag in enumerate(ARTIFACT_TAGS):
        if tag in d.artifact_tags:
            bits |= 1 << i
    return struct.pack(
        "<BdBddB",
        MODALITY_TAGS.index(d.modality_tag),
        d.contrast,
        NOISE_KINDS.index(d.noise_kind),
        d.noise_level,
        d.bias_strength,
        bits,
    )


_DESCRIPTOR_SIZE = struct.calcsize("<BdBddB")


def _unpack_descriptor(buf: bytes) -> StyleDescriptor:
    mi, contrast, ni, level, bias, bits = struct.unpack("<BdBddB", buf)
    tags = frozenset(
        tag for i, tag in enumerate(ARTIFACT_TAGS) if bits & (1 << i)
    )
    return StyleDescriptor(
        MODALITY_TAGS[mi], contrast, NOISE_KINDS[ni], level, bias, tags
    )


def save_split(path, samples, image_size: int, num_classes: int) -> None:
    path = Path(path)
    chunks = [DATASET_MAGIC, struct.pack("<III", image_size, num_classes, len(samples))]
    sidecar = []
    for i, s in enumerate(samples):
        if s.image.shape != (image_size, image_size):
            raise ValueError(f"sample {i}: image shape {s.image.shape} mismatch")
        dom = s.domain.encode("utf-8")
        chunks.append(struct.pack("<Q", s.content_seed))
        chunks.append(struct.pack("<I", len(dom)) + dom)
        chunks.append(_pack_descriptor(s.descriptor))
        chunks.append(s.image.astype("<f4").tobytes())
        chunks.append(s.mask.astype(np.uint8).tobytes())
        sidecar.append(
            {
                "index": i,
                "domain": s.domain,
                "content_seed": s.content_seed,
                "descriptor": s.descriptor.to_dict(),
            }
        )
    path.write_bytes(b"".join(chunks))
    write_json(path.with_suffix(path.suffix + ".json"), sidecar)


def load_split(path):
    """Returns (samples, image_size, num_classes)."""
    buf = Path(path).read_bytes()
    if buf[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a CSL1 dataset container")
    image_size, num_classes, count = struct.unpack_from("<III", buf, 4)
    off = 4 + 12
    img_bytes = image_size * image_size * 4
    samples = []
    for _ in range(count):
        (content_seed,) = struct.unpack_from("<Q", buf, off)
        off += 8
        (dlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        domain = buf[off : off + dlen].decode("utf-8")
        off += dlen
        descriptor = _unpack_descriptor(buf[off : off + _DESCRIPTOR_SIZE])
        off += _DESCRIPTOR_SIZE
        image = np.frombuffer(buf, dtype="<f4", count=image_size * image_size, offset=off)
        image = image.reshape(image_size, image_size).astype(np.float64)
        off += img_bytes
        mask = np.frombuffer(buf, dtype=np.uint8, count=image_size * image_size, offset=off)
        mask = mask.reshape(image_size, image_size).copy()
        off += image_size * image_size
        samples.append(Sample(image, mask, descriptor, domain, content_seed))
    if off != len(buf):
        raise ValueError(f"{path}: trailing bytes after {count} samples")
    return samples, image_size, num_classes
