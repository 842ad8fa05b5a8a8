"""Frozen, deterministic style embedder.

Replaces a learned text pipeline with an exact one: the descriptor is
ground truth, `describe` reads it into canonical tokens, and a seeded
codebook of random unit vectors gives each token fixed compositional
semantics. Embeddings are token-vector sums, L2-normalized.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .synthgen import ARTIFACT_TAGS, MODALITY_TAGS, NOISE_KINDS, StyleDescriptor
from .tensor import l2_normalize, Tensor
from .util import array_sha256

EMBED_DIM = 64

CONTRAST_BINS = (0.8, 1.3)  # low < 0.8 <= normal < 1.3 <= high
NOISE_LEVEL_BIN = 0.1  # low < 0.1 <= high
BIAS_BINS = (0.05, 0.3)  # none < 0.05 <= weak < 0.3 <= strong


class UnknownTokenError(KeyError):
    pass


def vocabulary() -> tuple:
    """Every token `describe` can emit, in sorted order."""
    tokens = [f"modality:{m}" for m in MODALITY_TAGS]
    tokens += [f"contrast:{b}" for b in ("low", "normal", "high")]
    tokens += ["noise:none"]
    tokens += [
        f"noise:{kind}_{lvl}"
        for kind in NOISE_KINDS
        if kind != "none"
        for lvl in ("low", "high")
    ]
    tokens += [f"bias:{b}" for b in ("none", "weak", "strong")]
    tokens += [f"artifact:{t}" for t in ARTIFACT_TAGS]
    return tuple(sorted(tokens))


def describe(d: StyleDescriptor) -> list:
    """Canonical token list, one token per active attribute."""
    d.validate()
    if d.contrast < CONTRAST_BINS[0]:
        contrast = "low"
    elif d.contrast < CONTRAST_BINS[1]:
        contrast = "normal"
    else:
        contrast = "high"
    if d.noise_kind == "none" or d.noise_level == 0.0:
        noise = "noise:none"
    else:
        lvl = "low" if d.noise_level < NOISE_LEVEL_BIN else "high"
        noise = f"noise:{d.noise_kind}_{lvl}"
    if d.bias_strength < BIAS_BINS[0]:
        bias = "none"
    elif d.bias_strength < BIAS_BINS[1]:
        bias = "weak"
    else:
        bias = "strong"
    tokens = [
        f"modality:{d.modality_tag}",
        f"contrast:{contrast}",
        noise,
        f"bias:{bias}",
    ]
    tokens += sorted(f"artifact:{t}" for t in d.artifact_tags)
    return tokens


@dataclass(frozen=True)
class AttributeCodebook:
    """Seed-deterministic map token -> fixed random unit vector."""

    codebook_seed: int
    dim: int
    vectors: dict

    @classmethod
    def create(cls, codebook_seed: int, dim: int = EMBED_DIM) -> "AttributeCodebook":
        rng = np.random.Generator(np.random.PCG64(codebook_seed))
        vectors = {}
        for token in vocabulary():
            v = rng.normal(size=dim)
            vectors[token] = v / np.linalg.norm(v)
        return cls(codebook_seed=codebook_seed, dim=dim, vectors=vectors)

    def content_hash(self) -> str:
        return array_sha256(*(self.vectors[t] for t in sorted(self.vectors)))

    def to_bytes(self) -> bytes:
        chunks = [struct.pack("<QII", self.codebook_seed, self.dim, len(self.vectors))]
        for token in sorted(self.vectors):
            t = token.encode("utf-8")
            chunks.append(struct.pack("<I", len(t)) + t)
            chunks.append(self.vectors[token].astype("<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "AttributeCodebook":
        seed, dim, count = struct.unpack_from("<QII", buf, 0)
        off = struct.calcsize("<QII")
        vectors = {}
        for _ in range(count):
            (tlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            token = buf[off : off + tlen].decode("utf-8")
            off += tlen
            v = np.frombuffer(buf, dtype="<f8", count=dim, offset=off).copy()
            off += dim * 8
            vectors[token] = v
        return cls(codebook_seed=seed, dim=dim, vectors=vectors)


def embed_style(tokens, cb: AttributeCodebook) -> np.ndarray:
    """Sum of token vectors, L2-normalized; order-independent."""
    if not tokens:
        raise ValueError("empty token list")
    acc = np.zeros(cb.dim)
    for token in sorted(tokens):  # canonical order: the sum is bitwise order-invariant
        if token not in cb.vectors:
            raise UnknownTokenError(token)
        acc = acc + cb.vectors[token]
    return l2_normalize(Tensor(acc)).data


def embed_descriptor(
    d: StyleDescriptor,
    cb: AttributeCodebook,
    token_dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """describe + embed; optional token dropout for robustness experiments
    (always keeps at least one token)."""
    tokens = describe(d)
    if token_dropout > 0.0:
        if rng is None:
            raise ValueError("token_dropout needs an rng")
        kept = [t for t in tokens if rng.uniform() >= token_dropout]
        tokens = kept if kept else [tokens[int(rng.integers(0, len(tokens)))]]
    return embed_style(tokens, cb)
