"""Correction-command reasoning: a small grammar in place of free text, a
deterministic rule table, and a learned regressor from commands to
decoder modulation parameters, trained on synthetically generated
error-to-correction pairs.

Both backends emit the compact parameterization (per-stage scalar
gamma-scale and beta-shift, 6 dims for a 3-stage decoder) expanded to
per-channel FiLMParams at the end.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import FiLMParams, SegModel
from .optim import Adam
from .snapshot import REASONER_MAGIC, read_container, weights_from_bytes, \
    weights_to_bytes, write_container
from .synthgen import CORRUPTION_KINDS, Sample, corrupt_for_intervention
from .trainer import foreground_dice
from .util import canonical_json, rng_from

VERBS = ("shrink", "expand", "suppress_noise", "restore_region",
         "sharpen_boundary", "identity")

ALIASES = {
    "reduce": "shrink",
    "denoise": "suppress_noise",
    "enlarge": "expand",
    "grow": "expand",
    "sharpen": "sharpen_boundary",
    "restore": "restore_region",
    "fill": "restore_region",
    "noop": "identity",
}

CLASS_VERBS = ("shrink", "expand")
DEFAULT_MAGNITUDE = 0.5

# which canonical command a known corruption cause maps to
CAUSE_TO_VERB = {
    "heavy_noise": "suppress_noise",
    "boundary_blur": "sharpen_boundary",
    "dropout_patch": "restore_region",
    "bright_streak": "shrink",  # the streak mimics the brightest class
}


class CommandParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"at position {position}: {message}")
        self.position = position
        self.reason = message


@dataclass(frozen=True)
class CorrectionCommand:
    verb: str
    target_class: int | None
    magnitude: float
    raw_text: str

    def canonical_text(self) -> str:
        parts = [self.verb]
        if self.target_class is not None:
            parts.append(f"class={self.target_class}")
        parts.append(f"amount={self.magnitude:g}")
        return " ".join(parts)


def grammar_help() -> str:
    verbs = ", ".join(VERBS)
    aliases = ", ".join(f"{k}->{v}" for k, v in sorted(ALIASES.items()))
    return (
        f"syntax: VERB [class=<int>] [amount=<float in (0,1]>] | "
        f"verbs: {verbs} | aliases: {aliases} | "
        f"class is required for shrink/expand; amount defaults to {DEFAULT_MAGNITUDE}"
    )


def parse_command(text: str, num_classes: int = 4) -> CorrectionCommand:
    tokens = [(m.group(0), m.start()) for m in re.finditer(r"\S+", text)]
    if not tokens:
        raise CommandParseError("empty command", 0)
    word, pos = tokens[0]
    verb = ALIASES.get(word.lower(), word.lower())
    if verb not in VERBS:
        raise CommandParseError(f"unknown verb {word!r}", pos)

    target_class = None
    magnitude = None
    for word, pos in tokens[1:]:
        if "=" not in word:
            raise CommandParseError(f"expected key=value, got {word!r}", pos)
        key, _, value = word.partition("=")
        if key == "class":
            if target_class is not None:
                raise CommandParseError("duplicate class argument", pos)
            try:
                target_class = int(value)
            except ValueError:
                raise CommandParseError(f"class needs an integer, got {value!r}", pos)
            if not 1 <= target_class <= num_classes - 1:
                raise CommandParseError(
                    f"class must lie in 1..{num_classes - 1}", pos
                )
        elif key == "amount":
            if magnitude is not None:
                raise CommandParseError("duplicate amount argument", pos)
            try:
                magnitude = float(value)
            except ValueError:
                raise CommandParseError(f"amount needs a number, got {value!r}", pos)
            if not 0.0 < magnitude <= 1.0:
                raise CommandParseError("amount must lie in (0, 1]", pos)
        else:
            raise CommandParseError(f"unknown argument {key!r}", pos)

    if verb in CLASS_VERBS and target_class is None:
        raise CommandParseError(f"{verb} requires class=<int>", len(text))
    if verb not in CLASS_VERBS and target_class is not None:
        raise CommandParseError(f"{verb} takes no class argument", len(text))
    return CorrectionCommand(
        verb=verb,
        target_class=target_class,
        magnitude=DEFAULT_MAGNITUDE if magnitude is None else magnitude,
        raw_text=text,
    )


# ---------------------------------------------------------------------------
# rule-table backend


def class_channels(model: SegModel, class_id: int) -> np.ndarray:
    """Final-stage channels attributed to a class: top quarter by the
    head conv's signed weight into that class's logit."""
    w = model.decoder["head.w"].data[class_id, :, 0, 0]
    q = max(1, len(w) // 4)
    return np.argsort(w)[::-1][:q]


def rule_reasoner(cmd: CorrectionCommand, model: SegModel) -> FiLMParams:
    """Deterministic command -> FiLM table (see docs/intervention_rules.md)."""
    widths = model.cfg.dec_channels
    film = FiLMParams.identity(widths)
    m = cmd.magnitude
    last = len(widths) - 1
    if cmd.verb == "identity":
        return film
    if cmd.verb in CLASS_VERBS:
        chans = class_channels(model, cmd.target_class)
        if cmd.verb == "shrink":
            film.gammas[last][chans] *= 1.0 - 0.5 * m
            film.betas[last][chans] -= 0.2 * m
        else:
            film.gammas[last][chans] *= 1.0 + 0.5 * m
            film.betas[last][chans] += 0.2 * m
    elif cmd.verb == "suppress_noise":
        film.gammas[0][:] = 1.0 - 0.3 * m
    elif cmd.verb == "sharpen_boundary":
        film.gammas[last][:] = 1.0 + 0.4 * m
    elif cmd.verb == "restore_region":
        film.betas[1][:] += 0.15 * m
        film.betas[last][:] += 0.15 * m
    return film.clamped()


# ---------------------------------------------------------------------------
# FiLM search over the compact parameterization


GAMMA_LOG_SPAN = 0.8  # coarse grid: gamma in [e^-0.8, e^0.8]
BETA_SPAN = 0.7
GRID_POINTS = 11
SWEEPS = 3
REFINE_ROUNDS = 2


def compact_identity(n_stages: int = 3) -> np.ndarray:
    return np.concatenate([np.ones(n_stages), np.zeros(n_stages)])


def _film_from_compact(compact, widths) -> FiLMParams:
    return FiLMParams.from_compact(compact, widths).clamped()


def search_film(model: SegModel, feats: np.ndarray, true_mask: np.ndarray):
    """Coordinate-descent over the compact FiLM space, maximizing
    foreground Dice of the decoded mask on one sample.

    feats: precomputed frozen-encoder output [1,C,h,w] for the corrupted
    image. Returns (compact, best_dice, base_dice).
    """
    widths = model.cfg.dec_channels
    k = model.cfg.num_classes
    n_stages = len(widths)
    f = model.adapt(T.Tensor(feats))

    def objective(compact) -> float:
        logits = model.decode(f, _film_from_compact(compact, widths))
        pred = np.argmax(logits.data, axis=1).astype(np.uint8)[0]
        return foreground_dice([pred], [true_mask], k)

    current = compact_identity(n_stages)
    base = best = objective(current)

    def sweep(span_scale: float):
        nonlocal current, best
        for dim in range(2 * n_stages):
            if dim < n_stages:
                center = np.log(current[dim])
                span = GAMMA_LOG_SPAN * span_scale
                grid = np.exp(np.linspace(center - span, center + span, GRID_POINTS))
                grid = np.clip(grid, *FiLMParams.GAMMA_CLAMP)
            else:
                center = current[dim]
                span = BETA_SPAN * span_scale
                grid = np.linspace(center - span, center + span, GRID_POINTS)
                grid = np.clip(grid, *FiLMParams.BETA_CLAMP)
            for value in grid:
                trial = current.copy()
                trial[dim] = value
                score = objective(trial)
                if score > best:
                    best = score
                    current = trial

    for _ in range(SWEEPS):
        sweep(1.0)
    for r in range(1, REFINE_ROUNDS + 1):
        sweep(0.5 ** r)
    return current, best, base


# ---------------------------------------------------------------------------
# pair synthesis


@dataclass(frozen=True)
class InterventionPair:
    kind: str
    severity: float
    command: CorrectionCommand
    target_compact: np.ndarray
    achieved_dice_gain: float


def canonical_command(kind: str, severity: float, num_classes: int) -> CorrectionCommand:
    verb = CAUSE_TO_VERB[kind]
    target = num_classes - 1 if verb in CLASS_VERBS else None
    cmd = CorrectionCommand(verb=verb, target_class=target,
                            magnitude=float(severity), raw_text="")
    return CorrectionCommand(verb=cmd.verb, target_class=cmd.target_class,
                             magnitude=cmd.magnitude, raw_text=cmd.canonical_text())


def synth_pairs(model: SegModel, samples: list, kinds=CORRUPTION_KINDS,
                n_per_kind: int = 25, seed: int = 0,
                severity_range=(0.45, 0.95)):
    """Search corrective FiLM parameters for corrupted samples with known
    causes. Returns (pairs, skipped_count); pairs with no Dice gain are
    dropped and counted."""
    if not samples:
        raise ValueError("synth_pairs needs samples")
    pairs = []
    skipped = 0
    cursor = 0
    for kind in kinds:
        if kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {kind!r}")
        rng = rng_from(seed, "pairs", kind)
        for i in range(n_per_kind):
            sample = samples[cursor % len(samples)]
            cursor += 1
            severity = float(rng.uniform(*severity_range))
            corrupted, info = corrupt_for_intervention(sample, kind, severity)
            feats = model.encode(corrupted.image).data
            compact, best, base = search_film(model, feats, corrupted.mask)
            gain = best - base
            if gain <= 0.0:
                skipped += 1
                continue
            pairs.append(
                InterventionPair(
                    kind=kind,
                    severity=severity,
                    command=canonical_command(kind, severity, model.cfg.num_classes),
                    target_compact=compact,
                    achieved_dice_gain=float(gain),
                )
            )
    return pairs, skipped


# ---------------------------------------------------------------------------
# learned backend


@dataclass
class ReasonerModel:
    num_classes: int
    widths: tuple
    hidden: int
    params: dict  # w1, b1, w2, b2
    train_meta: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return len(VERBS) + (self.num_classes - 1) + 1 + 1


def encode_command(cmd: CorrectionCommand, num_classes: int) -> np.ndarray:
    x = np.zeros(len(VERBS) + (num_classes - 1) + 1 + 1)
    x[VERBS.index(cmd.verb)] = 1.0
    off = len(VERBS)
    if cmd.target_class is None:
        x[off + (num_classes - 1)] = 1.0
    else:
        x[off + cmd.target_class - 1] = 1.0
    x[-1] = cmd.magnitude
    return x


def _reasoner_forward(params: dict, x: T.Tensor) -> T.Tensor:
    h = T.relu(T.add(T.matmul(x, params["w1"]), params["b1"]))
    return T.add(T.matmul(h, params["w2"]), params["b2"])


def train_reasoner(pairs: list, epochs: int = 400, seed: int = 0,
                   num_classes: int = 4, widths=(24, 12, 8), hidden: int = 32,
                   lr: float = 1e-2, include_identity: bool = True) -> ReasonerModel:
    """MSE regression from encoded commands to compact FiLM targets.

    Identity-command examples (identity target) are appended so the model
    anchors the no-op; the final layer starts at exactly that anchor
    (zero weights, identity bias).
    """
    if len(pairs) < 50:
        raise ValueError(f"need >= 50 pairs to train the reasoner, got {len(pairs)}")
    n_stages = len(widths)
    xs = [encode_command(p.command, num_classes) for p in pairs]
    ys = [np.asarray(p.target_compact, dtype=np.float64) for p in pairs]
    if include_identity:
        ident_cmd = CorrectionCommand("identity", None, DEFAULT_MAGNITUDE, "identity")
        for _ in range(max(8, len(pairs) // 4)):
            xs.append(encode_command(ident_cmd, num_classes))
            ys.append(compact_identity(n_stages))
    x = T.Tensor(np.stack(xs))
    y = T.Tensor(np.stack(ys))

    rng = rng_from(seed, "reasoner-init")
    d_in = x.shape[1]
    params = {
        "w1": T.Tensor(rng.normal(0, np.sqrt(2.0 / d_in), size=(d_in, hidden)),
                       requires_grad=True),
        "b1": T.Tensor(np.zeros(hidden), requires_grad=True),
        "w2": T.Tensor(np.zeros((hidden, 2 * n_stages)), requires_grad=True),
        "b2": T.Tensor(compact_identity(n_stages), requires_grad=True),
    }
    opt = Adam([params[k] for k in sorted(params)], lr=lr)
    curve = []
    for _ in range(epochs):
        opt.zero_grad()
        with T.Tape():
            pred = _reasoner_forward(params, x)
            err = T.sub(pred, y)
            loss = T.reduce_mean(T.mul(err, err))
            T.backward(loss)
        curve.append(loss.item())
        opt.step()
    return ReasonerModel(
        num_classes=num_classes,
        widths=tuple(widths),
        hidden=hidden,
        params=params,
        train_meta={
            "epochs": epochs,
            "n_pairs": len(pairs),
            "mse_first": curve[0],
            "mse_last": curve[-1],
        },
    )


def predict_film(rm: ReasonerModel, cmd: CorrectionCommand) -> FiLMParams:
    """Deterministic forward pass; compact output expanded per channel,
    gammas clamped to [0.25, 4] and betas to [-2, 2]."""
    x = T.Tensor(encode_command(cmd, rm.num_classes)[None, :])
    compact = _reasoner_forward(rm.params, x).data[0]
    n = len(rm.widths)
    compact = np.concatenate([
        np.clip(compact[:n], *FiLMParams.GAMMA_CLAMP),
        np.clip(compact[n:], *FiLMParams.BETA_CLAMP),
    ])
    return FiLMParams.from_compact(compact, rm.widths)


# ---------------------------------------------------------------------------
# sidecar persistence ("CSLR1")


def save_reasoner(rm: ReasonerModel, path, pairs: list | None = None) -> None:
    sections = {
        "meta": canonical_json(
            {
                "num_classes": rm.num_classes,
                "widths": list(rm.widths),
                "hidden": rm.hidden,
                "train_meta": rm.train_meta,
            }
        ).encode("utf-8"),
        "weights": weights_to_bytes(rm.params),
    }
    if pairs is not None:
        chunks = [struct.pack("<I", len(pairs))]
        for p in pairs:
            chunks.append(struct.pack("<B", CORRUPTION_KINDS.index(p.kind)))
            chunks.append(struct.pack("<d", p.severity))
            chunks.append(struct.pack("<B", VERBS.index(p.command.verb)))
            chunks.append(struct.pack("<b", -1 if p.command.target_class is None
                                      else p.command.target_class))
            chunks.append(struct.pack("<d", p.command.magnitude))
            chunks.append(np.asarray(p.target_compact, dtype="<f8").tobytes())
            chunks.append(struct.pack("<d", p.achieved_dice_gain))
        sections["pairs"] = b"".join(chunks)
    write_container(path, REASONER_MAGIC, sections)


def load_reasoner(path):
    """Returns (ReasonerModel, pairs or None)."""
    sections = read_container(path, REASONER_MAGIC)
    meta = json.loads(sections["meta"].decode("utf-8"))
    rm = ReasonerModel(
        num_classes=int(meta["num_classes"]),
        widths=tuple(meta["widths"]),
        hidden=int(meta["hidden"]),
        params=weights_from_bytes(sections["weights"]),
        train_meta=meta.get("train_meta", {}),
    )
    pairs = None
    if "pairs" in sections:
        buf = sections["pairs"]
        (count,) = struct.unpack_from("<I", buf, 0)
        off = 4
        n_stages = len(rm.widths)
        pairs = []
        for _ in range(count):
            (kind_i,) = struct.unpack_from("<B", buf, off); off += 1
            (severity,) = struct.unpack_from("<d", buf, off); off += 8
            (verb_i,) = struct.unpack_from("<B", buf, off); off += 1
            (cls,) = struct.unpack_from("<b", buf, off); off += 1
            (magnitude,) = struct.unpack_from("<d", buf, off); off += 8
            compact = np.frombuffer(buf, dtype="<f8", count=2 * n_stages, offset=off).copy()
            off += 16 * n_stages
            (gain,) = struct.unpack_from("<d", buf, off); off += 8
            cmd = CorrectionCommand(
                verb=VERBS[verb_i],
                target_class=None if cls < 0 else int(cls),
                magnitude=magnitude,
                raw_text="",
            )
            cmd = CorrectionCommand(cmd.verb, cmd.target_class, cmd.magnitude,
                                    cmd.canonical_text())
            pairs.append(InterventionPair(CORRUPTION_KINDS[kind_i], severity, cmd,
                                          compact, gain))
    return rm, pairs
