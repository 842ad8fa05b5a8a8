"""Experiment harness: single-source train -> ID/OOD evaluation, the
four-method ablation grid, the paired intervention study, and report
emission (JSON / CSV / markdown).

Paired-comparison contract: within a seed every method sees the same
dataset and the same frozen encoder; encoder features for the test sets
are computed once per seed and shared.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .metrics import aggregate_records, domain_probe, evaluate_masks
from .model import ModelConfig, SegModel, encode_images, params_hash, pretrain_encoder
from .reasoner import (
    ReasonerModel,
    canonical_command,
    predict_film,
)
from .styletext import AttributeCodebook
from .synthgen import (
    CORRUPTION_KINDS,
    DatasetConfig,
    SplitSet,
    corrupt_for_intervention,
    generate_dataset,
    make_pretrain_pool,
)
from .trainer import (
    ModelSnapshot,
    TrainConfig,
    _predict_from_feats,
    foreground_dice,
    train,
)
from .util import array_sha256, canonical_json, derive_seed, read_json, rng_from

DEFAULT_METHODS = ("lad", "grl", "erm_lambda0", "mixstyle")

REPORT_FOOTNOTES = [
    "OOD aggregation: unweighted mean over OOD domains.",
    "Intervention hardness is induced (known corruption), not curated.",
]


@dataclass
class BenchReport:
    rows: list  # one dict per (method, seed)
    aggregates: dict  # method -> column -> {mean, std}
    ordering: dict
    intervention: dict | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "aggregates": self.aggregates,
            "ordering": self.ordering,
            "intervention": self.intervention,
            "meta": self.meta,
            "footnotes": REPORT_FOOTNOTES,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        return cls(
            rows=d["rows"],
            aggregates=d["aggregates"],
            ordering=d["ordering"],
            intervention=d.get("intervention"),
            meta=d.get("meta", {}),
        )


def default_pretrain_pool_size(dataset_cfg: DatasetConfig) -> int:
    return max(200, dataset_cfg.samples_per_domain // 5)


def pretrain_for_seed(dataset_cfg: DatasetConfig, model_cfg: ModelConfig,
                      seed: int, epochs: int = 4, pool_size: int | None = None):
    pool = make_pretrain_pool(
        dataset_cfg, pool_size or default_pretrain_pool_size(dataset_cfg),
        seed=derive_seed(seed, "pretrain-pool"),
    )
    encoder, log = pretrain_encoder(
        pool, model_cfg, epochs=epochs, seed=derive_seed(seed, "pretrain")
    )
    return encoder, log


class _SeedContext:
    """Per-seed shared state: frozen encoder + cached test-set features."""

    def __init__(self, dataset: SplitSet, dataset_cfg, model_cfg, encoder):
        self.encoder = encoder
        self.model_cfg = model_cfg
        self.dataset = dataset
        probe_model = SegModel.initialize(model_cfg, seed=0, encoder=encoder)
        self.splits = {}
        self.masks = {}
        id_imgs = np.stack([s.image for s in dataset.id_test])
        self.splits["id"] = encode_images(probe_model, id_imgs)
        self.masks["id"] = np.stack([s.mask for s in dataset.id_test])
        for dom in sorted(dataset.ood_tests):
            imgs = np.stack([s.image for s in dataset.ood_tests[dom]])
            self.splits[dom] = encode_images(probe_model, imgs)
            self.masks[dom] = np.stack([s.mask for s in dataset.ood_tests[dom]])


def _pooled_from_feats(model: SegModel, feats: np.ndarray, batch: int = 64):
    outs = []
    for i in range(0, len(feats), batch):
        f = model.adapt(T.Tensor(feats[i : i + batch]))
        outs.append(f.data.mean(axis=(2, 3)))
    return np.concatenate(outs, axis=0)


def evaluate_snapshot(snapshot: ModelSnapshot, ctx: _SeedContext, seed: int) -> dict:
    model = snapshot.model
    k = model.cfg.num_classes
    row = {}
    per_domain = {}
    feats_all, labels_all = [], []
    for di, split in enumerate(["id"] + sorted(d for d in ctx.splits if d != "id")):
        feats = ctx.splits[split]
        preds = _predict_from_feats(model, feats)
        recs = evaluate_masks(preds, ctx.masks[split], k, domain=split)
        per_domain[split] = aggregate_records(recs)
        feats_all.append(_pooled_from_feats(model, feats))
        labels_all += [di] * len(feats)
    ood_names = sorted(d for d in ctx.splits if d != "id")
    row["id_dice"] = per_domain["id"]["dice"]
    row["id_hd95"] = per_domain["id"]["hd95"]
    row["ood"] = {d: per_domain[d] for d in ood_names}
    row["avg_ood_dice"] = float(np.mean([per_domain[d]["dice"] for d in ood_names]))
    row["avg_ood_hd95"] = float(np.mean([per_domain[d]["hd95"] for d in ood_names]))
    row["gap"] = row["id_dice"] - row["avg_ood_dice"]
    row["probe_accuracy"] = domain_probe(
        np.concatenate(feats_all), np.array(labels_all),
        split_seed=derive_seed(seed, "probe"),
    )
    return row


def run_protocol(methods, seeds, dataset_cfg: DatasetConfig,
                 model_cfg: ModelConfig | None = None,
                 base_train_cfg: TrainConfig | None = None,
                 pretrain_epochs: int = 4,
                 pretrain_pool: int | None = None,
                 encoder_provider=None,
                 snapshot_sink=None,
                 progress=None) -> BenchReport:
    """Train and evaluate each (method, seed); aggregate into a BenchReport.

    encoder_provider(seed) may supply cached frozen encoders; snapshot_sink
    (method, seed, snapshot, runlog) captures artifacts for persistence.
    """
    model_cfg = (model_cfg or ModelConfig()).validate()
    base = base_train_cfg or TrainConfig()
    dataset = generate_dataset(dataset_cfg)
    codebook = AttributeCodebook.create(derive_seed(dataset_cfg.master_seed, "codebook"))

    rows = []
    for seed in seeds:
        if encoder_provider is not None:
            encoder = encoder_provider(seed)
        else:
            encoder, _ = pretrain_for_seed(
                dataset_cfg, model_cfg, seed,
                epochs=pretrain_epochs, pool_size=pretrain_pool,
            )
        ctx = _SeedContext(dataset, dataset_cfg, model_cfg, encoder)
        enc_hash = params_hash(encoder)
        for method in methods:
            cfg = replace(base, method=method, seed=seed).validate()
            if progress:
                progress(f"train {method} seed={seed}")
            snapshot, runlog, timing = train(cfg, dataset, encoder, model_cfg, codebook)
            row = {
                "method": method,
                "seed": seed,
                "encoder_hash": enc_hash,
                **evaluate_snapshot(snapshot, ctx, seed),
            }
            rows.append(row)
            if snapshot_sink:
                snapshot_sink(method, seed, snapshot, runlog, timing)

    report = BenchReport(
        rows=rows,
        aggregates=_aggregate(rows),
        ordering=_ordering_stats(rows),
        meta={
            "methods": list(methods),
            "seeds": list(seeds),
            "dataset": {
                "image_size": dataset_cfg.image_size,
                "num_classes": dataset_cfg.num_classes,
                "samples_per_domain": dataset_cfg.samples_per_domain,
                "test_samples_per_domain": dataset_cfg.test_samples_per_domain,
                "master_seed": dataset_cfg.master_seed,
                "source_domains": [d.name for d in dataset_cfg.source_domains],
                "ood_domains": [d.name for d in dataset_cfg.ood_domains],
            },
            "train": base.to_dict(),
            "model": model_cfg.to_dict(),
        },
    )
    return report


def _aggregate(rows) -> dict:
    methods = sorted({r["method"] for r in rows})
    out = {}
    for m in methods:
        sub = [r for r in rows if r["method"] == m]
        cols = {}
        for col in ("id_dice", "id_hd95", "avg_ood_dice", "avg_ood_hd95",
                    "gap", "probe_accuracy"):
            vals = np.array([r[col] for r in sub], dtype=float)
            cols[col] = {"mean": float(np.nanmean(vals)), "std": float(np.nanstd(vals))}
        for dom in sorted(sub[0]["ood"]):
            vals = np.array([r["ood"][dom]["dice"] for r in sub])
            cols[f"ood_dice:{dom}"] = {"mean": float(vals.mean()), "std": float(vals.std())}
            hvals = np.array([r["ood"][dom]["hd95"] for r in sub])
            cols[f"ood_hd95:{dom}"] = {"mean": float(np.nanmean(hvals)),
                                       "std": float(np.nanstd(hvals))}
        cols["n_seeds"] = len(sub)
        out[m] = cols
    return out


def _ordering_stats(rows) -> dict:
    by = {}
    for r in rows:
        by.setdefault(r["method"], {})[r["seed"]] = r["avg_ood_dice"]
    out = {}
    if "lad" in by:
        for other in by:
            if other == "lad":
                continue
            common = sorted(set(by["lad"]) & set(by[other]))
            if not common:
                continue
            wins = sum(1 for s in common if by["lad"][s] > by[other][s])
            out[f"lad_gt_{other}"] = {
                "wins": wins,
                "n_seeds": len(common),
                "fraction": wins / len(common),
            }
    return out


def ablation_suite(seeds, dataset_cfg, model_cfg=None, base_train_cfg=None,
                   **kw) -> BenchReport:
    """Full-vs-ablated grid over all four methods with shared encoders."""
    return run_protocol(DEFAULT_METHODS, seeds, dataset_cfg, model_cfg,
                        base_train_cfg, **kw)


# ---------------------------------------------------------------------------
# intervention study


def intervention_study(snapshot: ModelSnapshot, reasoner: ReasonerModel,
                       dataset: SplitSet, n_cases: int = 50,
                       kinds=CORRUPTION_KINDS, seed: int = 0,
                       severity_range=(0.5, 0.9)) -> dict:
    """Paired arms on corrupted OOD samples: identity FiLM vs the learned
    reasoner driven by the canonical command for the known cause."""
    model = snapshot.model
    k = model.cfg.num_classes
    ood_all = []
    for dom in sorted(dataset.ood_tests):
        ood_all.extend(dataset.ood_tests[dom])
    rng = rng_from(seed, "intervention-cases")
    order = rng.permutation(len(ood_all))
    cases = []
    for i in range(n_cases):
        sample = ood_all[order[i % len(ood_all)]]
        kind = kinds[i % len(kinds)]
        severity = float(rng.uniform(*severity_range))
        corrupted, info = corrupt_for_intervention(sample, kind, severity)
        feats = model.encode(corrupted.image).data
        input_hash = array_sha256(corrupted.image)

        pred_a = _predict_from_feats(model, feats, film=None)[0]
        cmd = canonical_command(kind, severity, k)
        film = predict_film(reasoner, cmd)
        pred_b = _predict_from_feats(model, feats, film=film)[0]

        agg_a = aggregate_records(evaluate_masks([pred_a], [corrupted.mask], k))
        agg_b = aggregate_records(evaluate_masks([pred_b], [corrupted.mask], k))
        cases.append({
            "case": i,
            "domain": sample.domain,
            "kind": kind,
            "severity": severity,
            "command": cmd.canonical_text(),
            "input_hash": input_hash,
            "dice_a": agg_a["dice"],
            "dice_b": agg_b["dice"],
            "hd95_a": agg_a["hd95"],
            "hd95_b": agg_b["hd95"],
        })

    dice_a = np.array([c["dice_a"] for c in cases])
    dice_b = np.array([c["dice_b"] for c in cases])
    hd_a = np.array([c["hd95_a"] for c in cases])
    hd_b = np.array([c["hd95_b"] for c in cases])
    finite = np.isfinite(hd_a) & np.isfinite(hd_b)
    return {
        "n_cases": n_cases,
        "cases": cases,
        "summary": {
            "dice_no_intervention": {"mean": float(dice_a.mean()), "std": float(dice_a.std())},
            "dice_with_prompt": {"mean": float(dice_b.mean()), "std": float(dice_b.std())},
            "dice_delta_mean": float((dice_b - dice_a).mean()),
            "improved_fraction": float((dice_b > dice_a).mean()),
            "hd95_no_intervention": {"mean": float(hd_a[finite].mean()) if finite.any() else float("nan"),
                                     "std": float(hd_a[finite].std()) if finite.any() else float("nan")},
            "hd95_with_prompt": {"mean": float(hd_b[finite].mean()) if finite.any() else float("nan"),
                                 "std": float(hd_b[finite].std()) if finite.any() else float("nan")},
            "hd95_sentinels": int((~finite).sum()),
        },
    }


# ---------------------------------------------------------------------------
# report emission


def emit_report(report: BenchReport, out_dir, formats=("json", "csv", "markdown")):
    """Deterministic serialization; returns {format: path}."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    if "json" in formats:
        p = out_dir / "bench.json"
        p.write_text(canonical_json(report.to_dict()), encoding="utf-8")
        paths["json"] = p
    if "csv" in formats:
        p = out_dir / "bench.csv"
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "seed", "domain", "dice", "hd95", "hd95_sentinels"])
        for r in report.rows:
            w.writerow([r["method"], r["seed"], "id",
                        f"{r['id_dice']:.6f}", f"{r['id_hd95']:.6f}", 0])
            for dom in sorted(r["ood"]):
                agg = r["ood"][dom]
                w.writerow([r["method"], r["seed"], dom,
                            f"{agg['dice']:.6f}", f"{agg['hd95']:.6f}",
                            agg["hd95_sentinels"]])
        p.write_text(buf.getvalue(), encoding="utf-8")
        paths["csv"] = p
    if "markdown" in formats:
        p = out_dir / "bench.md"
        p.write_text(_markdown_report(report), encoding="utf-8")
        paths["markdown"] = p
    return paths


def load_report(path) -> BenchReport:
    return BenchReport.from_dict(read_json(path))


def _fmt_pm(cell) -> str:
    return f"{cell['mean']:.3f} ± {cell['std']:.3f}"


def _markdown_report(report: BenchReport) -> str:
    lines = ["# Benchmark report", ""]
    ood_doms = sorted(report.rows[0]["ood"]) if report.rows else []
    if report.aggregates:
        header = (["method", "ID Dice", "ID HD95"]
                  + [f"{d} Dice" for d in ood_doms]
                  + [f"{d} HD95" for d in ood_doms]
                  + ["avg OOD Dice", "avg OOD HD95", "gap", "probe acc"])
        lines.append("## Methods × domains (mean ± std over seeds)")
        lines.append("")
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for m in sorted(report.aggregates):
            agg = report.aggregates[m]
            cells = [m, _fmt_pm(agg["id_dice"]), _fmt_pm(agg["id_hd95"])]
            cells += [_fmt_pm(agg[f"ood_dice:{d}"]) for d in ood_doms]
            cells += [_fmt_pm(agg[f"ood_hd95:{d}"]) for d in ood_doms]
            cells += [_fmt_pm(agg["avg_ood_dice"]), _fmt_pm(agg["avg_ood_hd95"]),
                      _fmt_pm(agg["gap"]), _fmt_pm(agg["probe_accuracy"])]
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    if report.ordering:
        lines.append("## Seed-level orderings (avg OOD Dice)")
        lines.append("")
        lines.append("| comparison | wins | seeds | fraction |")
        lines.append("|---|---|---|---|")
        for key in sorted(report.ordering):
            o = report.ordering[key]
            lines.append(f"| {key} | {o['wins']} | {o['n_seeds']} | {o['fraction']:.2f} |")
        lines.append("")
    if report.intervention:
        s = report.intervention["summary"]
        lines.append("## Test-time intervention (paired, induced-hard OOD cases)")
        lines.append("")
        lines.append("| configuration | Dice | HD95 |")
        lines.append("|---|---|---|")
        lines.append(f"| no intervention | {_fmt_pm(s['dice_no_intervention'])} "
                     f"| {_fmt_pm(s['hd95_no_intervention'])} |")
        lines.append(f"| with language prompt | {_fmt_pm(s['dice_with_prompt'])} "
                     f"| {_fmt_pm(s['hd95_with_prompt'])} |")
        lines.append("")
        lines.append(f"Dice delta {s['dice_delta_mean']:+.4f}; "
                     f"improved on {s['improved_fraction']:.0%} of cases; "
                     f"HD95 sentinels: {s['hd95_sentinels']}.")
        lines.append("")
    lines.append("---")
    for note in REPORT_FOOTNOTES:
        lines.append(f"- {note}")
    lines.append("")
    return "\n".join(lines)
