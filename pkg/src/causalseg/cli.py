"""Single entry-point CLI: datagen -> pretrain -> train -> synth-pairs ->
train-reasoner -> eval/ablate -> report, plus an interactive intervention
REPL and the HTTP service.

Every stage writes a manifest echoing its fully resolved configuration and
the SHA-256 of each non-volatile artifact; stages reference each other by
those artifact paths. Exit codes: 0 ok, 2 config error, 3 numeric abort
(non-finite loss), 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evalbench as EB
from . import model as M
from . import synthgen as sg
from .metrics import dice_score
from .reasoner import (
    CommandParseError,
    grammar_help,
    load_reasoner,
    parse_command,
    predict_film,
    rule_reasoner,
    save_reasoner,
    synth_pairs,
    train_reasoner,
)
from .snapshot import MODEL_MAGIC, read_container, weights_from_bytes, \
    weights_to_bytes, write_container
from .styletext import AttributeCodebook
from .trainer import (
    ModelSnapshot,
    NumericAbort,
    TrainConfig,
    load_snapshot,
    save_snapshot,
    train,
)
from .util import canonical_json, derive_seed, file_sha256, read_json, write_json

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


def _say(args, message: str) -> None:
    if not getattr(args, "quiet", False):
        print(message, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# config file (flat key=value) and manifests


def load_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def write_manifest(out_dir: Path, stage: str, config: dict, inputs: dict,
                   artifacts: dict, volatile=()) -> Path:
    entry = {
        "stage": stage,
        "config": config,
        "inputs": {
            name: {"path": str(p), "sha256": file_sha256(p)}
            for name, p in sorted(inputs.items())
        },
        "artifacts": {},
    }
    for name, p in sorted(artifacts.items()):
        rec = {"path": str(Path(p).relative_to(out_dir))}
        if name in volatile:
            rec["volatile"] = True
        else:
            rec["sha256"] = file_sha256(p)
        entry["artifacts"][name] = rec
    path = out_dir / "manifest.json"
    path.write_text(canonical_json(entry), encoding="utf-8")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# dataset plumbing


def dataset_cfg_from_args(args) -> sg.DatasetConfig:
    base = sg.default_benchmark_config(
        master_seed=args.seed,
        samples_per_domain=args.samples,
        test_samples_per_domain=args.test_samples,
        image_size=args.image_size,
    )
    return base


def load_dataset_dir(path) -> tuple[sg.SplitSet, int, int]:
    d = Path(path)
    if not d.is_dir():
        raise ConfigError(f"--dataset {path} is not a directory")
    train_s, size, k = sg.load_split(d / "train.csl")
    id_test, _, _ = sg.load_split(d / "id_test.csl")
    ood = {}
    for f in sorted(d.glob("ood_*.csl")):
        name = f.stem[len("ood_"):]
        ood[name], _, _ = sg.load_split(f)
    return sg.SplitSet(train=train_s, id_test=id_test, ood_tests=ood), size, k


def model_cfg_for(image_size: int) -> M.ModelConfig:
    return M.ModelConfig(image_size=image_size).validate()


# ---------------------------------------------------------------------------
# encoder container (encoder weights + codebook only)


def save_encoder(encoder: dict, codebook: AttributeCodebook, model_cfg: M.ModelConfig,
                 path, seeds: dict) -> None:
    sections = {
        "meta": canonical_json({"kind": "encoder", "seeds": seeds}).encode(),
        "config": canonical_json({"model": model_cfg.to_dict()}).encode(),
        "encoder": weights_to_bytes(encoder),
        "codebook": codebook.to_bytes(),
    }
    write_container(path, MODEL_MAGIC, sections)


def load_encoder(path):
    import json as _json

    sections = read_container(path, MODEL_MAGIC)
    cfg = M.ModelConfig.from_dict(_json.loads(sections["config"])["model"])
    encoder = weights_from_bytes(sections["encoder"])
    M.set_requires_grad(encoder, False)
    codebook = AttributeCodebook.from_bytes(sections["codebook"])
    return encoder, codebook, cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_datagen(args) -> int:
    out = _out_dir(args)
    cfg = dataset_cfg_from_args(args)
    dataset = sg.generate_dataset(cfg)
    artifacts = {}
    p = out / "train.csl"
    sg.save_split(p, dataset.train, cfg.image_size, cfg.num_classes)
    artifacts["train"] = p
    artifacts["train_sidecar"] = Path(str(p) + ".json")
    p = out / "id_test.csl"
    sg.save_split(p, dataset.id_test, cfg.image_size, cfg.num_classes)
    artifacts["id_test"] = p
    artifacts["id_test_sidecar"] = Path(str(p) + ".json")
    for dom, samples in sorted(dataset.ood_tests.items()):
        p = out / f"ood_{dom}.csl"
        sg.save_split(p, samples, cfg.image_size, cfg.num_classes)
        artifacts[f"ood_{dom}"] = p
        artifacts[f"ood_{dom}_sidecar"] = Path(str(p) + ".json")
    write_manifest(out, "datagen", {
        "seed": args.seed, "samples": args.samples,
        "test_samples": args.test_samples, "image_size": args.image_size,
    }, {}, artifacts)
    _say(args, f"dataset written to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    out = _out_dir(args)
    dataset_dir = Path(args.dataset)
    _, size, _k = load_dataset_dir(dataset_dir)
    model_cfg = model_cfg_for(size)
    dcfg = sg.default_benchmark_config(master_seed=args.seed, image_size=size)
    pool = sg.make_pretrain_pool(dcfg, args.pool, seed=derive_seed(args.seed, "pretrain-pool"))
    encoder, log = M.pretrain_encoder(pool, model_cfg, epochs=args.epochs,
                                      seed=derive_seed(args.seed, "pretrain"))
    codebook = AttributeCodebook.create(derive_seed(args.seed, "codebook"))
    path = out / "encoder.cslm"
    save_encoder(encoder, codebook, model_cfg, path, {"seed": args.seed})
    write_json(out / "pretrain_log.json", log)
    write_manifest(out, "pretrain", {
        "seed": args.seed, "epochs": args.epochs, "pool": args.pool,
    }, {"dataset_manifest": dataset_dir / "manifest.json"},
        {"encoder": path, "pretrain_log": out / "pretrain_log.json"},
        volatile=("pretrain_log",))
    _say(args, f"frozen encoder at {path} "
               f"(heldout mse {log['heldout_mse_before']:.4f} -> {log['heldout_mse_after']:.4f})")
    return EXIT_OK


def _train_cfg_from_args(args) -> TrainConfig:
    try:
        return TrainConfig(
            method=args.method,
            lam=args.lam,
            lambda_grl=args.lambda_grl,
            mixstyle_alpha=args.mixstyle_alpha,
            dis_mode=args.dis_mode,
            lr=args.lr,
            epochs=args.epochs,
            batch_size=args.batch_size,
            seed=args.seed,
        ).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args) -> int:
    out = _out_dir(args)
    dataset, size, _k = load_dataset_dir(args.dataset)
    encoder, codebook, model_cfg = load_encoder(args.encoder)
    cfg = _train_cfg_from_args(args)
    snapshot, runlog, timing = train(cfg, dataset, encoder, model_cfg, codebook)
    model_path = out / "model.cslm"
    save_snapshot(snapshot, model_path)
    runlog_path = out / "runlog.jsonl"
    runlog_path.write_text(
        "".join(canonical_json(r) for r in runlog), encoding="utf-8"
    )
    write_json(out / "timing.json", timing)
    write_manifest(out, "train", cfg.to_dict(), {
        "dataset_manifest": Path(args.dataset) / "manifest.json",
        "encoder": Path(args.encoder),
    }, {
        "model": model_path,
        "runlog": runlog_path,
        "timing": out / "timing.json",
    }, volatile=("timing",))
    _say(args, f"model at {model_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out_dir(args)
    dataset, size, _k = load_dataset_dir(args.dataset)
    snapshot = load_snapshot(args.model)
    dcfg_stub = sg.default_benchmark_config(master_seed=args.seed, image_size=size)
    ctx = EB._SeedContext(dataset, dcfg_stub, snapshot.model.cfg, snapshot.model.encoder)
    row = EB.evaluate_snapshot(snapshot, ctx, seed=args.seed)
    write_json(out / "eval.json", row)
    write_manifest(out, "eval", {"seed": args.seed}, {
        "model": Path(args.model),
        "dataset_manifest": Path(args.dataset) / "manifest.json",
    }, {"eval": out / "eval.json"})
    _say(args, f"id_dice={row['id_dice']:.3f} avg_ood_dice={row['avg_ood_dice']:.3f} "
               f"probe={row['probe_accuracy']:.3f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    methods = tuple(args.methods.split(","))
    seeds = tuple(int(s) for s in args.seeds.split(","))
    dcfg = dataset_cfg_from_args(args)
    model_cfg = model_cfg_for(args.image_size)
    base = TrainConfig(method="lad", lam=args.lam, lr=args.lr,
                       epochs=args.epochs, batch_size=args.batch_size)

    enc_dir = out / "encoders"
    enc_dir.mkdir(exist_ok=True)
    codebook = AttributeCodebook.create(derive_seed(dcfg.master_seed, "codebook"))

    def encoder_provider(seed):
        path = enc_dir / f"encoder_seed{seed}.cslm"
        if path.exists():
            enc, _cb, _cfg = load_encoder(path)
            return enc
        enc, _log = EB.pretrain_for_seed(dcfg, model_cfg, seed,
                                         epochs=args.pretrain_epochs,
                                         pool_size=args.pool)
        save_encoder(enc, codebook, model_cfg, path, {"seed": seed})
        return enc

    artifacts = {}

    def sink(method, seed, snapshot, runlog, timing):
        p = out / f"model_{method}_seed{seed}.cslm"
        save_snapshot(snapshot, p)
        artifacts[f"model_{method}_{seed}"] = p
        lp = out / f"runlog_{method}_seed{seed}.jsonl"
        lp.write_text("".join(canonical_json(r) for r in runlog), encoding="utf-8")
        artifacts[f"runlog_{method}_{seed}"] = lp

    report = EB.run_protocol(
        methods, seeds, dcfg, model_cfg, base,
        encoder_provider=encoder_provider,
        snapshot_sink=sink,
        progress=None if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True)),
    )
    paths = EB.emit_report(report, out / "reports")
    for fmt, p in paths.items():
        artifacts[f"report_{fmt}"] = p
    for seed in seeds:
        artifacts[f"encoder_{seed}"] = enc_dir / f"encoder_seed{seed}.cslm"
    write_manifest(out, "ablate", {
        "methods": list(methods), "seeds": list(seeds),
        "seed": args.seed, "samples": args.samples,
        "test_samples": args.test_samples, "image_size": args.image_size,
        "train": base.to_dict(), "pretrain_epochs": args.pretrain_epochs,
        "pool": args.pool,
    }, {}, artifacts)
    _say(args, f"ablation report at {paths['markdown']}")
    return EXIT_OK


def cmd_synth_pairs(args) -> int:
    out = _out_dir(args)
    snapshot = load_snapshot(args.model)
    dataset, _size, _k = load_dataset_dir(args.dataset)
    # fresh source-domain samples, disjoint from train/test content seeds
    dcfg = sg.default_benchmark_config(
        master_seed=args.seed, image_size=snapshot.model.cfg.image_size
    )
    source = dcfg.source_domains[0]
    samples = sg.make_extra_samples(dcfg, source, args.n_samples, "pairs")
    pairs, skipped = synth_pairs(
        snapshot.model, samples, n_per_kind=args.n_per_kind, seed=args.seed
    )
    if not pairs:
        raise ConfigError("pair synthesis produced no usable pairs")
    path = out / "pairs.cslr"
    # pairs-only sidecar: carry an identity placeholder in the weights slot
    from .reasoner import ReasonerModel, compact_identity
    from .tensor import Tensor

    placeholder = ReasonerModel(
        num_classes=snapshot.model.cfg.num_classes,
        widths=snapshot.model.cfg.dec_channels,
        hidden=0,
        params={
            "w1": Tensor(np.zeros((11, 1))),
            "b1": Tensor(np.zeros(1)),
            "w2": Tensor(np.zeros((1, 6))),
            "b2": Tensor(compact_identity(3)),
        },
        train_meta={"placeholder": True},
    )
    save_reasoner(placeholder, path, pairs=pairs)
    write_manifest(out, "synth-pairs", {
        "seed": args.seed, "n_per_kind": args.n_per_kind,
        "n_samples": args.n_samples,
    }, {"model": Path(args.model)}, {"pairs": path})
    _say(args, f"{len(pairs)} pairs ({skipped} skipped) at {path}")
    return EXIT_OK


def cmd_train_reasoner(args) -> int:
    out = _out_dir(args)
    _rm, pairs = load_reasoner(args.pairs)
    if not pairs:
        raise ConfigError(f"{args.pairs} contains no pairs")
    rm = train_reasoner(pairs, epochs=args.epochs, seed=args.seed,
                        num_classes=_rm.num_classes, widths=_rm.widths)
    path = out / "reasoner.cslr"
    save_reasoner(rm, path)
    write_manifest(out, "train-reasoner", {
        "seed": args.seed, "epochs": args.epochs,
    }, {"pairs": Path(args.pairs)}, {"reasoner": path})
    _say(args, f"reasoner at {path} "
               f"(mse {rm.train_meta['mse_first']:.4f} -> {rm.train_meta['mse_last']:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# interactive REPL


CLASS_GLYPHS = ".123456789"


def _ascii_mask(mask: np.ndarray, width: int = 32) -> str:
    step = max(1, mask.shape[0] // width)
    rows = []
    for r in mask[::step]:
        rows.append("".join(CLASS_GLYPHS[v % len(CLASS_GLYPHS)] for v in r[::step]))
    return "\n".join(rows)


def _repl_metrics(pred, mask, k) -> str:
    per_class = [dice_score(pred, mask, c) for c in range(1, k)]
    mean = float(np.mean(per_class))
    parts = " ".join(f"c{c}={d:.3f}" for c, d in enumerate(per_class, 1))
    return f"dice mean={mean:.3f} ({parts})"


def cmd_intervene(args) -> int:
    snapshot = load_snapshot(args.model)
    reasoner = None
    if args.reasoner:
        reasoner, _ = load_reasoner(args.reasoner)
    dataset, _size, _k = load_dataset_dir(args.dataset)
    model = snapshot.model
    k = model.cfg.num_classes

    pool = dataset.ood_tests.get(args.domain) if args.domain != "id" else dataset.id_test
    if pool is None:
        raise ConfigError(f"unknown domain {args.domain!r}")

    index = args.index
    out = sys.stdout

    def load_case(idx):
        sample = pool[idx % len(pool)]
        if args.corruption:
            corrupted, _info = sg.corrupt_for_intervention(
                sample, args.corruption, args.severity
            )
            sample = corrupted
        feats = model.encode(sample.image).data
        return sample, feats

    def show(sample, feats, film, label):
        from .trainer import _predict_from_feats

        pred = _predict_from_feats(model, feats, film=film)[0]
        print(f"--- {label}", file=out)
        print(_ascii_mask(pred), file=out)
        print(_repl_metrics(pred, sample.mask, k), file=out)
        return pred

    sample, feats = load_case(index)
    print(f"sample {args.domain}/{index} "
          f"(corruption={args.corruption or 'none'})", file=out)
    show(sample, feats, None, "prediction (identity modulation)")
    print("enter commands (:quit, :next, :reset; syntax below)", file=out)
    print(grammar_help(), file=out)

    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        if line == ":quit":
            break
        if line == ":next":
            index += 1
            sample, feats = load_case(index)
            print(f"sample {args.domain}/{index}", file=out)
            show(sample, feats, None, "prediction (identity modulation)")
            continue
        if line == ":reset":
            show(sample, feats, None, "prediction (identity modulation)")
            continue
        try:
            cmd = parse_command(line, num_classes=k)
        except CommandParseError as exc:
            print(f"parse error {exc}", file=out)
            print(grammar_help(), file=out)
            continue
        if cmd.verb == "identity":
            film = None
        elif reasoner is not None and args.backend == "learned":
            film = predict_film(reasoner, cmd)
        else:
            film = rule_reasoner(cmd, model)
        show(sample, feats, film, f"after: {cmd.canonical_text()}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    snapshot = load_snapshot(args.model)
    reasoner = None
    if args.reasoner:
        reasoner, _ = load_reasoner(args.reasoner)
    dataset = None
    if args.dataset:
        dataset, _size, _k = load_dataset_dir(args.dataset)
    app = create_app(snapshot, snapshot_path=args.model, reasoner=reasoner,
                     dataset=dataset, reasoner_backend=args.backend,
                     static_dir=args.static or None)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def cmd_report(args) -> int:
    out = _out_dir(args)
    report = EB.load_report(args.bench)
    paths = EB.emit_report(report, out)
    write_manifest(out, "report", {}, {"bench": Path(args.bench)},
                   {f"report_{fmt}": p for fmt, p in paths.items()})
    _say(args, f"reports at {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causalseg",
        description="style-disentangled segmentation lab: data, training, "
                    "benchmarks, intervention, serving",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, out_dir=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--quiet", action="store_true")
        if out_dir:
            p.add_argument("--out-dir", required=True)

    p = sub.add_parser("datagen", help="generate the synthetic benchmark dataset")
    common(p)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--test-samples", type=int, default=150)
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(fn=cmd_datagen)

    p = sub.add_parser("pretrain", help="pretrain and freeze the encoder")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--pool", type=int, default=400)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="train adapter/proj/decoder on one method")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--method", default="lad")
    p.add_argument("--lam", type=float, default=0.1)
    p.add_argument("--lambda-grl", type=float, default=0.2)
    p.add_argument("--mixstyle-alpha", type=float, default=0.3)
    p.add_argument("--dis-mode", default="signed")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a snapshot on ID + OOD splits")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="full method-vs-method benchmark grid")
    common(p)
    p.add_argument("--methods", default="lad,grl,erm_lambda0,mixstyle")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--test-samples", type=int, default=150)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--lam", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--pretrain-epochs", type=int, default=4)
    p.add_argument("--pool", type=int, default=400)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("synth-pairs", help="search corrective modulations for corrupted samples")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--n-per-kind", type=int, default=25)
    p.add_argument("--n-samples", type=int, default=60)
    p.set_defaults(fn=cmd_synth_pairs)

    p = sub.add_parser("train-reasoner", help="fit the command->modulation regressor")
    common(p)
    p.add_argument("--pairs", required=True)
    p.add_argument("--epochs", type=int, default=400)
    p.set_defaults(fn=cmd_train_reasoner)

    p = sub.add_parser("intervene", help="interactive correction REPL")
    common(p, out_dir=False)
    p.add_argument("--model", required=True)
    p.add_argument("--reasoner", default=None)
    p.add_argument("--dataset", required=True)
    p.add_argument("--domain", default="id")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--corruption", default=None)
    p.add_argument("--severity", type=float, default=0.7)
    p.add_argument("--backend", choices=("learned", "rule"), default="learned")
    p.set_defaults(fn=cmd_intervene)

    p = sub.add_parser("serve", help="HTTP service for the web UI / API clients")
    common(p, out_dir=False)
    p.add_argument("--model", required=True)
    p.add_argument("--reasoner", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.add_argument("--backend", choices=("learned", "rule"), default="learned")
    p.add_argument("--static", default=None, help="directory of UI static files")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("report", help="re-emit reports from a bench.json")
    common(p)
    p.add_argument("--bench", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def _apply_config_file(parser, argv):
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    cfg_path = argv[idx + 1]
    values = load_config_file(cfg_path)
    extra = []
    explicit = {a.split("=")[0].lstrip("-").replace("-", "_")
                for a in argv if a.startswith("--")}
    for key, value in values.items():
        if key in explicit:
            continue
        extra.append(f"--{key.replace('_', '-')}")
        extra.append(value)
    return argv + extra


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # argparse errors already use exit code 2
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
