"""Command-line entry point: gen-data, pretrain, probe, ablate.

stdout carries machine-readable results only (JSON or CSV); progress and
diagnostics go to stderr. Exit codes: 0 success, 2 configuration error,
3 data error, 4 numerical failure. Relative --out paths resolve under
$CBT_RUN_DIR when that variable is set.

Heavy imports happen inside the command handlers so that --threads can pin
the BLAS thread count before numpy loads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _resolve_out(path: str) -> str:
    root = os.environ.get("CBT_RUN_DIR")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _echo_config(out_dir: str, resolved: dict) -> None:
    from .config import canonical_json
    from .trainer import ARTIFACT_VERSION

    os.makedirs(out_dir, exist_ok=True)
    doc = {"artifact_version": ARTIFACT_VERSION, "config": resolved}
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(canonical_json(doc) + "\n")


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_json(path: str) -> dict:
    from .config import ConfigError

    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .config import ConfigError, build_dataclass, canonical_json
    from .synthdata import CorpusSpec, generate, save_corpus

    data = _load_json(args.spec) if args.spec else {}
    if args.seed is not None:
        data = {**data, "seed": args.seed}
    spec = build_dataclass(CorpusSpec, data, "corpus")
    out = _resolve_out(args.out)
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    _progress(f"generating {spec.num_sequences} sequences "
              f"(T={spec.seq_len}, D={spec.feature_dim}, seed={spec.seed})")
    sequences = generate(spec)
    save_corpus(out, spec, sequences)
    print(canonical_json({
        "path": out,
        "sequences": len(sequences),
        "sha256": _sha256(out),
        "spec": spec.to_dict(),
    }))
    return EXIT_OK


def _load_corpus_checked(path: str):
    from .synthdata import load_corpus

    try:
        return load_corpus(path)
    except FileNotFoundError as exc:
        raise _DataError(f"corpus file not found: {path}") from exc
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise _DataError(f"corpus file {path} is malformed: {exc}") from exc


class _DataError(RuntimeError):
    pass


def cmd_pretrain(args) -> int:
    import dataclasses

    from .config import (canonical_json, load_run_config, run_config_to_dict,
                         RunConfig, validate_corpus_against_model)
    from .trainer import (TrainingError, compute_losses, init_params, pretrain,
                          run_metadata, save_checkpoint, training_batch)

    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train,
                                                                 seed=args.seed))
    spec, corpus = _load_corpus_checked(args.corpus)
    validate_corpus_against_model(spec, cfg.model)

    resolved = run_config_to_dict(cfg)
    if args.dry_run:
        batch, masks_x, masks_y = training_batch(corpus, cfg.train, 0)
        store = init_params(cfg.model, cfg.train.seed)
        _, components = compute_losses(batch, masks_x, masks_y, store,
                                       cfg.model, cfg.train.weights)
        print(canonical_json({"config": resolved, "step0": components}))
        return EXIT_OK

    out_dir = _resolve_out(args.out)
    _echo_config(out_dir, resolved)
    total = cfg.train.steps

    def progress(row):
        step = row["step"]
        if total and (step % max(1, total // 10) == 0 or step == total - 1):
            _progress(f"step {step}/{total}  l_total={row['l_total']:.4f}  "
                      f"lr={row['learning_rate']:.2e}")

    try:
        store, optimizer, metrics = pretrain(
            corpus, cfg.model, cfg.train,
            metrics_path=os.path.join(out_dir, "metrics.jsonl"),
            checkpoint_dir=out_dir, progress=progress,
        )
    except TrainingError as exc:
        if exc.store is not None:
            diag = os.path.join(out_dir, "diagnostic.ckpt")
            meta = run_metadata(cfg.model, cfg.train, exc.step or 0)
            meta["failed_component"] = exc.component
            save_checkpoint(diag, exc.store, meta)
            _progress(f"wrote diagnostic checkpoint to {diag}")
        raise
    final = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(final, store, run_metadata(cfg.model, cfg.train, total),
                    optimizer)
    summary = {"checkpoint": final, "steps": total,
               "final": metrics[-1] if metrics else None}
    print(canonical_json(summary))
    return EXIT_OK


def cmd_probe(args) -> int:
    import dataclasses

    from .config import (ConfigError, build_dataclass, canonical_json,
                         model_config_from_dict, validate_corpus_against_model)
    from .probes import ProbeConfig, reports_to_csv, train_probe, window_ablation
    from .trainer import (check_shapes, init_params, load_checkpoint,
                          params_from_checkpoint)

    try:
        ckpt = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise _DataError(f"checkpoint not found: {args.checkpoint}") from exc
    store = params_from_checkpoint(ckpt)
    if "model" not in ckpt.metadata:
        raise _DataError("checkpoint metadata lacks the model configuration")
    mc = model_config_from_dict(ckpt.metadata["model"])
    check_shapes(ckpt, init_params(mc, 0))

    spec, corpus = _load_corpus_checked(args.corpus)
    validate_corpus_against_model(spec, mc)

    if args.probe_config:
        doc = _load_json(args.probe_config)
        entries = doc["probes"] if isinstance(doc, dict) and "probes" in doc else [doc]
        probe_cfgs = [build_dataclass(ProbeConfig, e, f"probe[{i}]")
                      for i, e in enumerate(entries)]
    else:
        probe_cfgs = [ProbeConfig()]
    overrides = {}
    if args.task:
        overrides["task"] = args.task
    if args.mode:
        overrides["mode"] = args.mode
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        try:
            probe_cfgs = [dataclasses.replace(c, **overrides) for c in probe_cfgs]
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    n_train = int(round(len(corpus) * args.train_fraction))
    if not 0 < n_train < len(corpus):
        raise ConfigError(
            f"train fraction {args.train_fraction} leaves no train or test data"
        )
    train_corpus, test_corpus = corpus[:n_train], corpus[n_train:]
    out_dir = os.path.dirname(os.path.abspath(args.checkpoint))

    if args.windows:
        windows = [int(w) for w in args.windows.split(",")]
        reports = window_ablation(train_corpus, test_corpus, store, mc, windows,
                                  probe_cfgs[0], spec.num_latent_classes)
        csv_path = os.path.join(out_dir, "window_ablation.csv")
        reports_to_csv(reports, csv_path)
        with open(csv_path, "r", encoding="utf-8") as fh:
            sys.stdout.write(fh.read())
        return EXIT_OK

    results = []
    for pc in probe_cfgs:
        _progress(f"probe task={pc.task} mode={pc.mode} seed={pc.seed}")
        probe_store = store if pc.mode == "frozen" else store.clone()
        _, report = train_probe(train_corpus, test_corpus, probe_store, mc, pc,
                                spec.num_latent_classes)
        results.append(json.loads(report.to_json()))
    payload = canonical_json(results[0] if len(results) == 1 else results)
    report_path = os.path.join(out_dir, "probe_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(payload + "\n")
    print(payload)
    return EXIT_OK


def _parse_grid(grid: str) -> list:
    from .config import ConfigError

    axes = {}
    for part in grid.split(";"):
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"grid axis {part!r} must look like name=v1,v2")
        name, values = part.split("=", 1)
        name = name.strip()
        if name not in ("layers", "heads"):
            raise ConfigError(f"unsupported grid axis {name!r} (use layers, heads)")
        try:
            axes[name] = [int(v) for v in values.split(",") if v]
        except ValueError as exc:
            raise ConfigError(f"grid axis {name!r} has non-integer values") from exc
    if not axes:
        raise ConfigError("empty ablation grid")
    layers = axes.get("layers", [None])
    heads = axes.get("heads", [None])
    return [(l, a) for l in layers for a in heads]


def cmd_ablate(args) -> int:
    import csv as csv_mod
    import dataclasses
    import io

    from .config import (canonical_json, load_run_config, run_config_to_dict,
                         RunConfig, validate_corpus_against_model)
    from .probes import train_probe
    from .trainer import pretrain

    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train,
                                                                 seed=args.seed))
    cells = _parse_grid(args.grid)
    spec, corpus = _load_corpus_checked(args.corpus)

    out_dir = _resolve_out(args.out)
    _echo_config(out_dir, {"grid": args.grid, "run": run_config_to_dict(cfg)})

    probe_cfg = cfg.probe[0]
    n_train = int(round(len(corpus) * args.train_fraction))
    train_corpus, test_corpus = corpus[:n_train], corpus[n_train:]

    buf = io.StringIO()
    writer = csv_mod.writer(buf)
    writer.writerow(["layers", "heads", "accuracy", "seed"])
    for layers, heads in cells:
        visual = cfg.model.visual
        updates = {}
        if layers is not None:
            updates["layers"] = layers
        if heads is not None:
            updates["heads"] = heads
        try:
            visual = dataclasses.replace(visual, **updates)
            mc = dataclasses.replace(cfg.model, visual=visual)
            validate_corpus_against_model(spec, mc)
            _progress(f"ablate cell layers={visual.layers} heads={visual.heads}")
            store, _, _ = pretrain(corpus, mc, cfg.train)
            _, report = train_probe(train_corpus, test_corpus, store, mc,
                                    probe_cfg, spec.num_latent_classes)
            writer.writerow([visual.layers, visual.heads,
                             f"{report.accuracy:.6f}", probe_cfg.seed])
        except (ValueError, RuntimeError) as exc:
            _progress(f"cell layers={layers} heads={heads} failed: {exc}")
            writer.writerow([layers, heads, "error", probe_cfg.seed])
    csv_text = buf.getvalue()
    with open(os.path.join(out_dir, "ablation.csv"), "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    sys.stdout.write(csv_text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbt",
        description="masked contrastive pretraining over synthetic paired streams",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS thread count (1 keeps runs bit-reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus file")
    p.add_argument("--spec", help="JSON file of corpus spec overrides")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run the self-supervised recipe")
    p.add_argument("--config", help="run-config JSON file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default="run")
    p.add_argument("--seed", type=int)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="evaluate a checkpoint with linear probes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--probe-config")
    p.add_argument("--task", choices=("seq-class", "anticipation", "dense-label"))
    p.add_argument("--mode", choices=("frozen", "fine-tuned"))
    p.add_argument("--windows", help="comma-separated observation windows")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-fraction", type=float, default=0.6)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="pretrain+probe over a layers/heads grid")
    p.add_argument("--grid", required=True,
                   help='e.g. "layers=1,2,4;heads=1,2,4,8"')
    p.add_argument("--config", help="run-config JSON file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default="ablation")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-fraction", type=float, default=0.6)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for var in _THREAD_ENV_VARS:
        os.environ.setdefault(var, str(args.threads))

    from .config import ConfigError
    from .trainer import CheckpointError, TrainingError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (_DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
