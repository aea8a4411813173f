"""Command line entry point: ``unvp {train,eval,perturb,grid,export-latents,make-digits}``.

Exit codes: 0 success, 1 some grid cells failed, 2 usage or config error,
3 runtime or numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .classifier import predict_proba
from .config import ConfigError, RunConfig, load_config
from .data import ChecksumError, Dataset, FormatVersionError, atomic_write, build_digit_corpus, resolve_dataset, save_dataset
from .generalizer import TrainingAborted, TrainState, synthesize_hard_samples, train
from .numeric import NumericError
from .rng import rng_for

log = logging.getLogger("unvp")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3

# default lambda x alpha x beta sweep
ABLATION_GRID = {"lam": [0.01, 0.1, 1.0], "alpha": [0.01, 0.1, 1.0], "beta": [0.0, 0.01, 0.1, 0.2, 0.3]}

FLAG_KEYS = {
    "mode": "mode",
    "alpha": "alpha",
    "beta": "beta",
    "K": "K",
    "gamma": "gamma",
    "lambda_": "lam",
    "lr": "lr",
    "batch": "batch",
    "epochs": "epochs",
    "seed": "seed",
    "dataset": "dataset",
    "out": "out",
}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _config_from_args(args) -> RunConfig:
    overrides = {}
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return load_config(args.config, overrides)


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=True)


def _accuracy(state: TrainState, ds: Dataset) -> float:
    if len(ds) == 0:
        return float("nan")
    probs = predict_proba(state.clf, ds.preprocessed())
    return float(np.mean(probs.argmax(axis=1) == ds.labels))


def _confusion(state: TrainState, ds: Dataset) -> list[list[int]]:
    pred = predict_proba(state.clf, ds.preprocessed()).argmax(axis=1)
    m = np.zeros((state.n_classes, state.n_classes), dtype=np.int64)
    np.add.at(m, (ds.labels, pred), 1)
    return m.tolist()


def _check_compatible(state: TrainState, ds: Dataset) -> None:
    if int(np.prod(ds.sample_shape)) != state.dim:
        raise UsageError(f"dataset sample shape {ds.sample_shape} does not match model input shape {state.input_shape}")
    if ds.n_classes > state.n_classes:
        raise UsageError(f"dataset has {ds.n_classes} classes, model has {state.n_classes}")


def _eval_domains(state: TrainState, datasets: dict) -> dict:
    out = {}
    for name in ("source", "unseen"):
        if name in datasets:
            out[f"acc_{'src' if name == 'source' else name}"] = _accuracy(state, datasets[name])
    return out


def _provenance(config: RunConfig) -> dict:
    return {"seed": config.seed, "config": config.to_dict(), "config_fingerprint": config.fingerprint()}


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def run_training(config: RunConfig, resume: str | None = None, quiet: bool = False) -> dict:
    """Train per ``config`` into ``config.out``; returns the summary dict.

    Writes ``config.txt``, ``metrics.jsonl`` (one record per epoch),
    ``checkpoint.unvpc`` after every epoch and ``summary.json`` at the end.
    """
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if resume:
        state = load_checkpoint(resume)
        if state.config.replace(epochs=config.epochs, out=config.out) != config:
            log.warning("resuming with a config that differs from the checkpoint's; the checkpoint's is used")
        state.config = state.config.replace(epochs=config.epochs, out=config.out)
        config = state.config
    datasets = resolve_dataset(config)
    train_ds = datasets["train"]
    if len(train_ds) == 0:
        raise UsageError("training dataset is empty")
    if state is None:
        state = TrainState.create(config, train_ds.sample_shape, train_ds.n_classes, train_ds.preprocessor)
    _check_compatible(state, train_ds)
    atomic_write(out / "config.txt", config.to_text().encode("utf-8"))
    metrics_path = out / "metrics.jsonl"
    ckpt_path = out / "checkpoint.unvpc"
    prov = _provenance(config)
    if not resume and metrics_path.exists():
        metrics_path.unlink()

    def evaluate(st):
        return _eval_domains(st, datasets)

    def callback(st, record):
        if record.get("phase") == "pretrain":
            if not quiet:
                log.info("pretrain %d nll %.4f", record["pretrain_epoch"], record["nll"])
        else:
            row = {
                "epoch": record["epoch"],
                "ce": record["ce"],
                "nll": record["nll"],
                "acc_src": record.get("acc_src"),
                "acc_unseen": record.get("acc_unseen"),
                "pool_size": record["pool_size"],
                "pool_growth": record["pool_growth"],
                "acc_train": record["acc_train"],
                **prov,
            }
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(_json_line(row) + "\n")
            if not quiet:
                log.info(
                    "epoch %d ce %.4f nll %s src %.4f unseen %s pool %d",
                    row["epoch"], row["ce"], "-" if row["nll"] is None else f"{row['nll']:.4f}",
                    row["acc_src"], "-" if row["acc_unseen"] is None else f"{row['acc_unseen']:.4f}", row["pool_size"],
                )
        save_checkpoint(st, ckpt_path)

    train(state, train_ds.preprocessed(), train_ds.labels, callback=callback, evaluate=evaluate)
    summary = {
        "epochs": state.epoch,
        "pool_size": len(state.pool),
        "maximization_phases": state.phases_done,
        **_eval_domains(state, datasets),
        **prov,
    }
    if state.flow is not None and state.history:
        summary["final_nll"] = state.history[-1]["nll"]
        summary["pretrain_epochs_done"] = state.pretrain_done
    save_checkpoint(state, ckpt_path)
    atomic_write(out / "summary.json", (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return summary


def cmd_train(args) -> int:
    config = _config_from_args(args)
    summary = run_training(config, resume=args.resume, quiet=args.quiet)
    print(json.dumps({k: v for k, v in summary.items() if k != "config"}, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# eval / export / perturb
# --------------------------------------------------------------------------


def _datasets_for(state: TrainState, spec: str | None) -> dict:
    config = state.config if spec is None else state.config.replace(dataset=spec)
    datasets = resolve_dataset(config)
    for ds in datasets.values():
        _check_compatible(state, ds)
    return datasets


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    datasets = _datasets_for(state, args.dataset)
    report = {"checkpoint": str(args.checkpoint), "domains": {}, **_provenance(state.config)}
    for name, ds in datasets.items():
        if len(ds) == 0:
            raise UsageError(f"dataset for domain {name!r} is empty")
        conf = _confusion(state, ds)
        acc = _accuracy(state, ds)
        report["domains"][name] = {"tag": ds.domain_tag, "count": len(ds), "accuracy": acc, "confusion": conf}
        print(f"{name:8s} {ds.domain_tag:22s} n={len(ds):6d} acc={acc:.4f}")
        for c, row in enumerate(conf):
            print(f"    class {c}: " + " ".join(f"{v:5d}" for v in row))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval.json"
    atomic_write(out, (json.dumps(report, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return EXIT_OK


def export_latents(state: TrainState, datasets: dict, path, coords: str = "auto", projection_seed: int = 0) -> Path:
    """Delimited ``u,v,label,domain`` rows of latent coordinates for plotting.

    When the latent dimension exceeds 2 (and ``coords`` is not ``first``) a
    seeded Gaussian 2-d projection is used; it is written next to the output
    as ``<name>.projection.txt``.
    """
    if state.flow is None:
        raise UsageError("checkpoint has no flow (mode=pure); nothing to export")
    path = Path(path)
    d = state.dim
    proj = None
    if d > 2 and coords != "first":
        proj = rng_for(projection_seed, "latent-projection").standard_normal((d, 2)) / np.sqrt(d)
    rows = []
    for name, ds in datasets.items():
        z = state.flow.encode(ds.preprocessed())
        uv = z @ proj if proj is not None else z[:, :2]
        for (u, v), c in zip(uv, ds.labels):
            rows.append((repr(float(u)), repr(float(v)), int(c), ds.domain_tag))
    buf = io.StringIO()
    buf.write(f"# {_json_line(_provenance(state.config))}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["u", "v", "label", "domain"])
    writer.writerows(rows)
    atomic_write(path, buf.getvalue().encode("utf-8"))
    if proj is not None:
        text = f"# seed={projection_seed} shape={d}x2\n" + "\n".join(" ".join(repr(float(v)) for v in r) for r in proj) + "\n"
        atomic_write(path.with_name(path.name + ".projection.txt"), text.encode("utf-8"))
    return path


def cmd_export_latents(args) -> int:
    state = load_checkpoint(args.checkpoint)
    datasets = _datasets_for(state, args.dataset)
    if args.domain != "all":
        datasets = {k: v for k, v in datasets.items() if k == args.domain}
    try:
        path = export_latents(state, datasets, args.out, args.coords, args.projection_seed)
    except OSError as exc:
        log.error("could not write %s: %s", args.out, exc)
        return EXIT_RUNTIME
    print(path)
    return EXIT_OK


def cmd_perturb(args) -> int:
    state = load_checkpoint(args.checkpoint)
    if state.flow is None:
        raise UsageError("checkpoint has no flow (mode=pure); hard samples need one")
    overrides = {k: v for k, v in (("alpha", args.alpha), ("beta", args.beta)) if v is not None}
    config = state.config.replace(**overrides)
    gcfg = config.generalization()
    ds = _datasets_for(state, args.dataset)["train"]
    x = ds.preprocessed()
    n = int(round(gcfg.beta * len(ds)))
    chosen = np.sort(rng_for(config.seed, "perturb").choice(len(ds), size=n, replace=False))
    result = synthesize_hard_samples(x[chosen], ds.labels[chosen], state.flow, state.priors, state.clf, gcfg, chunk=config.batch)
    raw = np.clip(ds.preprocessor.invert(result.x), ds.low, ds.high).reshape((len(result.x),) + ds.sample_shape)
    hard = Dataset(raw, result.labels, ds.domain_tag + "-hard", ds.low, ds.high, ds.levels, ds.n_classes)
    out = Path(args.out)
    save_dataset(hard, out)
    travel = np.linalg.norm(result.x - x[chosen][result.source_index], axis=1)
    info = {
        "count": len(result.x),
        "requested": n,
        "traces": result.traces,
        "source_index": chosen[result.source_index].tolist(),
        "alpha": config.alpha,
        "median_travel": float(np.median(travel)) if len(travel) else 0.0,
        **_provenance(config),
    }
    atomic_write(out.with_name(out.name + ".json"), (json.dumps(info, sort_keys=True) + "\n").encode("utf-8"))
    print(f"{len(result.x)} hard samples -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# grid
# --------------------------------------------------------------------------


def parse_grid(text: str) -> dict:
    """``"lam=0.01,0.1;alpha=0.1,1"`` -> ``{"lam": [...], "alpha": [...]}``; ``ablation`` is a preset."""
    if text.strip() == "ablation":
        return {k: list(v) for k, v in ABLATION_GRID.items()}
    grid = {}
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"grid axis {part!r} must look like key=v1,v2")
        key, values = part.split("=", 1)
        key = {"lambda": "lam"}.get(key.strip(), key.strip())
        grid[key] = [v.strip() for v in values.split(",") if v.strip()]
        if not grid[key]:
            raise ConfigError(f"grid axis {key!r} has no values")
    if not grid:
        raise ConfigError("empty grid")
    return grid


def grid_cells(base: RunConfig, grid: dict, layout: str) -> list[dict]:
    """Cells as override dicts: cartesian ``product`` or one-axis-at-a-time ``axes``."""
    keys = list(grid)
    if layout == "product":
        return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]
    return [{k: v} for k in keys for v in grid[k]]


def cmd_grid(args) -> int:
    base = _config_from_args(args)
    grid = parse_grid(args.grid)
    cells = grid_cells(base, grid, args.layout)
    out = Path(base.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = list(grid)
    header = ["cell", *keys, "mode", "status", "acc_src", "acc_unseen", "pool_size", "error"]
    rows, failed = [], 0
    for i, cell in enumerate(cells):
        row = {"cell": i, "mode": base.mode, **{k: cell.get(k, getattr(base, k, "")) for k in keys}}
        try:
            config = RunConfig.from_dict({**base.to_dict(), **cell, "out": str(out / f"cell-{i:03d}")})
            summary = run_training(config, quiet=True)
            row.update(
                status="ok",
                acc_src=summary.get("acc_src"),
                acc_unseen=summary.get("acc_unseen", ""),
                pool_size=summary["pool_size"],
                error="",
            )
        except Exception as exc:  # a failing cell must not stop the sweep
            failed += 1
            log.warning("grid cell %d %s failed: %s", i, cell, exc)
            row.update(status="failed", acc_src="", acc_unseen="", pool_size="", error=str(exc).replace("\t", " "))
        rows.append(row)
        print("\t".join(str(row[h]) for h in header), flush=True)
    lines = [f"# {_json_line(_provenance(base))}", "\t".join(header)]
    lines += ["\t".join(str(r[h]) for h in header) for r in rows]
    atomic_write(out / "grid.tsv", ("\n".join(lines) + "\n").encode("utf-8"))
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_make_digits(args) -> int:
    path = build_digit_corpus(args.out)
    print(path)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _config_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", metavar="PATH", help="key = value config file")
    g.add_argument("--mode", choices=["pure", "unvp", "eunvp"])
    g.add_argument("--alpha", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--K", "-K", type=int)
    g.add_argument("--gamma", type=float)
    g.add_argument("--lambda", dest="lambda_", type=float)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--dataset", metavar="{blobs,digits,file:PATH}")
    g.add_argument("--out", metavar="DIR")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="any other config key (repeatable)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unvp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    flags = _config_flags()

    p = sub.add_parser("train", parents=[flags], help="train a model")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion counts per domain")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", metavar="{blobs,digits,file:PATH}")
    p.add_argument("--out", metavar="FILE", help="report path (default: eval.json next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb", help="synthesize hard samples from the training set")
    p.add_argument("checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--out", required=True, metavar="FILE")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("grid", parents=[flags], help="sweep parameters, one training run per cell")
    p.add_argument("--grid", required=True, help='"lam=0.01,0.1;alpha=0.1,1" or "ablation" (the lambda x alpha x beta ablation values)')
    p.add_argument("--layout", choices=["axes", "product"], default="axes", help="one axis at a time, or the cartesian product")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("export-latents", help="write 2-d latent scatter data")
    p.add_argument("checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--domain", default="all", help="train, source, unseen or all")
    p.add_argument("--coords", choices=["auto", "first"], default="auto")
    p.add_argument("--projection-seed", type=int, default=0)
    p.add_argument("--out", required=True, metavar="FILE")
    p.set_defaults(func=cmd_export_latents)

    p = sub.add_parser("make-digits", help="build the 14x14 digit corpus")
    p.add_argument("--out", default="data/digits.unvpd")
    p.set_defaults(func=cmd_make_digits)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, FileNotFoundError, ChecksumError, FormatVersionError, ValueError) as exc:
        print(f"unvp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, NumericError, OSError, RuntimeError) as exc:
        print(f"unvp: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
