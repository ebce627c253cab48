"""``fedcmh`` command line: generate, partition, train, eval, compare."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .config import SPLITS, ExperimentConfig, config_from_dict, load_config
from .datamodel import save_features, save_partition
from .errors import ConfigError, DataError, FedCMHError
from .evaluation import MapRow, rows_from_csv, rows_to_csv, rows_to_json
from .experiment import (
    cell_data,
    cell_dir,
    evaluate_models,
    load_dataset,
    make_partition,
    run_experiment,
)
from .fedprotocol import METHODS
from .modalitynets import load_net

log = logging.getLogger("fedcmh")


def _base_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    data = cfg.to_dict()
    if cfg.files is None:
        data.pop("files", None)
    if getattr(args, "method", None):
        data["methods"] = args.method
    if getattr(args, "split", None):
        data["splits"] = args.split
    if getattr(args, "bits", None):
        data["bits"] = args.bits
    if getattr(args, "rounds", None) is not None:
        data["rounds"] = args.rounds
    if getattr(args, "seed", None):
        data["seeds"] = args.seed
    if getattr(args, "threads", None) is not None:
        data["threads"] = args.threads
    return config_from_dict(data)


def cmd_generate(args) -> int:
    cfg = _base_config(args)
    if cfg.synthetic is None:
        raise ConfigError("generate needs a [synthetic] section")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0]
    ds = load_dataset(cfg, seed)
    save_features(ds, out / "images.fmat", out / "texts.fmat", out / "labels.flbl")
    manifest = {
        "seed": seed,
        "synthetic": cfg.to_dict()["synthetic"],
        "sample_count": ds.sample_count,
        "class_count": ds.class_count,
        "image_dim": ds.image_dim,
        "text_dim": ds.text_dim,
        "class_counts": ds.class_counts().tolist(),
        "files": {"images": "images.fmat", "texts": "texts.fmat", "labels": "labels.flbl"},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {ds.sample_count} samples to {out}")
    return 0


def cmd_partition(args) -> int:
    cfg = _base_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0]
    ds = load_dataset(cfg, seed)
    for split in cfg.splits:
        shards = make_partition(ds, cfg, split, seed)
        path = out / f"partition_{split}.json"
        save_partition(path, shards, seed, split)
        print(f"{split}: sizes {[s.size for s in shards]} -> {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _base_config(args)
    rows = run_experiment(cfg, args.out)
    for row in rows:
        print(f"{row.method:12s} {row.split:15s} {row.direction} {row.bits:3d}bit seed={row.seed} MAP={row.map:.4f}")
    return 0


def cmd_eval(args) -> int:
    """Recompute MAP from the final checkpoints of a run directory."""
    run = Path(args.run)
    manifest = json.loads((run / "manifest.json").read_text())
    cfg = config_from_dict(manifest["config"])
    rows = []
    for cell in manifest["cells"]:
        method, split, bits, seed = cell["method"], cell["split"], cell["bits"], cell["seed"]
        ds = load_dataset(cfg, seed)
        data = cell_data(ds, cfg, method, split, seed)
        rdir = cell_dir(run, method, split, bits, seed) / f"round_{cfg.rounds}"
        models = {}
        for cdir in sorted(rdir.glob("client_*")):
            cid = int(cdir.name.split("_")[1])
            models[cid] = (load_net(cdir / "image.net"), load_net(cdir / "text.net"))
        maps = evaluate_models(models, data)
        rows.extend(MapRow(method, split, d, bits, seed, maps[d]) for d in sorted(maps))
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text(rows_to_csv(rows))
    (out / "eval.json").write_text(rows_to_json(rows))
    for row in rows:
        print(f"{row.method:12s} {row.split:15s} {row.direction} {row.bits:3d}bit seed={row.seed} MAP={row.map:.4f}")
    return 0


def compare_runs(run_dirs: list[Path]) -> list[dict]:
    """Seed-aggregated MAP per (method, split, bits, direction), with deltas against the first run."""
    hashes = []
    per_run = []
    for rd in run_dirs:
        manifest = json.loads((rd / "manifest.json").read_text())
        hashes.append(manifest["input_hash"])
        per_run.append(rows_from_csv((rd / "report.csv").read_text()))
    if len(set(hashes)) != 1:
        raise DataError("runs were trained on different inputs; refusing to compare")

    stats = []
    for rows in per_run:
        grouped = defaultdict(list)
        for r in rows:
            grouped[(r.method, r.split, r.bits, r.direction)].append(r.map)
        stats.append({k: (float(np.mean(v)), float(np.min(v)), float(np.max(v)), len(v)) for k, v in grouped.items()})

    keys = sorted(set().union(*[s.keys() for s in stats]))
    table = []
    for key in keys:
        entry = {"method": key[0], "split": key[1], "bits": key[2], "direction": key[3], "runs": []}
        base = stats[0].get(key)
        for rd, s in zip(run_dirs, stats):
            if key not in s:
                entry["runs"].append({"run": str(rd), "mean": None, "min": None, "max": None, "n": 0, "delta": None})
                continue
            mean, lo, hi, n = s[key]
            delta = None if base is None else mean - base[0]
            entry["runs"].append({"run": str(rd), "mean": mean, "min": lo, "max": hi, "n": n, "delta": delta})
        table.append(entry)
    return table


def format_table(table: list[dict]) -> str:
    lines = [f"{'method':12s} {'split':15s} {'bits':>4s} {'dir':4s}  run  mean    min     max     delta"]
    for e in table:
        for i, r in enumerate(e["runs"]):
            if r["mean"] is None:
                lines.append(f"{e['method']:12s} {e['split']:15s} {e['bits']:4d} {e['direction']:4s}  {i:3d}  -")
                continue
            delta = "-" if r["delta"] is None else f"{r['delta']:+.4f}"
            lines.append(
                f"{e['method']:12s} {e['split']:15s} {e['bits']:4d} {e['direction']:4s}  {i:3d}  "
                f"{r['mean']:.4f}  {r['min']:.4f}  {r['max']:.4f}  {delta}"
            )
    return "\n".join(lines)


def cmd_compare(args) -> int:
    runs = [Path(r) for r in args.runs]
    if len(runs) < 2:
        raise ConfigError("compare needs at least two run directories")
    table = compare_runs(runs)
    text = format_table(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(json.dumps(table, indent=2))
        flat = ["method,split,bits,direction,run,mean,min,max,n,delta"]
        for e in table:
            for r in e["runs"]:
                flat.append(
                    ",".join(
                        str(x)
                        for x in (e["method"], e["split"], e["bits"], e["direction"], r["run"], r["mean"], r["min"], r["max"], r["n"], r["delta"])
                    )
                )
        (out / "comparison.csv").write_text("\n".join(flat) + "\n")
        (out / "comparison.txt").write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcmh", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, grid: bool):
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--seed", type=int, action="append", help="seed (repeatable)")
        p.add_argument("--out", required=True, help="output directory")
        if grid:
            p.add_argument("--method", action="append", choices=METHODS)
            p.add_argument("--split", action="append", choices=SPLITS)
            p.add_argument("--bits", type=int, action="append")
            p.add_argument("--rounds", type=int)
            p.add_argument("--threads", type=int)

    p = sub.add_parser("generate", help="write a synthetic dataset as FMAT/FLBL files")
    common(p, grid=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("partition", help="export client partitions as JSON")
    common(p, grid=False)
    p.add_argument("--split", action="append", choices=SPLITS)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="train the configured method grid and report MAP")
    common(p, grid=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recompute MAP from a run's final checkpoints")
    p.add_argument("run", help="run directory written by train")
    p.add_argument("--out", help="where to write eval.csv/eval.json (default: the run directory)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="merge and tabulate reports of several runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FedCMHError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
