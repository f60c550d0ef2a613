"""Command-line entry points.

Subcommands: gen, knn, noise, train, eval, verify, report. Exit status is 0 on
success, 1 when a verification check fails and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import magdata
from .driver import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train
from .rng import make_rng
from .verify import run_all

log = logging.getLogger("coevolve")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------- config

CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, raw: str):
    default = CONFIG_FIELDS[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from None
    return raw


def parse_config(text: str) -> dict:
    """``key = value`` lines with ``#`` comments; unknown keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_FIELDS:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def format_config(config: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(config).items())


def load_config(path: str | None, overrides: dict) -> TrainConfig:
    values = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        values.update(parse_config(text))
    values.update({k: _coerce(k, v) for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ------------------------------------------------------------------- report

@dataclass
class RunReport:
    config: dict
    dataset: dict
    epochs: list[dict]
    test: dict
    best_epoch: int
    best_metric: float | None
    timings: dict = field(default_factory=dict)
    theorems: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


EPOCH_COLUMNS = ["epoch", "rounds", "loss_mod", "loss_task", "loss_total", "val_metric"]
DELTA_COLUMNS = ["epoch", "round", "delta"]
ROBUST_COLUMNS = ["source", "mode", "lam", "seed", "noise_mode", "noise_ratio", "metric", "value"]


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def report_tables(reports: list[tuple[str, dict]]) -> dict[str, str]:
    """CSV tables keyed by file name.

    ``epochs.csv`` and ``deltas.csv`` describe the first report; ``robustness.csv``
    lists the final test metrics of every report with its noise settings.
    """
    tables = {}
    name, first = reports[0]
    epoch_rows, delta_rows = [], []
    for e in first["epochs"]:
        epoch_rows.append({"epoch": e["epoch"], "rounds": e["rounds"],
                           "loss_mod": e["loss_mod"][-1], "loss_task": e["loss_task"][-1],
                           "loss_total": e["loss_total"][-1], "val_metric": e["val_metric"]})
        for r, d in enumerate(e["deltas"], start=2):
            delta_rows.append({"epoch": e["epoch"], "round": r, "delta": d})
    tables["epochs.csv"] = _csv(epoch_rows, EPOCH_COLUMNS)
    tables["deltas.csv"] = _csv(delta_rows, DELTA_COLUMNS)
    robust = []
    for src, rep in reports:
        noise = rep.get("dataset", {}).get("provenance", {}).get("noise", {})
        cfg = rep["config"]
        for metric, value in sorted(rep["test"].get("values", {}).items()):
            robust.append({"source": src, "mode": cfg.get("mode"), "lam": cfg.get("lam"),
                           "seed": cfg.get("seed"), "noise_mode": noise.get("mode", "none"),
                           "noise_ratio": float(noise.get("ratio", 0.0)),
                           "metric": metric, "value": value})
    robust.sort(key=lambda r: (r["mode"], r["noise_mode"], r["noise_ratio"], r["seed"],
                               r["metric"], r["source"]))
    tables["robustness.csv"] = _csv(robust, ROBUST_COLUMNS)
    return tables


def write_tables(tables: dict[str, str], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for fname, text in tables.items():
        (out / fname).write_text(text)


# --------------------------------------------------------------- commands

def _prepare_splits(graph, config: TrainConfig):
    if config.task == "link_prediction" and graph.split_level != "edges":
        return magdata.edge_splits(graph, seed=config.seed)
    if config.task in ("node_classification", "modality_retrieval") and not graph.splits:
        graph.splits = magdata.node_splits(graph.n_nodes, (0.6, 0.2, 0.2),
                                           make_rng(config.seed, "splits"), graph.labels)
        graph.split_level = "nodes"
    return graph


def cmd_gen(args) -> int:
    n_mod = args.modalities
    spec = magdata.SbmMagSpec(
        blocks=args.blocks, nodes_per_block=args.nodes_per_block, p_in=args.p_in,
        p_out=args.p_out, dims=(args.dim,) * n_mod, separation=(args.separation,) * n_mod,
        noise=(args.noise,) * n_mod, flip_rate=args.flip_rate, seed=args.seed)
    graph = magdata.generate_sbm_mag(spec)
    magdata.save_dataset(graph, args.out)
    print(json.dumps({"n_nodes": graph.n_nodes, "n_edges": graph.n_edges, "out": str(args.out)}))
    return 0


def cmd_knn(args) -> int:
    graph = magdata.load_dataset(args.data)
    edges = magdata.build_knn_graph(graph.feature_list(), args.k)
    out = magdata.with_edges(graph, edges, {"knn": {"k": args.k}})
    magdata.save_dataset(out, args.out)
    print(json.dumps({"n_edges": out.n_edges, "out": str(args.out)}))
    return 0


def cmd_noise(args) -> int:
    graph = magdata.load_dataset(args.data)
    out = magdata.inject_noise(graph, magdata.NoiseSpec(args.mode, args.ratio, args.seed))
    magdata.save_dataset(out, args.out)
    print(json.dumps({"n_edges_before": graph.n_edges, "n_edges": out.n_edges,
                      "out": str(args.out)}))
    return 0


def cmd_train(args, overrides) -> int:
    config = load_config(args.config, overrides)
    graph = _prepare_splits(magdata.load_dataset(args.data), config)
    out = Path(args.out)
    t0 = time.perf_counter()
    result = train(graph, config, eval_every=args.eval_every)
    t1 = time.perf_counter()
    test = evaluate(result.model, graph, result.anchor_seed)
    t2 = time.perf_counter()
    save_checkpoint(out / "checkpoint", result)
    notes = []
    if config.task == "node_clustering":
        notes.append("clustering trains on the alignment loss only, then runs k-means")
    theorems = [r.to_dict() for r in run_all(config.seed)] if args.verify else []
    report = RunReport(config=dataclasses.asdict(config),
                       dataset={"path": str(args.data), "n_nodes": graph.n_nodes,
                                "n_edges": graph.n_edges, "provenance": graph.provenance},
                       epochs=result.trace.to_dict(), test=test.to_dict(),
                       best_epoch=result.best_epoch, best_metric=result.best_metric,
                       timings={"train_s": t1 - t0, "eval_s": t2 - t1}, theorems=theorems,
                       notes=notes)
    (out / "report.json").write_text(report.to_json())
    write_tables(report_tables([("report.json", json.loads(report.to_json()))]), out)
    print(json.dumps(test.to_dict()))
    return 0


def cmd_eval(args) -> int:
    graph = magdata.load_dataset(args.data)
    manifest = json.loads((Path(args.checkpoint) / "manifest.json").read_text())
    graph = _prepare_splits(graph, TrainConfig(**manifest["config"]))
    model, manifest = load_checkpoint(args.checkpoint, graph)
    metrics = evaluate(model, graph, manifest["anchor_seed"], split=args.split)
    text = json.dumps(metrics.to_dict(), sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_verify(args) -> int:
    reports = run_all(args.seed)
    doc = json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(doc)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.theorem}: measured={r.measured:.6g} bound={r.bound:.6g} "
              f"margin={r.margin:.3g}")
    return 0 if all(r.passed for r in reports) else 1


def cmd_report(args) -> int:
    reports = []
    for p in args.reports:
        try:
            reports.append((Path(p).name if len(args.reports) == 1 else str(p),
                            json.loads(Path(p).read_text())))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read report {p}: {exc}") from None
    write_tables(report_tables(reports), Path(args.out))
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coevolve", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic SBM multimodal dataset")
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--nodes-per-block", type=int, default=100)
    p.add_argument("--p-in", type=float, default=0.05)
    p.add_argument("--p-out", type=float, default=0.01)
    p.add_argument("--modalities", type=int, default=2)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--separation", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--flip-rate", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("knn", help="replace a dataset's edges by a cosine kNN graph")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("noise", help="add or remove random edges")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["add", "remove"], default="add")
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train from a config file; writes checkpoint and report")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="run", help="output directory (default: ./run)")
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--verify", action="store_true", help="attach theorem reports")
    for name in CONFIG_FIELDS:
        flags = {f"--{name}", f"--{name.replace('_', '-')}"}
        p.add_argument(*sorted(flags), dest=f"cfg_{name}", default=None, metavar="VALUE")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out")

    p = sub.add_parser("verify", help="run the numerical theorem checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("report", help="turn run reports into CSV plot tables")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
            return cmd_train(args, overrides)
        return {"gen": cmd_gen, "knn": cmd_knn, "noise": cmd_noise, "eval": cmd_eval,
                "verify": cmd_verify, "report": cmd_report}[args.command](args)
    except (UsageError, magdata.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
