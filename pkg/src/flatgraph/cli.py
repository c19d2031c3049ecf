"""``flatgraph`` command line: split, train, landscape, report."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema

from .datasets import Split, generate_split, load_dataset, normalize_kind, resolve_split, save_split
from .flatmin import MethodConfig
from .graph import Graph, IngestionError
from .landscape import SurfaceSpec, loss_surface, write_surface_csv
from .models import ConfigError, ModelConfig, ParamSet, load_checkpoint, param_layout, save_checkpoint
from .tensor import ShapeError
from .trainer import RunConfig, loss_functions, multi_seed, read_results, summarize, write_results

log = logging.getLogger("flatgraph")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATA_ENV = "FLATGRAPH_DATA"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- configuration ------------------------------------------------------------------


def load_schema() -> dict:
    return json.loads((resources.files("flatgraph") / "schema" / "experiment.schema.json").read_text())


def packaged_config(name: str) -> Path | None:
    """Shipped config by file name (``gcn_cora_planetoid.json`` or ``inductive/...``)."""
    ref = resources.files("flatgraph") / "configs" / name
    return Path(str(ref)) if ref.is_file() else None


def read_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        bundled = packaged_config(str(path)) or packaged_config(f"{path}.json")
        if bundled is None:
            raise CliError(EXIT_USAGE, f"config not found: {path}")
        p = bundled
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_USAGE, f"{p}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    errors = sorted(jsonschema.Draft202012Validator(load_schema()).iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        where = "/" + "/".join(str(p) for p in e.absolute_path)
        raise CliError(EXIT_USAGE, f"config error at {where}: {e.message}")
    try:
        ModelConfig.from_dict(cfg["model"])
        MethodConfig.from_flat(cfg.get("method"))
    except ConfigError as exc:
        raise CliError(EXIT_USAGE, f"config error: {exc}") from None


def parse_seeds(text) -> list[int]:
    if isinstance(text, list):
        return [int(s) for s in text]
    text = str(text)
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise ValueError(f"empty seed range {text}")
        return list(range(lo, hi + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def resolve_dataset_dir(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        return p
    root = os.environ.get(DATA_ENV)
    if root and not p.is_absolute() and (Path(root) / p).is_dir():
        return Path(root) / p
    hint = "" if root else f"; set {DATA_ENV} to the directory holding the datasets"
    raise CliError(EXIT_DATA, f"dataset not found: {path}{hint}")


def run_config(cfg: dict, seed: int = 0) -> RunConfig:
    opt = cfg.get("optimizer", {})
    tr = cfg.get("training", {})
    try:
        return RunConfig(
            model=ModelConfig.from_dict(cfg["model"]),
            method=MethodConfig.from_flat(cfg.get("method")),
            lr=opt.get("lr", 0.01),
            weight_decay=opt.get("weight_decay", 0.0),
            patience=tr.get("patience", 100),
            max_epochs=tr.get("max_epochs", 20000),
            mode=cfg.get("mode", "transductive"),
            seed=seed,
            shared_masks=tr.get("shared_masks", True),
            normalize_features=tr.get("normalize_features", True),
            max_retries=tr.get("max_retries", 3),
        )
    except (ConfigError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"config error: {exc}") from None


def load_graph(directory: Path) -> Graph:
    try:
        return load_dataset(directory)
    except IngestionError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None


class SplitProvider:
    """Picklable ``seed -> Split`` for the worker pool."""

    def __init__(self, g: Graph, dataset_dir: Path, spec: dict):
        self.g, self.dataset_dir, self.spec = g, dataset_dir, spec
        self._fixed = None

    def __call__(self, seed: int) -> Split:
        if self._fixed is not None:
            return self._fixed
        split = resolve_split(self.g, self.dataset_dir, self.spec, seed)
        if "file" in self.spec or normalize_kind(self.spec["kind"]) == "planetoid" or "seed" in self.spec:
            self._fixed = split
        return split


# -- commands -----------------------------------------------------------------------


def cmd_split(args) -> int:
    g = load_graph(resolve_dataset_dir(args.dataset))
    try:
        split = generate_split(g, args.kind, args.seed)
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    save_split(split, args.out)
    print(*split.sizes())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    seeds = parse_seeds(args.seeds if args.seeds is not None else cfg.get("seeds", [0]))
    rc = run_config(cfg)
    dataset_dir = resolve_dataset_dir(cfg["dataset"])
    g = load_graph(dataset_dir)
    provider = SplitProvider(g, dataset_dir, cfg["split"])
    try:
        provider(seeds[0])
    except (IngestionError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"split: {exc}") from None
    out = Path(args.out or cfg.get("output") or f"runs/{cfg.get('name', 'experiment')}")
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    log.info("training %s on %s: %d seeds, %d jobs", rc.method.label(), dataset_dir, len(seeds), jobs)
    results = multi_seed(rc, g, provider, seeds, jobs=jobs)

    out.mkdir(parents=True, exist_ok=True)
    write_results(results, out / "results.jsonl")
    layout = param_layout(rc.model, g.num_features, g.num_classes)
    ckpt_dir = out / "checkpoints"
    for r in results:
        if r.params is not None:
            save_checkpoint(ckpt_dir / f"seed_{r.seed}.json", ParamSet(layout, r.params), rc.model,
                            extra={"seed": r.seed, "final_train_loss": r.final_train_loss,
                                   "num_features": g.num_features, "num_classes": g.num_classes})
    baseline = read_baseline(args.baseline) if args.baseline else None
    summary = summarize(results, baseline)
    summary.update(
        name=cfg.get("name", out.name),
        dataset=Path(cfg["dataset"]).name,
        split=split_label(cfg["split"]),
        mode=rc.mode,
        arch=rc.model.arch,
        method=rc.method.label(),
        metric=results[0].metric if results else "accuracy",
    )
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    if summary["mean"] is not None:
        log.info("mean %.4f sd %s over %d seeds", summary["mean"], summary["sd"], summary["n"])
    if summary["failed"]:
        for r in results:
            if r.failed:
                log.error("seed %d failed after %d attempts: %s", r.seed, len(r.retries), r.error)
        return EXIT_NUMERIC
    return EXIT_OK


def split_label(spec: dict) -> str:
    if "file" in spec:
        return Path(spec["file"]).stem
    return normalize_kind(spec["kind"])


def read_baseline(path) -> list:
    p = Path(path)
    if p.is_dir():
        p = p / "results.jsonl"
    if not p.is_file():
        raise CliError(EXIT_DATA, f"baseline results not found: {path}")
    return read_results(p)


def cmd_landscape(args) -> int:
    cfg = read_config(args.config)
    rc = run_config(cfg)
    try:
        lo, hi = (float(x) for x in args.range.split(":"))
    except ValueError:
        raise CliError(EXIT_USAGE, f"--range must look like LO:HI, got {args.range!r}") from None
    try:
        spec = SurfaceSpec(dims=args.dims, lo=lo, hi=hi, resolution=args.grid, which_loss=args.loss, seed=args.seed)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    try:
        params, manifest = load_checkpoint(args.checkpoint)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"cannot read checkpoint {args.checkpoint}: {exc}") from None
    dataset_dir = resolve_dataset_dir(cfg["dataset"])
    g = load_graph(dataset_dir)
    expected = param_layout(rc.model, g.num_features, g.num_classes)
    if manifest.get("model") != rc.model.to_dict() or params.layout != expected:
        raise CliError(EXIT_DATA, "checkpoint does not match the configured model and dataset")
    seed = int(manifest.get("seed", 0))
    try:
        split = resolve_split(g, dataset_dir, cfg["split"], seed)
    except (IngestionError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"split: {exc}") from None
    fns = loss_functions(rc.with_seed(seed), g, split, params.layout)
    axis, grids = loss_surface(params, spec, fns)
    write_surface_csv(args.out, axis, grids, spec.dims)
    log.info("wrote %d grid points to %s", grids[spec.losses[0]].size, args.out)
    return EXIT_OK


def _fmt_pct(x) -> str:
    return f"{100 * x:.2f}"


def cmd_report(args) -> int:
    root = Path(args.input)
    summaries = []
    for p in sorted(root.rglob("summary.json")):
        s = json.loads(p.read_text())
        if s.get("mean") is not None:
            summaries.append(s)
    if not summaries:
        raise CliError(EXIT_DATA, f"no summary.json files under {root}")
    modes = {s["mode"] for s in summaries}
    if len(modes) > 1:
        raise CliError(EXIT_USAGE, f"results mix modes {sorted(modes)}; report one mode per table")
    columns = sorted({(s["dataset"], s["split"]) for s in summaries})
    archs = sorted({s["arch"] for s in summaries}, key=["gcn", "gat", "graphmlp"].index)
    cells: dict = {}
    for s in summaries:
        cells[(s["arch"], s["method"], s["dataset"], s["split"])] = s
    rows = []
    for arch in archs:
        methods = sorted({m for a, m, _, _ in cells if a == arch and m != "base"})
        base_row = [{"gcn": "GCN", "gat": "GAT", "graphmlp": "Graph-MLP"}[arch]]
        for col in columns:
            b = cells.get((arch, "base", *col))
            base_row.append(f"{_fmt_pct(b['mean'])} ± {_fmt_pct(b['sd'] or 0.0)}" if b else "")
        rows.append(base_row)
        for m in methods:
            row = [f"+ {m.upper()}"]
            for col in columns:
                s = cells.get((arch, m, *col))
                if s is None:
                    row.append("")
                    continue
                b = cells.get((arch, "base", *col))
                if b is None:
                    raise CliError(EXIT_USAGE, f"no baseline for {arch} {m} on {col[0]}/{col[1]}")
                delta = 100 * (s["mean"] - b["mean"])
                row.append(f"{delta:+.2f} ± {_fmt_pct(s['sd'] or 0.0)}")
            rows.append(row)
    header = ["Model"] + [f"{d} {sp}" for d, sp in columns]
    if args.format == "csv":
        import csv

        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    else:
        print("| " + " | ".join(header) + " |")
        print("|" + "|".join("---" for _ in header) + "|")
        for row in rows:
            print("| " + " | ".join(row) + " |")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="flatgraph", description="Flat-minima training for graph neural networks.")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more log output on stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("split", help="precompute a random split")
    sp.add_argument("--dataset", required=True, help="dataset directory (or name under $FLATGRAPH_DATA)")
    sp.add_argument("--kind", required=True, choices=["ra-pl", "622", "ra_pl", "s622"])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, type=Path)
    sp.set_defaults(func=cmd_split)

    tp = sub.add_parser("train", help="train one config over several seeds")
    tp.add_argument("--config", required=True, help="config file, or the name of a shipped config")
    tp.add_argument("--seeds", help="seed range a..b or comma list; overrides the config")
    tp.add_argument("--baseline", help="results.jsonl (or its run directory) for paired differences")
    tp.add_argument("--out", type=Path, help="output directory; overrides the config")
    tp.add_argument("--jobs", type=int, help="concurrent seeds (default: number of cores)")
    tp.set_defaults(func=cmd_train)

    lp = sub.add_parser("landscape", help="export a loss surface around a checkpoint")
    lp.add_argument("--checkpoint", required=True, type=Path)
    lp.add_argument("--config", required=True)
    lp.add_argument("--grid", type=int, default=41, help="points per axis")
    lp.add_argument("--range", default="-1:1", help="axis range, written --range=LO:HI when LO is negative")
    lp.add_argument("--dims", type=int, choices=[1, 2], default=2)
    lp.add_argument("--loss", choices=["train", "test", "both"], default="both")
    lp.add_argument("--seed", type=int, default=0, help="seed for the random directions")
    lp.add_argument("--out", required=True, type=Path)
    lp.set_defaults(func=cmd_landscape)

    rp = sub.add_parser("report", help="tabulate run summaries as absolute baselines and deltas")
    rp.add_argument("--in", dest="input", required=True, type=Path)
    rp.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    rp.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except (IngestionError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except ShapeError as exc:
        log.error("shape mismatch: %s", exc)
        return EXIT_DATA
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
