"""Command-line entry point: ``mmc-lab <subcommand> ...``.

Every successful run writes ``manifest.json`` next to its outputs: input
hashes, the resolved configuration, package versions and output hashes. No
timestamps are recorded, so identical runs leave identical manifests.

Failures print one JSON line on stderr, ``{"error": ..., "kind": ...,
"exit_code": ...}``, and exit with the code for that kind (see ``EXIT``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pyarrow
import scipy

from mmc_lab import __version__
from mmc_lab.events import EventDesignError, build_event_design, hypothesis_report, load_event, parse_quarter
from mmc_lab.hdfe import EstimationError, fit_hdfe, read_spec
from mmc_lab.ingest import IngestError, SchemaError, ingest_files, load_carriers, load_cpi, read_cells, write_frame
from mmc_lab.markets import summarize_markets
from mmc_lab.mmc import FIXTURE_QUARTER, compute_all, compute_quarter
from mmc_lab.panel import (CV_COLUMNS, DIFF_COLUMNS, MIN_QUARTERS, build_pair_diff_panel, build_rigidity_panel,
                           correlation_report, regression_frame, scatter_sample)
from mmc_lab.synth import generate_panel, generate_pair_panel, read_config, write_truth

log = logging.getLogger("mmc_lab")

EXIT = {
    "internal": 1,
    "usage": 2,
    "missing_file": 3,
    "schema": 4,
    "input": 5,
    "estimation": 6,
    "event_design": 7,
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# --- helpers ---------------------------------------------------------------

def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        raw = os.environ.get("MMC_LAB_THREADS", "1")
        try:
            n = int(raw)
        except ValueError:
            raise CliError("usage", f"MMC_LAB_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise CliError("usage", "thread count must be >= 1")
    return n


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_file", f"no such file: {path}")
    return p


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_panel(path: str, required: list[str]) -> pd.DataFrame:
    try:
        df = pd.read_csv(_existing(path), keep_default_na=False, na_values=[""])
    except pd.errors.EmptyDataError:
        raise CliError("estimation", "empty panel") from None
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise CliError("schema", f"{path}: missing columns {missing}")
    if df.empty:
        raise CliError("estimation", "empty panel")
    return df


def _cells(path: str) -> pd.DataFrame:
    try:
        return read_cells(_existing(path))
    except SchemaError as exc:
        raise CliError("schema", str(exc)) from None
    except (KeyError, ValueError) as exc:
        raise CliError("schema", f"{path}: {exc}") from None


def _write_manifest(where: Path, command: str, inputs: list[Path], config: dict, outputs: list[Path]) -> None:
    manifest = {
        "command": command,
        "config": config,
        # relative to the manifest so relocated run trees compare byte for byte
        "inputs": [{"path": os.path.relpath(p.resolve(), where.parent.resolve()), "sha256": _sha256(p)}
                   for p in inputs],
        "outputs": [{"path": p.name, "sha256": _sha256(p)} for p in sorted(outputs)],
        "versions": {
            "mmc_lab": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "pandas": pd.__version__, "scipy": scipy.__version__, "pyarrow": pyarrow.__version__,
        },
    }
    where.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _outdir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _file_out(path: str) -> tuple[Path, Path]:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out, out.with_name(out.name + ".manifest.json")


# --- subcommands -----------------------------------------------------------

def cmd_ingest(args) -> None:
    tickets = [_existing(p) for p in args.tickets]
    cpi_path = _existing(args.cpi)
    carrier_inputs = [] if args.carriers == "default" else [_existing(args.carriers)]
    cpi = load_cpi(cpi_path)
    carriers = load_carriers(args.carriers)
    cells, summary = ingest_files(tickets, cpi, carriers, filter_nominal=args.filter_nominal,
                                  gzip=args.gzip, threads=_threads(args))
    out, manifest = _file_out(args.out)
    write_frame(cells, out)
    summary_path = out.with_name(out.stem + "_summary.csv")
    write_frame(summary.to_frame(), summary_path)
    _write_manifest(manifest, "ingest", tickets + [cpi_path] + carrier_inputs,
                    {"carriers": list(carriers), "filter_nominal": args.filter_nominal, "gzip": args.gzip},
                    [out, summary_path])


def cmd_markets(args) -> None:
    src = _existing(args.cells)
    series = summarize_markets(_cells(args.cells))
    out, manifest = _file_out(args.out)
    write_frame(series, out)
    _write_manifest(manifest, "markets summarize", [src], {}, [out])


def cmd_mmc(args) -> None:
    src = _existing(args.cells)
    cells = _cells(args.cells)
    weight = {"pax": "passengers", "revenue": "revenue"}[args.weight]
    out = _outdir(args.out)
    written = []
    for (y, q), m in sorted(compute_all(cells, weight=weight).items()):
        mat = {"ek": m.ek, "cw": m.cw, "cw-wgt": m.cw_weighted}[args.measure]
        path = out / f"mmc_{args.measure}_{y}Q{q}.csv"
        mat.rename_axis("carrier").to_csv(path, lineterminator="\n")
        written.append(path)
    _write_manifest(out / "manifest.json", "mmc", [src], {"measure": args.measure, "weight": args.weight}, written)


def cmd_panel(args) -> None:
    src = _existing(args.cells)
    cells = _cells(args.cells)
    matrices = compute_all(cells)
    pinned_q = parse_quarter(args.pinned) if args.pinned else FIXTURE_QUARTER
    if pinned_q not in matrices and matrices:
        fallback = max(matrices)
        log.warning("pinned quarter %dQ%d not in cells; using %dQ%d", *pinned_q, *fallback)
        pinned_q = fallback
    pinned = matrices.get(pinned_q) or compute_quarter(cells, pinned_q)
    out = _outdir(args.out)
    diff = build_pair_diff_panel(cells, matrices)
    cv = build_rigidity_panel(cells, pinned, min_quarters=args.min_quarters)
    paths = [out / "panel_diff.csv", out / "panel_cv.csv"]
    write_frame(diff[DIFF_COLUMNS], paths[0])
    write_frame(cv[CV_COLUMNS], paths[1])
    _write_manifest(out / "manifest.json", "panel", [src],
                    {"pinned": f"{pinned_q[0]}Q{pinned_q[1]}", "min_quarters": args.min_quarters}, paths)


def cmd_corr(args) -> None:
    src = _existing(args.panel)
    panel = _read_panel(args.panel, DIFF_COLUMNS)
    out = _outdir(args.out)
    corr = correlation_report(panel)
    paths = [out / "corr.csv"]
    corr.rename_axis("variable").to_csv(paths[0], lineterminator="\n")
    sample = scatter_sample(panel, n=args.sample, seed=args.seed)
    names = list(corr.columns)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            path = out / f"scatter_{a}__{b}.csv"
            write_frame(sample[[a, b]], path)
            paths.append(path)
    _write_manifest(out / "manifest.json", "corr", [src], {"sample": args.sample, "seed": args.seed}, paths)


def cmd_fit(args) -> None:
    src, spec_path = _existing(args.panel), _existing(args.spec)
    try:
        spec, extras = read_spec(spec_path)
    except ValueError as exc:
        raise CliError("schema", f"{args.spec}: {exc}") from None
    panel = _read_panel(args.panel, [])
    mmc = str(extras.get("mmc", "ek"))
    frame = regression_frame(panel, mmc) if {"carrier_lo", "carrier_hi"} <= set(panel.columns) else panel
    missing = [c for c in spec.columns if c not in frame.columns and c not in ("city_pair", "carrier_pair")]
    if missing:
        raise CliError("schema", f"panel lacks spec columns {missing}")
    fit = fit_hdfe(frame, spec, threads=_threads(args))
    out, manifest = _file_out(args.out)
    write_frame(fit.to_frame(), out)
    _write_manifest(manifest, "fit", [src, spec_path],
                    {"response": spec.response, "covariates": spec.covariates, "fe": spec.fe_dims,
                     "se": spec.se_kind, "tol": spec.tol, "max_iter": spec.max_iter, "mmc": mmc}, [out])


def cmd_event(args) -> None:
    src = _existing(args.panel)
    inputs = [src]
    if args.event not in ("ua-co", "aa-us"):
        inputs.append(_existing(args.event))
    try:
        event = load_event(args.event)
    except ValueError as exc:
        raise CliError("schema", str(exc)) from None
    panel = _read_panel(args.panel, DIFF_COLUMNS)
    frame, spec = build_event_design(panel, event, args.mmc, se_kind=args.se)
    fit = fit_hdfe(frame, spec, threads=_threads(args))
    out = _outdir(args.out)
    paths = [out / "fit.csv", out / "hypotheses.csv"]
    write_frame(fit.to_frame(), paths[0])
    write_frame(hypothesis_report(fit, args.level), paths[1])
    _write_manifest(out / "manifest.json", "event-study", inputs,
                    {"event": event.name, "mmc": args.mmc, "se": args.se, "level": args.level}, paths)


def cmd_synth(args) -> None:
    cfg_path = _existing(args.config)
    try:
        cfg = read_config(cfg_path)
    except ValueError as exc:
        raise CliError("schema", f"{args.config}: {exc}") from None
    out = _outdir(args.out)
    if args.kind == "cells":
        data, truth = generate_panel(cfg)
        path = out / "cells.csv"
    else:
        data, truth = generate_pair_panel(cfg)
        path = out / "panel_diff.csv"
    truth_path = out / "truth.csv"
    write_frame(data, path)
    write_truth(truth, truth_path)
    _write_manifest(out / "manifest.json", "synth", [cfg_path], {"kind": args.kind, **{
        k: (v if isinstance(v, (int, float, str, dict)) else str(v)) for k, v in truth.items()}},
        [path, truth_path])


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="worker cap (default: $MMC_LAB_THREADS or 1)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="mmc-lab", description="Airline multimarket-contact panels and fixed-effects regressions.")
    p.add_argument("--version", action="version", version=f"mmc-lab {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="ticket CSVs -> market cells")
    s.add_argument("--tickets", nargs="+", required=True)
    s.add_argument("--cpi", required=True)
    s.add_argument("--carriers", default="default")
    s.add_argument("--out", required=True)
    s.add_argument("--gzip", action="store_true", help="inputs are gzip-compressed")
    s.add_argument("--filter-nominal", action="store_true", help="apply fare bounds before deflation")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("markets", help="market counts")
    msub = s.add_subparsers(dest="action", required=True, parser_class=_Parser)
    m = msub.add_parser("summarize", parents=[common])
    m.add_argument("--cells", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_markets)

    s = sub.add_parser("mmc", parents=[common], help="per-quarter contact matrices")
    s.add_argument("--cells", required=True)
    s.add_argument("--measure", choices=["ek", "cw", "cw-wgt"], default="ek")
    s.add_argument("--weight", choices=["pax", "revenue"], default="pax")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mmc)

    s = sub.add_parser("panel", parents=[common], help="pair and rigidity panels")
    s.add_argument("--cells", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pinned", default=None, help="YYYYQn for rigidity contact measures (default 2023Q2)")
    s.add_argument("--min-quarters", type=int, default=MIN_QUARTERS)
    s.set_defaults(func=cmd_panel)

    s = sub.add_parser("corr", parents=[common], help="regressor correlations and scatter samples")
    s.add_argument("--panel", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--sample", type=int, default=5000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_corr)

    s = sub.add_parser("fit", parents=[common], help="fixed-effects regression")
    s.add_argument("--panel", required=True)
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("event-study", parents=[common], help="merger difference-in-differences")
    s.add_argument("--panel", required=True)
    s.add_argument("--event", required=True)
    s.add_argument("--mmc", choices=["ek", "cw", "cw-wgt"], default="ek")
    s.add_argument("--se", choices=["robust", "classical"], default="robust")
    s.add_argument("--level", type=float, default=0.95)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_event)

    s = sub.add_parser("synth", parents=[common], help="seeded synthetic data")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=["cells", "pairs"], default="cells")
    s.set_defaults(func=cmd_synth)
    return p


def _fail(kind: str, message: str) -> int:
    code = EXIT[kind]
    print(json.dumps({"error": message, "kind": kind, "exit_code": code}), file=sys.stderr)
    return code


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        return _fail(exc.kind, str(exc))
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        return _fail(exc.kind, str(exc))
    except SchemaError as exc:
        return _fail("schema", str(exc))
    except IngestError as exc:
        return _fail("input", str(exc))
    except EventDesignError as exc:
        return _fail("event_design", str(exc))
    except EstimationError as exc:
        return _fail("estimation", str(exc))
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc))
    except ValueError as exc:
        return _fail("input", str(exc))
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        return _fail("internal", f"{type(exc).__name__}: {exc}")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
