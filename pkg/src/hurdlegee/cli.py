"""Command-line front end: ``simulate``, ``fit``, ``report`` and ``distribution``.

Exit codes: 0 success, 1 hard error (I/O, validation, estimation failure),
2 when every artifact was written but some fit did not converge.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
import warnings
from pathlib import Path

from . import __version__
from .correlation import CODES, SCALINGS
from .data import fri_distribution, ingest_csv
from .errors import ConvergenceWarning, EstimationWarning, HurdleGEEError, MissingArtifact
from .inference import JS_VARIANTS, ModelSpec, analyze, cluster_bootstrap, default_jobs
from .report import CoefficientTable, build_tables, render_latex, render_markdown
from .simulation import TruthSpec, generate_dataset
from .solver import FitSettings

EXIT_OK, EXIT_ERROR, EXIT_SOFT = 0, 1, 2

# config keys mirror the long flags of ``fit``
FIT_DEFAULTS = {
    "family": "A",
    "corr": "1",
    "times": "1,2,3,4",
    "input": None,
    "out": None,
    "boot": 100,
    "boot_mode": "full",
    "seed": 0,
    "scaling": "liang-zeger",
    "js": "paper",
    "max_iter": 50,
    "tol": 1e-6,
    "jobs": None,
    "latex": False,
}


class UsageError(Exception):
    pass


def write_atomic(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` via a temporary file in the same directory and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, options: dict, inputs: dict, outputs: list[str]) -> None:
    canon = json.dumps({"command": command, "options": options, "inputs": inputs}, sort_keys=True)
    manifest = {
        "command": command,
        "version": __version__,
        "config_hash": hashlib.sha256(canon.encode()).hexdigest(),
        "seed": options.get("seed"),
        "options": options,
        "inputs": inputs,
        "outputs": sorted(outputs),
    }
    write_atomic(Path(out_dir) / "manifest.json", _dump(manifest))


# --- option handling --------------------------------------------------------


def _parse_ints(text, what: str) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        items = list(text)
    elif isinstance(text, int):
        items = [text]
    else:
        items = [s for s in str(text).replace(" ", "").split(",") if s]
    try:
        return tuple(int(s) for s in items)
    except ValueError:
        raise UsageError(f"{what} must be comma-separated integers, got {text!r}") from None


def resolve_fit_options(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    opts = dict(FIT_DEFAULTS)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(cfg) - set(FIT_DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        opts.update(cfg)
    for key in FIT_DEFAULTS:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            opts[key] = val
    if opts["input"] is None or opts["out"] is None:
        raise UsageError("fit needs --input and --out (on the command line or in --config)")
    if opts["jobs"] is None:
        opts["jobs"] = default_jobs()
    opts["corr"] = ",".join(map(str, _parse_ints(opts["corr"], "--corr")))
    opts["times"] = ",".join(map(str, _parse_ints(opts["times"], "--times")))
    return opts


def spec_from_options(opts: dict) -> ModelSpec:
    if opts["scaling"] not in SCALINGS:
        raise UsageError(f"--scaling must be one of {SCALINGS}")
    if opts["js"] not in JS_VARIANTS:
        raise UsageError(f"--js must be one of {JS_VARIANTS}")
    try:
        settings = FitSettings(max_iter=int(opts["max_iter"]), tol=float(opts["tol"]), scaling=opts["scaling"])
        return ModelSpec(
            family=str(opts["family"]),
            corr=_parse_ints(opts["corr"], "--corr"),
            times=_parse_ints(opts["times"], "--times"),
            settings=settings,
            js_variant=opts["js"],
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, HurdleGEEError):
            raise
        raise UsageError(str(exc)) from None


# --- commands ---------------------------------------------------------------


def cmd_simulate(args) -> int:
    truth = TruthSpec.load(args.spec)
    d = generate_dataset(truth, args.seed)
    write_atomic(args.out, d.to_csv())
    out_dir = Path(args.out).resolve().parent
    write_manifest(out_dir, "simulate", {"seed": args.seed, "spec": truth.to_json()},
                   {"spec": _sha256_file(args.spec)}, [Path(args.out).name])
    print(f"wrote {len(d)} observations in {d.n_clusters} clusters to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    opts = resolve_fit_options(args)
    spec = spec_from_options(opts)
    d = ingest_csv(opts["input"])
    if len(d) == 0:
        raise UsageError("the input dataset has no observations")
    out = Path(opts["out"])
    boot_n = int(opts["boot"])
    soft = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        warnings.simplefilter("always", EstimationWarning)
        analysis = analyze(d, spec)
        boot = None
        if boot_n >= 2:
            se_outer = analysis.se if opts["boot_mode"] == "estimates" else None
            boot = cluster_bootstrap(d, spec, B=boot_n, seed=int(opts["seed"]), mode=opts["boot_mode"],
                                     se_outer=se_outer, jobs=int(opts["jobs"]))
    notices = []
    for w in caught:
        if issubclass(w.category, ConvergenceWarning):
            soft.append(str(w.message))
        elif issubclass(w.category, EstimationWarning):
            notices.append(str(w.message))
    if not analysis.converged:
        soft.append("at least one point fit did not converge")

    tables = build_tables(analysis, boot)
    written = []
    for t, fit in analysis.fits.items():
        record = {"name": fit.name, "time": t, "converged": fit.converged, "gamma": fit.gamma,
                  "jackknife_dropped": analysis.jackknife_dropped.get(t, 0)}
        for piece in ("presence", "severity"):
            part = getattr(fit, piece)
            if part is not None:
                record[piece] = part.to_dict()
        if fit.combined is not None:
            record["combined"] = fit.combined.to_dict()
        write_atomic(out / f"{fit.name}.fit.json", _dump(record))
        written.append(f"{fit.name}.fit.json")
    for tab in tables:
        write_atomic(out / f"{tab.stem}.csv", tab.to_csv())
        write_atomic(out / f"{tab.stem}.json", _dump(tab.meta()))
        written += [f"{tab.stem}.csv", f"{tab.stem}.json"]
    write_atomic(out / "report.md", render_markdown(tables))
    written.append("report.md")
    if opts["latex"]:
        write_atomic(out / "report.tex", render_latex(tables))
        written.append("report.tex")
    if boot is not None:
        write_atomic(out / "bootstrap.json", _dump({"B": boot.B, "seeds": boot.seeds, "failures": boot.failures,
                                                    "mode": boot.mode}))
        written.append("bootstrap.json")
    write_manifest(out, "fit", opts, {"input": _sha256_file(opts["input"])}, written)
    for msg in notices + soft:
        print(f"warning: {msg}", file=sys.stderr)
    print(f"wrote {len(tables)} tables to {out}")
    return EXIT_SOFT if soft else EXIT_OK


def load_tables(directory) -> list[CoefficientTable]:
    """Read every ``<stem>.csv`` / ``<stem>.json`` pair written by ``fit``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingArtifact(f"no artifact directory at {directory}")
    metas = []
    for p in directory.glob("*.json"):
        if p.name.endswith(".fit.json") or p.name in ("manifest.json", "bootstrap.json"):
            continue
        with open(p, encoding="utf-8") as fh:
            meta = json.load(fh)
        if not {"name", "piece", "time"} <= set(meta):
            continue
        metas.append((p, meta))
    if not metas:
        raise MissingArtifact(f"no coefficient tables in {directory}")
    tables = []
    for p, meta in metas:
        csv_path = p.with_suffix(".csv")
        if not csv_path.exists():
            raise MissingArtifact(f"missing {csv_path}")
        tables.append(CoefficientTable.from_csv(csv_path.read_text(encoding="utf-8"), meta))
    order = {"presence": 0, "severity": 1}
    tables.sort(key=lambda t: (t.name.split(".")[:-1], t.time, order.get(t.piece, 2)))
    return tables


def cmd_report(args) -> int:
    tables = load_tables(args.dir)
    text = render_latex(tables) if args.latex else render_markdown(tables)
    if args.output:
        write_atomic(args.output, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_distribution(args) -> int:
    d = ingest_csv(args.input)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", "zone", "fri", "count"])
    w.writerows(fri_distribution(d))
    if args.out:
        write_atomic(args.out, buf.getvalue())
        write_manifest(Path(args.out).resolve().parent, "distribution", {"seed": None},
                       {"input": _sha256_file(args.input)}, [Path(args.out).name])
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hurdlegee", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset from a truth JSON")
    s.add_argument("--spec", required=True, help="truth specification (JSON)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output CSV path")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a model family over the requested times")
    f.add_argument("--config", help="JSON file with any of the options below")
    f.add_argument("--family", choices=("A", "B", "C"))
    f.add_argument("--corr", help="structure code c, or cP,cS for family C (" +
                   ", ".join(f"{k}={v}" for k, v in CODES.items()) + ")")
    f.add_argument("--times", help="comma-separated time indices (default 1,2,3,4)")
    f.add_argument("--input", help="long-format CSV dataset")
    f.add_argument("--out", help="output directory")
    f.add_argument("--boot", type=int, help="bootstrap replicates (default 100; 0 skips)")
    f.add_argument("--boot-mode", dest="boot_mode", choices=("full", "estimates"))
    f.add_argument("--seed", type=int)
    f.add_argument("--scaling", choices=SCALINGS)
    f.add_argument("--js", choices=JS_VARIANTS)
    f.add_argument("--max-iter", dest="max_iter", type=int)
    f.add_argument("--tol", type=float)
    f.add_argument("--jobs", type=int, help="worker processes (default from HURDLEGEE_THREADS)")
    f.add_argument("--latex", action="store_true", help="also write report.tex")
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("report", help="render tables written by fit")
    r.add_argument("--dir", required=True, help="artifact directory")
    r.add_argument("--latex", action="store_true")
    r.add_argument("--output", help="write to this file instead of stdout")
    r.set_defaults(func=cmd_report)

    g = sub.add_parser("distribution", help="FRI counts by time, zone and score")
    g.add_argument("--input", required=True)
    g.add_argument("--out", help="output CSV (stdout if omitted)")
    g.set_defaults(func=cmd_distribution)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    try:
        return args.func(args)
    except (UsageError, HurdleGEEError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
