"""
Command-line front end.

    gpshare synth   --spec spec.json --out data.csv
    gpshare fit     --data data.csv --model lkm --kernels "SE + PER" --out run/
    gpshare search  --data data.csv --model lkm --alphabet SE,LIN,PER --max-depth 2 --out run/
    gpshare predict --fitted run/model.json --out run/
    gpshare report  --fitted run/model.json --out run/
    gpshare eval    --predictions run/predictions.csv

Exit status: 0 on success, 1 for usage and input errors, 2 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from gpshare import data, pipeline, report
from gpshare.errors import (
    AllPruned,
    ConstantSeries,
    NoActiveComponent,
    NonFinite,
    NotPsd,
    ParseError,
)
from gpshare.kernels import KINDS, parse_sum
from gpshare.search import DEFAULT_RULES, SearchConfig, run_search

NUMERICAL = (NotPsd, NonFinite, NoActiveComponent, AllPruned, FloatingPointError, np.linalg.LinAlgError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _alphabet(text: str) -> tuple:
    kinds = tuple(k.strip().upper() for k in text.split(",") if k.strip())
    bad = [k for k in kinds if k not in KINDS]
    if bad or not kinds:
        raise argparse.ArgumentTypeError(f"alphabet must be a comma list drawn from {','.join(KINDS)}")
    return kinds


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gpshare", description="Shared-structure GP models for multiple time series.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, data_required=True):
        p.add_argument("--config", type=Path, help="JSON file whose keys override the flags")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, required=True)
        if data_required:
            p.add_argument("--data", type=Path, required=True)
            p.add_argument("--test-fraction", type=float, default=0.1)
            p.add_argument("--unit", default="years")

    def model_flags(p):
        p.add_argument("--model", choices=pipeline.MODELS, default="lkm")
        p.add_argument("--restarts", type=int, default=5)
        p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("synth", help="draw synthetic series from a JSON spec")
    common(p, data_required=False)
    p.add_argument("--spec", type=Path, required=True)

    p = sub.add_parser("fit", help="fit a fixed kernel set")
    common(p)
    model_flags(p)
    p.add_argument("--kernels", required=True, help='e.g. "LIN + SE*PER"')

    p = sub.add_parser("search", help="run the structure search")
    common(p)
    model_flags(p)
    p.add_argument("--alphabet", type=_alphabet, default=KINDS)
    p.add_argument("--max-depth", type=int, default=4)
    p.add_argument("--rules", default=",".join(DEFAULT_RULES))
    p.add_argument("--mode", choices=("pe", "fe"), default="pe")

    for name, text in (("predict", "predict the held-out window"), ("report", "write the comparison report")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path)
        p.add_argument("--fitted", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="recompute metrics from a predictions CSV")
    p.add_argument("--config", type=Path)
    p.add_argument("--predictions", type=Path, required=True)
    return ap


def _require(path: Path | None, what: str):
    if path is not None and not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")


def _apply_config(args):
    if getattr(args, "config", None) is None:
        return args
    _require(args.config, "config file")
    with open(args.config) as fh:
        overrides = json.load(fh)
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if attr == "alphabet":
            value = _alphabet(value if isinstance(value, str) else ",".join(value))
        elif attr in ("data", "out", "fitted", "spec", "predictions") and value is not None:
            value = Path(value)
        setattr(args, attr, value)
    return args


def _load_training(args):
    _require(args.data, "data file")
    ts = data.load_csv(args.data, unit=args.unit)
    train, test, scale = pipeline.prepare(ts, args.test_fraction)
    return ts, train, test, scale


def _save_model(args, state, train, test, scale, extra):
    args.out.mkdir(parents=True, exist_ok=True)
    payload = {
        "data": train.to_dict(),
        "test": test.to_dict(),
        "scale": np.asarray(scale).tolist(),
        **extra,
    }
    pipeline.save_state(state, args.out / "model.json", payload)


def cmd_synth(args):
    _require(args.spec, "spec file")
    spec = data.SynthSpec.load(args.spec)
    ts = data.generate_from_spec(spec)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    data.save_csv(ts, args.out)
    print(f"wrote {ts.N} series x {ts.D} points to {args.out}")


def cmd_fit(args):
    ts, train, test, scale = _load_training(args)
    kernels = parse_sum(args.kernels, train.t)
    res = pipeline.fit_model(args.model, train.X, train.t, kernels, seed=args.seed, restarts=args.restarts, jobs=args.jobs)
    _save_model(args, res.state, train, test, scale, {"objective": res.objective})
    print(f"objective {res.objective:.6f}; kernels {res.state.kernels}")


def cmd_search(args):
    ts, train, test, scale = _load_training(args)
    rules = tuple(r.strip() for r in args.rules.split(",") if r.strip())
    try:
        cfg = SearchConfig(
            model=args.model,
            max_depth=args.max_depth,
            alphabet=args.alphabet,
            rules=rules,
            mode=args.mode,
            restarts=args.restarts,
            seed=args.seed,
            jobs=args.jobs,
        )
    except ValueError as err:
        raise UsageError(str(err)) from None
    node, trace = run_search(train.X, train.t, cfg)
    _save_model(args, node.fitted, train, test, scale, {"objective": node.objective, "bic": node.bic})
    trace.write(args.out / "trace.jsonl")
    print(f"best BIC {node.bic:.4f}; kernels {node.kernel_set}")


def _load_fitted(args):
    _require(args.fitted, "fitted model")
    state, payload = pipeline.load_state(args.fitted)
    train = data.TimeSeriesSet.from_dict(payload["data"])
    test = data.TimeSeriesSet.from_dict(payload["test"])
    return state, train, test, np.array(payload["scale"])


def cmd_predict(args):
    state, train, test, scale = _load_fitted(args)
    if test.D == 0:
        raise UsageError("the fitted model has no held-out window (test fraction 0)")
    res = pipeline.holdout(state, test, scale)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "predictions.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "time", "truth", "mean", "var"])
        for n, name in enumerate(res.names):
            for j in range(test.D):
                w.writerow([name, repr(float(test.t[j])), repr(float(res.truth[n, j])), repr(float(res.mean[n, j])), repr(float(res.var[n, j]))])
    _print_metrics(res.names, res.rmse, res.mnlp)


def _print_metrics(names, rmses, mnlps):
    for name, r, m in zip(names, rmses, mnlps):
        print(f"{name}\tRMSE {r:.6g}\tMNLP {m:.6g}")


def cmd_report(args):
    state, train, test, scale = _load_fitted(args)
    comps = report.build_components(state, train)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.md").write_text(report.render_markdown(comps), encoding="utf-8")
    (args.out / "plot.json").write_text(report.plot_data_json(state, train, scale) + "\n")
    print(f"wrote {len(comps)} components to {args.out / 'report.md'}")


def cmd_eval(args):
    _require(args.predictions, "predictions file")
    rows = {}
    with open(args.predictions, newline="") as fh:
        for i, r in enumerate(csv.DictReader(fh), start=2):
            try:
                rows.setdefault(r["series"], []).append((float(r["truth"]), float(r["mean"]), float(r["var"])))
            except (KeyError, TypeError, ValueError):
                raise ParseError("malformed predictions row", row=i) from None
    names = sorted(rows)
    arrs = [np.array(rows[n]) for n in names]
    _print_metrics(names, [data.rmse(a[:, 1], a[:, 0]) for a in arrs], [data.mnlp(a[:, 1], a[:, 2], a[:, 0]) for a in arrs])


COMMANDS = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "search": cmd_search,
    "predict": cmd_predict,
    "report": cmd_report,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        args = _apply_config(args)
        COMMANDS[args.command](args)
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return 1
    except (FileNotFoundError, ParseError, ConstantSeries, json.JSONDecodeError, argparse.ArgumentTypeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except NUMERICAL as err:
        print(f"numerical failure ({type(err).__name__}): {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
