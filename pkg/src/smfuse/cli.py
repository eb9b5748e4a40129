"""Command line entry point: ``smfuse <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from .gpu import SCHEMES, GpuConfig, config_from_dict
from .harness import (compare_schemes, load_reports, report, run, save_report,
                      sweep_scaling, train_cli)
from .predictor import (load_model, logit, predict_fuse, probability, read_metric_rows)
from .workload import load_kernel_file


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def load_config(path: str | None) -> GpuConfig:
    if path is None:
        return GpuConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise CliError(f"{path}: config must be a JSON object")
    return config_from_dict(data)


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError(f"expected comma separated integers, got {text!r}") from None
    if not vals:
        raise CliError("empty SM count list")
    return vals


def _write_rows(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_run(a) -> None:
    cfg = load_config(a.config)
    if a.scheme:
        cfg = replace(cfg, scheme=a.scheme)
    r = run(cfg, load_kernel_file(a.kernel))
    if a.out:
        save_report(r, a.out)
    print(json.dumps(r.scalars()))


def cmd_sweep(a) -> None:
    cfg = load_config(a.config)
    rows = sweep_scaling(load_kernel_file(a.kernel), _int_list(a.sms), a.budget,
                         a.perfect_noc, cfg)
    if a.out:
        _write_rows(rows, a.out)
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)


def cmd_compare(a) -> None:
    cfg = load_config(a.config)
    schemes = [s.strip() for s in a.schemes.split(",") if s.strip()]
    bad = [s for s in schemes if s not in SCHEMES]
    if bad:
        raise CliError(f"unknown scheme(s) {bad}; choose from {', '.join(SCHEMES)}")
    results = compare_schemes(load_kernel_file(a.kernel), schemes, cfg)
    rows = [{"scheme": r.scheme, "ipc": r.ipc, "speedup": sp, "decision": r.decision,
             "total_cycles": r.total_cycles, "split_events": r.split_events}
            for r, sp in results]
    if a.out:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(rows, out / "compare.csv")
        for r, _ in results:
            save_report(r, out / f"{r.scheme}.json")
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)


def cmd_train(a) -> None:
    _, train_acc, held = train_cli(a.data, a.out, lr=a.lr, epochs=a.epochs, l2=a.l2)
    print(f"training accuracy {train_acc:.4f}, held-out accuracy {held:.4f}, model -> {a.out}")


def cmd_predict(a) -> None:
    model = load_model(a.model)
    w = csv.writer(sys.stdout)
    w.writerow(["row", "logit", "probability", "decision"])
    for i, x in enumerate(read_metric_rows(a.metrics)):
        w.writerow([i, logit(model, x), probability(model, x), predict_fuse(model, x).value])


def cmd_report(a) -> None:
    if not Path(a.indir).is_dir():
        raise CliError(f"{a.indir}: not a directory")
    paths = report(load_reports(a.indir), a.out)
    print(" ".join(str(p) for p in paths))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="smfuse", description="GPU SM fuse/split simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="one controlled run")
    r.add_argument("--config")
    r.add_argument("--kernel", required=True)
    r.add_argument("--scheme", choices=SCHEMES)
    r.add_argument("--out", help="write the full report as JSON")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="fixed-budget SM count sweep")
    s.add_argument("--kernel", required=True)
    s.add_argument("--sms", default="16,25,36,64")
    s.add_argument("--perfect-noc", action="store_true")
    s.add_argument("--budget", type=int, help="total threads shared by all SMs")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("compare", help="run several schemes on one kernel")
    c.add_argument("--kernel", required=True)
    c.add_argument("--schemes", default=",".join(SCHEMES))
    c.add_argument("--config")
    c.add_argument("--out", help="directory for compare.csv and per-run JSON")
    c.set_defaults(func=cmd_compare)

    t = sub.add_parser("train", help="fit the predictor on a labelled CSV")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--lr", type=float, default=0.5)
    t.add_argument("--epochs", type=int, default=3000)
    t.add_argument("--l2", type=float, default=0.0)
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("predict", help="evaluate a model on metric rows")
    q.add_argument("--model", required=True)
    q.add_argument("--metrics", required=True)
    q.set_defaults(func=cmd_predict)

    o = sub.add_parser("report", help="render saved run reports as CSV")
    o.add_argument("--in", dest="indir", required=True)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except (CliError, ValueError, OSError, RuntimeError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"smfuse: error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
