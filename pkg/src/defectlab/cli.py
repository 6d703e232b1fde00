"""Command line front end.

Examples:
  defectlab diagnose --a2 1 --b2 1.7320508075688772 --c2 1 --radius 20
  defectlab modes --k 2 --radius inf --r-eff 60 --out runs/k2
  defectlab sweep --axis b2 --values 1.2 1.5 1.9 --analyses diagnose --out runs/b2
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import report
from .errors import DefectLabError, NonConvergence
from .report import ConfigError, RunConfig, StageError

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_NUMERIC = 0, 2, 3, 4

SUBCOMMAND_ANALYSES = {
    "solve": (),
    "diagnose": ("diagnose",),
    "stability": ("diagnose", "stability"),
    "modes": ("modes",),
    "check2d": ("check2d",),
    "uniqueness": ("uniqueness",),
    "sweep": ("diagnose",),
}

# flag name -> config key; defaults live in RunConfig so flags left unset do not override the file
FLAG_KEYS = {
    "a2": "a2",
    "b2": "b2",
    "c2": "c2",
    "k": "k",
    "radius": "radius",
    "n_elements": "n_elements",
    "degree": "degree",
    "grading": "grading",
    "r_eff": "r_eff",
    "tol": "tol",
    "analyses": "analyses",
    "out": "out",
    "seed": "seed",
    "jobs": "jobs",
    "n_starts": "n_starts",
    "m_max": "m_max",
    "n_phi": "n_phi",
    "n_random": "n_random",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _radius(text: str):
    if text.strip().lower() in {"inf", "infinity"}:
        return "inf"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"radius must be a number or 'inf', got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("model")
    g.add_argument("--a2", type=float)
    g.add_argument("--b2", type=float)
    g.add_argument("--c2", type=float)
    g.add_argument("--k", type=int, help="winding index (nonzero)")
    g.add_argument("--radius", type=_radius, help="disk radius or 'inf' for the whole plane")
    g = common.add_argument_group("discretization")
    g.add_argument("--n-elements", dest="n_elements", type=int)
    g.add_argument("--degree", type=int, help="element polynomial degree")
    g.add_argument("--grading", help="uniform | geometric:<ratio> | stretch:<last/first>")
    g.add_argument("--r-eff", dest="r_eff", type=float, help="truncation radius override (whole plane)")
    g.add_argument("--tol", type=float, help="Newton tolerance on the scaled residual")
    g = common.add_argument_group("run")
    g.add_argument("--analyses", type=lambda s: tuple(x for x in s.split(",") if x), help="comma list overriding the subcommand default")
    g.add_argument("--out", help="output directory for report.json and CSV artifacts")
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int)
    g.add_argument("--n-starts", dest="n_starts", type=int)
    g.add_argument("--m-max", dest="m_max", type=int)
    g.add_argument("--n-phi", dest="n_phi", type=int)
    g.add_argument("--n-random", dest="n_random", type=int)
    g.add_argument("--config", type=Path, help="JSON config file; flags override its values")
    g.add_argument("-v", "--verbose", action="store_true")

    ap = _Parser(prog="defectlab", description="Radial defect profiles and their stability certificates.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMAND_ANALYSES:
        p = sub.add_parser(name, parents=[common])
        if name == "sweep":
            p.add_argument("--axis", required=True, choices=report.SWEEP_AXES)
            p.add_argument("--values", nargs="*", default=[], help="values along the axis")
    return ap


def config_from_args(args: argparse.Namespace) -> RunConfig:
    data: dict = {}
    if args.config is not None:
        try:
            data.update(json.loads(args.config.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if "analyses" not in data:
        data["analyses"] = list(SUBCOMMAND_ANALYSES[args.command])
    for flag, key in FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            data[key] = list(val) if key == "analyses" else val
    return RunConfig.from_dict(data)


def _summary(rep: report.RunReport) -> str:
    lines = []
    c = rep.data["constants"]
    lines.append(f"regime {c['regime']}  s+ = {c['s_plus']:.12g}")
    for v in rep.verdicts:
        lines.append(f"  [{v['status']:>4}] {v['name']}: {v['value']!r}  ({v['tolerance']})")
    lines.append(f"verdict: {'fail' if rep.failed else 'pass'}")
    return "\n".join(lines)


def _sweep_values(axis: str, raw: list[str]) -> list:
    conv = int if axis in ("k", "n_elements") else float
    try:
        return [conv(x) for x in raw]
    except ValueError as exc:
        raise ConfigError(f"bad sweep value: {exc}") from exc


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(args)
        if args.command == "sweep":
            values = _sweep_values(args.axis, args.values)
            jobs = report.max_jobs(config.jobs)
            rows, reports = report.sweep(config, args.axis, values, jobs=jobs)
            text = report.sweep_csv(rows)
            if config.out:
                out = Path(config.out)
                out.mkdir(parents=True, exist_ok=True)
                (out / "sweep.csv").write_text(text)
                for i, rep in enumerate(reports):
                    if rep is not None:
                        (out / f"run_{i:03d}.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
            sys.stdout.write(text)
            bad = [r for r in rows if r["status"] == "fail"]
            print(f"verdict: {'fail' if bad else 'pass'} ({len(rows)} runs, {sum(r['status'] == 'error' for r in rows)} errors)")
            return EXIT_OK
        rep = report.run(config)
        print(_summary(rep))
        if config.out:
            print(f"wrote {Path(config.out) / 'report.json'}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE if isinstance(exc.cause, NonConvergence) else EXIT_NUMERIC
    except NonConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (DefectLabError, ArithmeticError, ValueError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
