"""Command-line entry point: ``dice run|sweep|ablate|summarize``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import report, runner
from .config import ConfigError, load_config

log = logging.getLogger("dice")


def _parse_ks(text):
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("--k needs at least one team size >= 1")
    return ks


def build_parser():
    p = argparse.ArgumentParser(prog="dice", description="Team policy training with shared rollouts and "
                                                         "diversity-regularized updates.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key by dotted path, e.g. onpolicy.n_agents=3")
        sp.add_argument("--out", help="output directory (default: output_dir from the config)")
        sp.add_argument("--no-summary", action="store_true", help="skip the summary table and figures")
        return sp

    with_config("run", "train every seed of one config")
    sp = with_config("sweep", "vary the team size at a fixed env-step budget")
    sp.add_argument("--k", type=_parse_ks, default=[1, 3, 5, 7, 10], help="team sizes, e.g. 1,3,5,7,10")
    sp = with_config("ablate", "run the ablation matrix")
    sp.add_argument("--variants", type=lambda s: [v for v in s.split(",") if v],
                    help="comma-separated subset of ablations")

    sp = sub.add_parser("summarize", help="tables and figures from finished runs")
    sp.add_argument("dir", help="directory containing run outputs")
    sp.add_argument("--out", help="where to write summary files (default: dir)")
    sp.add_argument("--tail", type=int, default=5, help="logging points averaged for the final score")
    sp.add_argument("--no-figures", action="store_true")
    return p


def _summarize(directory, out=None, tail=5, figures=True):
    _, text = report.summarize(directory, tail=tail, out_dir=out, figures=figures)
    sys.stdout.write(text)


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "summarize":
            _summarize(args.dir, args.out, args.tail, not args.no_figures)
            return 0
        cfg = load_config(args.config, args.overrides)
        out = args.out or cfg.output_dir
        if args.command == "run":
            runner.run(cfg, out)
        elif args.command == "sweep":
            runner.sweep_team_size(cfg, args.k, out)
        else:
            runner.ablation_matrix(cfg, out, args.variants)
        if not args.no_summary:
            _summarize(out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
