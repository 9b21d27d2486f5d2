"""navplots command line: render figures from navformer CSV outputs."""

from __future__ import annotations

import argparse
import sys

from .charts import plot_attention_heatmap, plot_learning_curves, plot_progress_centroid
from .frames import SchemaError


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="navplots")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("learning-curves", help="loss and val SPL vs iteration")
    c.add_argument("stats", nargs="+", help="one or more stats.csv files")
    c.add_argument("--out", required=True)
    c.add_argument("--labels", nargs="*", default=None)

    h = sub.add_parser("attention-heatmap", help="step x position weight heatmap")
    h.add_argument("dump", help="attention_ep*.csv file")
    h.add_argument("--out", required=True)
    h.add_argument("--role", default="language")

    g = sub.add_parser("progress-centroid", help="centroid vs step curves")
    g.add_argument("centroids", help="progress_centroid.csv file")
    g.add_argument("--out", required=True)
    g.add_argument("--summary", default=None, help="progress_summary.csv file")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "learning-curves":
            plot_learning_curves(args.stats, args.out, labels=args.labels)
        elif args.command == "attention-heatmap":
            plot_attention_heatmap(args.dump, args.out, role=args.role)
        else:
            plot_progress_centroid(args.centroids, args.out,
                                   summary_path=args.summary)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    print(args.out)
    return 0


def entry() -> None:
    sys.exit(main())
