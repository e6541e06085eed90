"""Tiny CLI: flowfigs <run-dir> [--kind K ...] [--steps 0,2,4] [--out DIR]."""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, FigureSpec, render


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="flowfigs", description=__doc__)
    ap.add_argument("run_dir")
    ap.add_argument("--kind", action="append", choices=KINDS, help="repeatable; default: all kinds the run supports")
    ap.add_argument("--steps", default=None, help="comma-separated outer steps to draw")
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)
    steps = tuple(int(s) for s in args.steps.split(",")) if args.steps else ()
    kinds = args.kind or list(KINDS)
    failures = 0
    for kind in kinds:
        try:
            res = render(FigureSpec(kind=kind, run_dir=args.run_dir, steps=steps), out_dir=args.out)
            print(f"{kind}: {res.path}")
        except Exception as exc:
            print(f"flowfigs: error: {kind}: {exc}", file=sys.stderr)
            failures += 1
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
