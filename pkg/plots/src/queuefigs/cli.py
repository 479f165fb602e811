"""queuefigs: turn hwqueue summary reports into figures.

Exit codes: 0 on success, 2 on schema/usage errors, 3 on unexpected failures.
"""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, FigureSpec, SchemaError, render


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="queuefigs", description=__doc__)
    ap.add_argument("--report", required=True,
                    help="path to a summary.json written by the hwqueue CLI")
    ap.add_argument("--kind", required=True, choices=KINDS)
    ap.add_argument("--out", required=True, help="output image (.png or .svg)")
    ap.add_argument("--n", type=int, default=None,
                    help="ladder entry for cdf_overlay (default: largest)")
    ns = ap.parse_args(argv)
    try:
        path = render(FigureSpec(report=ns.report, kind=ns.kind, out=ns.out, n=ns.n))
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
