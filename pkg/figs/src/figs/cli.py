"""Command-line entry point: figs <kind> --in <paths...> --out <path>."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence

from .io import FigsError
from .render import KINDS, FigureJob, render


def _load_style(raw: Optional[str]) -> Dict[str, object]:
    if raw is None:
        return {}
    text = raw.strip()
    if not text.startswith("{"):
        path = Path(raw)
        if not path.exists():
            raise FigsError(f"style file does not exist: {raw}")
        text = path.read_text()
    try:
        style = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FigsError(f"style is not valid JSON: {exc}") from None
    if not isinstance(style, dict):
        raise FigsError("style JSON must be an object")
    return style


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="figs",
        description="Render figures from experiment artifact CSVs.")
    parser.add_argument("kind", choices=KINDS, help="figure kind to render")
    parser.add_argument("--in", dest="inputs", nargs="+", required=True,
                        metavar="PATH", help="input artifact CSVs")
    parser.add_argument("--out", required=True, metavar="PATH",
                        help="output image path (.svg default, .png raster)")
    parser.add_argument("--style", metavar="JSON",
                        help="inline JSON object or path to a JSON file")
    parser.add_argument("--overwrite", action="store_true",
                        help="replace the output file if it exists")
    args = parser.parse_args(argv)

    try:
        job = FigureJob(kind=args.kind, inputs=tuple(args.inputs),
                        out=args.out, style=_load_style(args.style),
                        overwrite=args.overwrite)
        written = render(job)
    except FigsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(written)
    return 0


if __name__ == "__main__":
    sys.exit(main())
