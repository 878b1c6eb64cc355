"""Command-line front end; flags map one-to-one onto ExportJob fields.

Exit codes: 0 when at least one item was exported or reused, 1 when
every item failed, 2 for unusable arguments or input listings.
"""

import argparse
import logging
import sys

from .export import ExportJob, ExportUsageError, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uem-export",
        description="Extract frame and caption-word features into the "
                    "retrieval engine's on-disk formats.",
    )
    parser.add_argument("--videos", nargs="+", required=True, metavar="FILE",
                        help="video files; each file's stem becomes its video id")
    parser.add_argument("--captions", required=True, metavar="FILE",
                        help="JSON-lines file of {text_id, video_id, caption} rows")
    parser.add_argument("--out-dir", required=True, metavar="DIR",
                        help="output directory (created if missing)")
    parser.add_argument("--fps", type=float, default=1.0,
                        help="frame sampling rate in frames/second (default 1)")
    parser.add_argument("--backend", choices=["hash", "clip"], default="hash",
                        help="embedding backend (default hash; clip needs weights)")
    parser.add_argument("--device", default="cpu",
                        help="device for the clip backend (default cpu)")
    parser.add_argument("--workers", type=int, default=4,
                        help="parallel video workers (default 4)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    job = ExportJob(videos=args.videos, captions=args.captions,
                    out_dir=args.out_dir, fps=args.fps, backend=args.backend,
                    device=args.device, workers=args.workers)
    try:
        report = export(job)
    except (ExportUsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"exported {len(report.exported)}, reused {len(report.reused)}, "
          f"skipped {len(report.skipped)}")
    if report.n_ok == 0:
        print("error: no item could be exported", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
