import argparse
import sys

from .exporter import ExportError, export


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vgg-export",
        description="Convert a VGG-19 checkpoint to a backbone blob plus a "
                    "reference feature dump.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="write blob, dump and report")
    p.add_argument("--out", required=True, help="output blob path (.vggb)")
    p.add_argument("--test-image", required=True,
                   help="image for the reference feature dump")
    p.add_argument("--checkpoint", default="pretrained",
                   help="'pretrained', 'random:SEED', or a state-dict path")
    p.add_argument("--dump", help="dump path (default: blob stem + .vggd)")
    p.add_argument("--report",
                   help="report path (default: blob stem + .report.json)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        report = export(args.checkpoint, args.out, args.test_image,
                        dump_path=args.dump, report_path=args.report)
    except (ExportError, OSError) as e:
        print(f"vgg-export: {e}", file=sys.stderr)
        return 1
    print(f"source: {report.source}")
    print(f"blob: {args.out} (checksum {report.blob_checksum})")
    print(f"dump: {report.dump_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
