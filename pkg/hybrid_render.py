#!/usr/bin/env python3
"""
Command-line interface for the distributed hybrid renderer
"""

import argparse
import logging
from pathlib import Path

from dhr_shadows.compose import export_frames
from dhr_shadows.config import load_config
from dhr_shadows.errors import ConfigError
from dhr_shadows.metrics import RunRecord, emit_reports
from dhr_shadows.pipeline import run_client, run_local, run_reference, run_sim, serve
from dhr_shadows.suites import SUITES, run_suite

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3


def build_parser():
    parser = argparse.ArgumentParser(
        description="Distributed hybrid rendering of shadows and ambient occlusion"
    )
    parser.add_argument(
        '--config',
        '-c',
        help='Path to a JSON config file (defaults are used for missing keys)'
    )
    parser.add_argument(
        '--set',
        '-s',
        dest='overrides',
        action='append',
        default=[],
        metavar='KEY=VALUE',
        help='Override a config key by dotted path, e.g. --set ao.rays=64 (repeatable)'
    )
    parser.add_argument(
        '--print-config',
        action='store_true',
        help='Print the fully materialized config and exit'
    )
    parser.add_argument(
        '--verbose',
        '-v',
        action='store_true',
        help='Log debug output'
    )
    commands = parser.add_subparsers(dest='command')

    sim = commands.add_parser('sim', help='Run server and client over simulated links')
    sim.add_argument(
        '--reference',
        '-r',
        action='store_true',
        help='Compute per-frame SSIM against the zero-latency render'
    )

    srv = commands.add_parser('serve', help='Serve camera requests over UDP')
    srv.add_argument('--max-frames', type=int, help='Stop after rendering this many frames')
    srv.add_argument('--idle-timeout', type=float, default=10.0, help='Stop after this many idle seconds')

    commands.add_parser('client', help='Run the thin client against a running server')

    ref = commands.add_parser('reference', help='Render the offline high-sample reference')
    ref.add_argument('--spp', type=int, help='Samples per pixel (output.reference_spp by default)')

    suite = commands.add_parser('suite', help='Run a benchmark suite')
    suite.add_argument('name', choices=sorted(SUITES), help='Suite to run')
    suite.add_argument('--output', '-o', help='Output directory (output.directory by default)')
    suite.add_argument(
        '--check',
        action='store_true',
        help=f'Exit with code {EXIT_CHECK_FAILED} if an acceptance check fails'
    )

    report = commands.add_parser('report', help='Summarize a run CSV and redraw its latency plot')
    report.add_argument('csv', help='Run record CSV written by sim or client')
    return parser


def _print_record(record: RunRecord) -> None:
    print(f"{record.name}: {record.displayed_frames} frames displayed, {len(record.rows)} frames sent")
    for pass_name in sorted({r.pass_name for r in record.rows}):
        s = record.pass_summary(pass_name)
        print(f"  {pass_name:<10} {s['delivered']}/{s['frames']} delivered, "
              f"{s['mean_compressed_bytes']:.0f} B/frame, {s['mean_packets']:.1f} packets/frame, "
              f"{s['delivered_fps']:.1f} fps")
    if record.mean_ssim is not None:
        print(f"  mean SSIM {record.mean_ssim:.4f}")


def cmd_sim(config, args) -> int:
    reference = None
    if args.reference:
        reference = run_local(config, name="zero-latency").frames
    result = run_sim(config, reference=reference)
    _print_record(result.record)
    if result.record.ledger:
        for tag, bps in result.bandwidth.items():
            print(f"  {tag:<10} {bps / 1e6:.3f} Mbit/s")
    for path in emit_reports(result.record, config.output.directory):
        print(f"Wrote {path}")
    return EXIT_OK


def cmd_serve(config, args) -> int:
    rendered = serve(config, args.max_frames, args.idle_timeout)
    print(f"Rendered {rendered} frames")
    return EXIT_OK


def cmd_client(config, args) -> int:
    result = run_client(config)
    _print_record(result.record)
    for path in emit_reports(result.record, config.output.directory):
        print(f"Wrote {path}")
    return EXIT_OK


def cmd_reference(config, args) -> int:
    images = run_reference(config, args.spp)
    directory = Path(config.output.directory) / "reference_frames"
    count = export_frames(images, str(directory))
    print(f"Wrote {count} reference frames to {directory}")
    return EXIT_OK


def cmd_suite(config, args) -> int:
    report = run_suite(args.name, config, args.output)
    print(f"Suite {report.name}: {len(report.rows)} rows")
    for path in report.files:
        print(f"Wrote {path}")
    for check in report.checks:
        print(f"  [{'PASS' if check.passed else 'FAIL'}] {check.name}: {check.detail}")
    if args.check and not report.passed:
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_report(config, args) -> int:
    record = RunRecord.read_csv(args.csv)
    record.duration_s = config.build_trajectory().duration_s
    _print_record(record)
    for pass_name in sorted({r.pass_name for r in record.rows}):
        delivered = sum(r.compressed_bytes for r in record.rows_for(pass_name) if r.delivered)
        print(f"  {pass_name:<10} ~{delivered * 8 / record.duration_s / 1e6:.3f} Mbit/s of payload")
    for path in emit_reports(record, str(Path(args.csv).parent)):
        print(f"Wrote {path}")
    return EXIT_OK


COMMANDS = {
    'sim': cmd_sim,
    'serve': cmd_serve,
    'client': cmd_client,
    'reference': cmd_reference,
    'suite': cmd_suite,
    'report': cmd_report,
}


def main(argv=None):
    """Main entry point for the hybrid renderer CLI."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        config = load_config(args.config, args.overrides)
    except (ConfigError, FileNotFoundError) as e:
        print(f"Error: {e}")
        return EXIT_CONFIG

    if args.print_config:
        print(config.to_json(), end="")
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG

    try:
        return COMMANDS[args.command](config, args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"Error: {e}")
        return EXIT_CONFIG
    except Exception as e:
        print(f"Unexpected error: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    exit_code = main()
    exit(exit_code)
