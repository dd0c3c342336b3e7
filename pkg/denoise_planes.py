#!/usr/bin/env python3
"""
Command-line interface for the standalone AO denoiser
"""

import argparse
import logging
from pathlib import Path

from dhr_shadows.config import load_config
from dhr_shadows.denoise import SvgfFilter
from dhr_shadows.errors import ConfigError, DhrError
from dhr_shadows.gbuffer import load_gbuffer
from dhr_shadows.raytrace import load_ao_plane, save_ao_plane


def denoise_sequence(gbuffer_files, ao_files, output_dir, config):
    """
    Filter a sequence of AO planes with their G-buffer dumps, in order.

    Returns:
        Paths of the filtered planes, named after the input planes
    """
    if len(gbuffer_files) != len(ao_files):
        raise ValueError(f"got {len(gbuffer_files)} G-buffer dumps but {len(ao_files)} AO planes")
    camera = config.build_camera()
    svgf = SvgfFilter(config.filter_params())
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for gbuffer_file, ao_file in zip(gbuffer_files, ao_files):
        gbuffer = load_gbuffer(gbuffer_file, camera)
        ao = load_ao_plane(ao_file, gbuffer.pose)
        path = out / Path(ao_file).name
        save_ao_plane(svgf.filter(ao, gbuffer), str(path))
        written.append(path)
    return written


def main(argv=None):
    """Main entry point for the denoiser CLI."""
    parser = argparse.ArgumentParser(
        description="Filter raw AO planes with the spatiotemporal variance-guided filter"
    )
    parser.add_argument(
        '--gbuffer',
        '-g',
        nargs='+',
        required=True,
        help='G-buffer dump files, one per frame, in frame order'
    )
    parser.add_argument(
        '--ao',
        '-a',
        nargs='+',
        required=True,
        help='Raw AO plane files matching the G-buffer dumps'
    )
    parser.add_argument(
        '--output',
        '-o',
        default='filtered',
        help='Directory for the filtered planes'
    )
    parser.add_argument(
        '--config',
        '-c',
        help='Config file supplying camera intrinsics and filter parameters'
    )
    parser.add_argument(
        '--set',
        '-s',
        dest='overrides',
        action='append',
        default=[],
        metavar='KEY=VALUE',
        help='Override a config key, e.g. --set filter.iterations=3'
    )
    parser.add_argument('--verbose', '-v', action='store_true', help='Log debug output')

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        config = load_config(args.config, args.overrides)
        written = denoise_sequence(args.gbuffer, args.ao, args.output, config)
    except (ConfigError, FileNotFoundError) as e:
        print(f"Error: {e}")
        return 1
    except (DhrError, ValueError) as e:
        print(f"Error: {e}")
        return 2
    except Exception as e:
        print(f"Unexpected error: {e}")
        return 2

    print(f"Wrote {len(written)} filtered planes to {args.output}")
    return 0


if __name__ == "__main__":
    exit_code = main()
    exit(exit_code)
