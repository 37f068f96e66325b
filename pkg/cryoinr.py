#!/usr/bin/env python
"""
cryoinr - neural compression for Cryo-EM density maps

USAGE:
    python cryoinr.py compress a.mrc b.mrc [-o out.cemz] --threshold 0 --seed 42
    python cryoinr.py decompress out.cemz -o recon/ [--file a.mrc]
    python cryoinr.py evaluate a.mrc recon/a.mrc [--bands 0.07,0.15] [--csv report.csv]
    python cryoinr.py synth --shape 64 --blobs 8 --seed 42 -o t.mrc
    python cryoinr.py fetch EMD-1234 -o emd_1234.map
    python cryoinr.py info a.mrc [--threshold 0]

Exit codes: 0 success, 1 usage or pipeline error, 2 network error,
3 not found, 4 corrupt data.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

from codec import (archive_path_for, compress, compression_ratio, decompress_all, load_archive,
                   safe_file_name, save_archive)
from config import (APP_SETTINGS, ARCH_PROFILES, ENCODING_CONFIG, LOG_CONFIG, METRICS_CONFIG,
                    PREPROCESS_CONFIG, TRAIN_DEFAULTS, get_seed, setup_logging)
from emdb_fetch import fetch_map, parse_accession
from errors import CryoInrError
from metrics import banded_report, format_report, gzip_ratio, report_frame, write_report_csv
from mrc_io import describe, load_mrc, save_mrc
from preprocess import threshold_and_map
from synth import synth_volume
from trainer import TrainConfig

logger = logging.getLogger(__name__)


class CliParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with 1 (2 is reserved for network failures)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def band_list(text):
    try:
        edges = [float(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"band edges must be comma-separated numbers, got {text!r}") from None
    if not edges:
        raise argparse.ArgumentTypeError("at least one band edge is required")
    return tuple(sorted(edges))


def shape_arg(text):
    parts = [int(p) for p in text.replace('x', ',').split(',') if p.strip()]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or min(parts) < 8:
        raise argparse.ArgumentTypeError(f"shape must be N or NX,NY,NZ with every size >= 8, got {text!r}")
    return tuple(parts)


def _require_files(paths):
    for path in paths:
        if not Path(path).is_file():
            raise CryoInrError(f"input file not found: {path}")


def _remove_quietly(path):
    if path and os.path.exists(path):
        os.remove(path)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def train_config_from_args(args):
    return TrainConfig(
        epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch,
        chunk_size=args.chunk_size, early_stop_patience=args.patience,
        validation_fraction=args.validation_fraction, seed=get_seed(args.seed),
        lr_decay=args.lr_decay, lr_final=args.lr_final, profile=args.arch,
        value_mean_scope=args.value_mean, num_frequencies=args.frequencies,
        latent_dim=args.latent_dim, progress=not args.quiet,
    )


def cmd_compress(args):
    config = train_config_from_args(args)
    _require_files(args.inputs)
    output = Path(args.output) if args.output else archive_path_for(args.inputs[0])
    log_path = args.log or str(output) + '.log.csv'
    existed = os.path.exists(log_path)

    inputs = [(Path(p).name, Path(p).read_bytes()) for p in args.inputs]
    print(f"Compressing {len(inputs)} file(s) with profile '{config.profile}' "
          f"({config.architecture}), seed {config.seed}")
    try:
        archive, log = compress(inputs, config, threshold=args.threshold, log_path=log_path)
        save_archive(output, archive)
    except BaseException:
        if not existed:
            _remove_quietly(log_path)
        raise

    ratios = compression_ratio(archive, archive_bytes=output.stat().st_size)
    print(f"\nWrote {output} ({ratios.archive_bytes} bytes)")
    print(f"{'File':<30} {'Original':>12} {'INR (amortized)':>16} {'GZIP':>8}")
    print("-" * 70)
    for (name, data), record in zip(inputs, archive.records):
        print(f"{name:<30} {record.original_size:>12} {ratios.per_file[name]:>15.2f}x "
              f"{gzip_ratio(data):>7.2f}x")
    print("-" * 70)
    print(f"Aggregate ratio: {ratios.aggregate:.2f}:1 ({ratios.original_bytes} -> {ratios.archive_bytes} bytes)")
    if log is not None and log.epochs:
        print(f"Final train loss {log.train_loss[-1]:.6g}, best validation loss "
              f"{log.best_val_loss:.6g} (epoch {log.best_epoch + 1} of {len(log.epochs)})")
        print(f"Training log: {log_path}")
    return 0


def cmd_decompress(args):
    _require_files([args.archive])
    archive = load_archive(args.archive)
    out_dir = Path(args.output)
    names = args.file or archive.names
    for name in names:
        archive.record(name)
    targets = {name: out_dir / safe_file_name(name) for name in names}
    written = []
    try:
        for name, grid in decompress_all(archive, names=names, chunk_size=args.chunk_size):
            written.append(save_mrc(targets[name], grid))
            print(f"Reconstructed {name}: {grid.dims[0]}x{grid.dims[1]}x{grid.dims[2]} -> {written[-1]}")
    except BaseException:
        # all or nothing: drop the files this run already wrote
        for path in written:
            _remove_quietly(path)
        raise
    print(f"{len(written)} file(s) written to {out_dir}")
    return 0


def cmd_evaluate(args):
    _require_files([args.original, args.reconstructed])
    original = load_mrc(args.original)
    reconstructed = load_mrc(args.reconstructed)
    report = banded_report(original, reconstructed, threshold=args.threshold, band_edges=args.bands)
    name = Path(args.original).name
    print(format_report(report, name))
    if args.csv:
        write_report_csv(args.csv, report_frame({name: report}))
        print(f"CSV report: {args.csv}")
    return 0


def cmd_synth(args):
    grid, blobs = synth_volume(args.shape, args.blobs, seed=get_seed(args.seed), noise=args.noise)
    path = save_mrc(args.output, grid)
    print(f"Wrote {path}: {grid.dims[0]}x{grid.dims[1]}x{grid.dims[2]}, {len(blobs)} blobs, "
          f"density range [{grid.header.dmin:.4g}, {grid.header.dmax:.4g}]")
    return 0


def cmd_fetch(args):
    number = parse_accession(args.accession)
    output = args.output or f"emd_{number}.map"
    grid = fetch_map(args.accession, output, progress=not args.quiet)
    print(f"Saved {args.accession} to {output} ({grid.dims[0]}x{grid.dims[1]}x{grid.dims[2]})")
    return 0


def cmd_info(args):
    _require_files([args.input])
    grid = load_mrc(args.input, strict_magic=False)
    summary = describe(grid)
    print(f"File: {args.input}")
    for key, value in summary.items():
        print(f"  {key}: {value}")
    occ, meta = threshold_and_map(grid, args.threshold)
    print(f"  occupied (> {args.threshold:g}): {occ.popcount} of {occ.n_voxels} "
          f"({100.0 * occ.popcount / occ.n_voxels:.2f}%)")
    if meta.density_scale is not None:
        print(f"  density scale: {meta.density_scale:.6g}")
    if summary['negative_fraction'] > 0.5:
        print("  note: most densities are negative; consider a different threshold")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = CliParser(prog='cryoinr', description=APP_SETTINGS['app_title'], formatter_class=fmt)
    parser.add_argument('--log-level', default=LOG_CONFIG['log_level'],
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], help='logging level')
    parser.add_argument('--log-file', default=LOG_CONFIG['log_file'], help='also log to this rotating file')
    parser.add_argument('--quiet', action='store_true', help='hide progress bars')
    sub = parser.add_subparsers(dest='command', required=True, parser_class=CliParser)

    p = sub.add_parser('compress', help='compress MRC maps into one archive', formatter_class=fmt)
    p.add_argument('inputs', nargs='+', help='input MRC files')
    p.add_argument('-o', '--output', default=None,
                   help='archive path (default: first input with a .cemz suffix)')
    p.add_argument('--threshold', type=float, default=PREPROCESS_CONFIG['threshold'],
                   help='keep voxels with density strictly above this')
    p.add_argument('--epochs', type=positive_int, default=TRAIN_DEFAULTS['epochs'], help='training epochs')
    p.add_argument('--lr', type=positive_float, default=TRAIN_DEFAULTS['learning_rate'], help='learning rate')
    p.add_argument('--lr-decay', type=positive_float, default=TRAIN_DEFAULTS['lr_decay'],
                   help='per-epoch learning-rate factor')
    p.add_argument('--lr-final', type=positive_float, default=TRAIN_DEFAULTS['lr_final'],
                   help='decay exponentially from --lr to this rate over the epochs')
    p.add_argument('--batch', type=positive_int, default=TRAIN_DEFAULTS['batch_size'], help='batch size')
    p.add_argument('--chunk-size', type=positive_int, default=TRAIN_DEFAULTS['chunk_size'],
                   help='points per on-disk chunk')
    p.add_argument('--patience', type=positive_int, default=TRAIN_DEFAULTS['early_stop_patience'],
                   help='early-stop patience in epochs')
    p.add_argument('--validation-fraction', type=positive_float,
                   default=TRAIN_DEFAULTS['validation_fraction'], help='share of points held out')
    p.add_argument('--seed', type=int, default=None,
                   help=f"random seed (falls back to $CRYOINR_SEED, then {TRAIN_DEFAULTS['seed']})")
    p.add_argument('--arch', default=TRAIN_DEFAULTS['profile'],
                   help=f"architecture profile ({', '.join(ARCH_PROFILES)}) or explicit chain")
    p.add_argument('--value-mean', choices=['batch', 'chunk'], default=TRAIN_DEFAULTS['value_mean_scope'],
                   help='scope of the mean |y| in the value weights')
    p.add_argument('--frequencies', type=positive_int, default=ENCODING_CONFIG['num_frequencies'],
                   help='positional-encoding frequencies per axis')
    p.add_argument('--latent-dim', type=positive_int, default=ENCODING_CONFIG['latent_dim'],
                   help='length of each per-file latent vector')
    p.add_argument('--log', default=None, help='training log CSV (default: <output>.log.csv)')
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser('decompress', help='reconstruct MRC maps from an archive', formatter_class=fmt)
    p.add_argument('archive', help='archive path')
    p.add_argument('-o', '--output', default='.', help='output directory')
    p.add_argument('--file', action='append', help='only this file (repeatable)')
    p.add_argument('--chunk-size', type=positive_int, default=None,
                   help='points per inference chunk (default: as stored)')
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser('evaluate', help='banded error report for a reconstruction', formatter_class=fmt)
    p.add_argument('original', help='original MRC map')
    p.add_argument('reconstructed', help='reconstructed MRC map')
    p.add_argument('--threshold', type=float, default=PREPROCESS_CONFIG['threshold'],
                   help='evaluate voxels with original density strictly above this')
    p.add_argument('--bands', type=band_list, default=METRICS_CONFIG['band_edges'],
                   help='comma-separated band edges in map units')
    p.add_argument('--csv', default=None, help='also write the report as CSV')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('synth', help='write a synthetic Gaussian-blob map', formatter_class=fmt)
    p.add_argument('--shape', type=shape_arg, default=(64, 64, 64), help='N or NX,NY,NZ')
    p.add_argument('--blobs', type=positive_int, default=8, help='number of Gaussian blobs')
    p.add_argument('--seed', type=int, default=None, help='random seed (falls back to $CRYOINR_SEED)')
    p.add_argument('--noise', type=float, default=0.0, help='additive Gaussian noise sigma')
    p.add_argument('-o', '--output', required=True, help='output MRC path')
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('fetch', help='download a public map from EMDB', formatter_class=fmt)
    p.add_argument('accession', help='EMD-NNNN')
    p.add_argument('-o', '--output', default=None, help='output path (default: emd_NNNN.map)')
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser('info', help='header and density summary of an MRC file', formatter_class=fmt)
    p.add_argument('input', help='MRC map')
    p.add_argument('--threshold', type=float, default=PREPROCESS_CONFIG['threshold'],
                   help='count voxels with density strictly above this')
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level, args.log_file)
    try:
        return args.func(args)
    except CryoInrError as e:
        print(f"Error: {e}", file=sys.stderr)
        logger.debug("Traceback", exc_info=True)
        return e.exit_code
    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
