# -*- coding: utf-8 -*-
"""Command line interface: ``mvlift <subcommand> [--config PATH] [--seed S] [--threads K] [--mode M]``.

Exit codes: 0 on success, 1 on a usage error, 2 when a stage fails.
"""
import argparse
import logging
import sys

import torch

from mvlift.base import MODES, MODE_FULL, MVLiftError
from mvlift.config import PipelineConfig
from mvlift.pipeline import Pipeline

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


class _ArgumentParser(argparse.ArgumentParser):
    """argparse parser reporting usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, '{}: error: {}\n'.format(self.prog, message))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-c', '--config', help='INI configuration overlaid on the defaults')
    common.add_argument('--seed', type=int, help='Override run.seed (and the training and Stage-2 seeds)')
    common.add_argument('--threads', type=int, help='Worker processes for per-sequence work')
    common.add_argument('-v', '--verbose', action='store_true', help='Log at DEBUG level')

    parser = _ArgumentParser(prog='mvlift', description='Lift single-view 2D pose sequences to global 3D motion.')
    commands = parser.add_subparsers(dest='command', metavar='subcommand', parser_class=_ArgumentParser)
    commands.required = True

    commands.add_parser('gen-synth', parents=[common], help='Generate the synthetic 3D and 2D datasets')
    for name, what in (('train-lcdm', 'line-conditioned'), ('train-mvdm', 'multi-view')):
        sub = commands.add_parser(name, parents=[common], help='Train the {} denoiser'.format(what))
        sub.add_argument('--resume', action='store_true', help='Continue from the existing checkpoint')
    sub = commands.add_parser('optimize-mv', parents=[common], help='Stage 2: multi-view optimization')
    sub.add_argument('--sequence', help='Optimize only the training input with this id')
    commands.add_parser('build-mvdataset', parents=[common], help='Stage 3: strictly consistent multi-view dataset')
    for name, what in (('lift', 'Lift the held-out inputs to 3D'), ('eval', 'Score predictions and write reports')):
        sub = commands.add_parser(name, parents=[common], help=what)
        sub.add_argument('-m', '--mode', choices=MODES, default=MODE_FULL)
    sub = commands.add_parser('render', parents=[common], help='Plot the root trajectory of one prediction')
    sub.add_argument('sequence', help='Sequence id')
    sub.add_argument('-m', '--mode', choices=MODES, default=MODE_FULL)
    commands.add_parser('show-config', parents=[common], help='Print the complete configuration')
    return parser


def load_config(args):
    if args.config:
        config = PipelineConfig.from_file(args.config)
    else:
        config = PipelineConfig.default()
    return config.with_overrides(seed=args.seed, threads=args.threads)


def run(args, out=None):
    """Execute the parsed subcommand."""
    config = load_config(args)
    if args.command == 'show-config':
        (out or sys.stdout).write(config.to_text())
        return EXIT_OK
    pipeline = Pipeline(config)
    command = args.command
    if command == 'gen-synth':
        pipeline.gen_synth()
    elif command == 'train-lcdm':
        pipeline.train_lcdm(resume=args.resume)
    elif command == 'train-mvdm':
        pipeline.train_mvdm(resume=args.resume)
    elif command == 'optimize-mv':
        pipeline.optimize_mv(sequence=args.sequence)
    elif command == 'build-mvdataset':
        pipeline.build_mvdataset()
    elif command == 'lift':
        pipeline.lift(mode=args.mode)
    elif command == 'eval':
        pipeline.evaluate(mode=args.mode)
    elif command == 'render':
        pipeline.render(args.sequence, mode=args.mode)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    # intra-op threads change float accumulation order
    torch.set_num_threads(1)
    try:
        return run(args)
    except (MVLiftError, OSError) as error:
        sys.stderr.write('mvlift {}: {}\n'.format(args.command, error))
        logger.debug("stage failed", exc_info=True)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
