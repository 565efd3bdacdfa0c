"""The ``deqmd`` command line.

.. code-block:: bash

    deqmd <simulate|train|reconstruct|evaluate|benchmark> --config <path> [--checkpoint <path>] [--out <dir>]
        [--seed <u64>] [--force]

Exit status is 0 on success and 2 when the library reports a problem (bad configuration, missing checkpoint, a failed
solve). The log level comes from ``DEQMD_LOG_LEVEL`` (default ``INFO``).
"""

import argparse
import logging
import sys

from deqmd.errors import DeqMdError
from deqmd.harness import (
    ExperimentProject,
    cmd_benchmark,
    cmd_evaluate,
    cmd_reconstruct,
    cmd_simulate,
    cmd_train,
)
from os import environ


log = logging.getLogger(__name__)

COMMANDS = {
    'simulate': lambda project, args: cmd_simulate(project),
    'train': lambda project, args: cmd_train(project),
    'reconstruct': lambda project, args: cmd_reconstruct(project, args.checkpoint),
    'evaluate': lambda project, args: cmd_evaluate(project, args.checkpoint),
    'benchmark': lambda project, args: cmd_benchmark(project),
}


def _seed(value: str) -> int:
    seed = int(value)
    if not 0 <= seed < 2**64:
        raise argparse.ArgumentTypeError(f'{value} is not a 64-bit unsigned integer')
    return seed


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='deqmd', description='Poisson deblurring with mirror descent and learned regularizers'
    )
    parser.add_argument('command', choices=list(COMMANDS), help='what to run')
    parser.add_argument('--config', required=True, help='experiment configuration file (YAML)')
    parser.add_argument('--checkpoint', default=None, help='learned parameters for reconstruct and evaluate')
    parser.add_argument('--out', default=None, help='output directory, overriding output_dir from the config')
    parser.add_argument('--seed', type=_seed, default=None, help='root seed, overriding seed from the config')
    parser.add_argument('--force', action='store_true', help='write into an output directory that already has results')
    return parser


def main(argv: list[str] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=environ.get('DEQMD_LOG_LEVEL', 'INFO').upper(),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    project = ExperimentProject(args.config, output_dir=args.out, seed=args.seed, force=args.force)
    try:
        result = COMMANDS[args.command](project, args)
    except (DeqMdError, OSError) as ex:
        print(f'deqmd: error: {ex}', file=sys.stderr)
        return 2
    log.info(f'{args.command} finished: {result}')
    return 0


if __name__ == '__main__':
    sys.exit(main())
