import logging
import sys

import click

from config import Config

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def configure_logging(level: str = None):
    """Configure root logging once, on standard error"""
    level = (level or Config.LOG_LEVEL).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT, stream=sys.stderr, force=True)


def create_cli():
    """Command-line application factory"""

    @click.group()
    @click.option('--log-level', default=None, help='Logging level (default from DTLC_LOG_LEVEL or INFO)')
    def cli(log_level):
        """Hierarchical latent-code GAN toolkit"""
        configure_logging(log_level)

    from cli_commands import register_commands
    register_commands(cli)
    return cli
