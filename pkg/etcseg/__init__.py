import logging
import sys

import click

from etcseg.config import Config


def create_cli(config_name=None):
    """CLI factory pattern"""
    if config_name is None:
        config_name = Config.PROFILE

    # Logs go to stderr so stdout carries only command results
    logging.basicConfig(level=getattr(logging, Config.LOG_LEVEL, logging.INFO), stream=sys.stderr,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')

    from etcseg.middleware.error_handler import EtcGroup

    @click.group(cls=EtcGroup, help="Evidential tri-branch semi-supervised segmentation.")
    @click.pass_context
    def cli(ctx):
        ctx.ensure_object(dict)
        ctx.obj['profile'] = config_name

    # Register subcommands
    from etcseg.routes.cli_routes import register_routes
    register_routes(cli)

    return cli
