from __future__ import annotations

import functools
import sys
from typing import Callable, Optional

import click

from . import __version__, log
from .configer import RunConfig, load_run_config
from .consts import STRATEGY_SOURCES, TRAIN_TARGETS, ExitCodes
from .exceptions import SteerDialError

LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')
_HELP_ERRORS = (click.exceptions.NoArgsIsHelpError,) if hasattr(click.exceptions, 'NoArgsIsHelpError') else ()


def handle_errors(func: Callable) -> Callable:
    """Map steerdial errors to a single `error: CODE: message` line on stderr and the error's exit code"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except SteerDialError as e:
            message = ' '.join(str(e).split())
            click.echo(f'error: {e.code}: {message}', err=True)
            click.get_current_context().exit(e.exit_code)
        except KeyboardInterrupt:
            click.echo('error: INTERRUPTED: aborted by user', err=True)
            click.get_current_context().exit(ExitCodes.USAGE)
    return wrapper


def run_options(func: Callable) -> Callable:
    """Options shared by every run command. Flags override the config file"""
    options = [
        click.option('--config', 'config_path', required=True, type=click.Path(dir_okay=False),
                     help='Run config (YAML or JSON)'),
        click.option('--seed', type=int, default=None, help='Global seed'),
        click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None, help='Output directory'),
        click.option('--threads', type=click.IntRange(min=1), default=None, help='Torch intra-op threads'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def decoding_options(func: Callable) -> Callable:
    options = [
        click.option('--strategy-source', type=click.Choice(STRATEGY_SOURCES), default=None,
                     help='Where the conditioning strategy comes from'),
        click.option('--fudge/--no-fudge', default=None, help='Steer decoding with the discriminator'),
        click.option('--lambda', 'control_lambda', type=click.FloatRange(min=0), default=None,
                     help='Control strength for --fudge'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def load_config(config_path: str, **overrides) -> RunConfig:
    config = load_run_config(config_path, overrides)
    log.get_logger().debug(f'Loaded config {config.config_path}, output to {config.out_dir}')
    return config


class SteerDialGroup(click.Group):
    """Click group that reports usage errors as one `error: USAGE: message` line on stderr"""
    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        if not standalone_mode:
            return super().main(args, prog_name, complete_var, standalone_mode, **extra)
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except _HELP_ERRORS as e:
            e.show()
            sys.exit(e.exit_code)
        except click.UsageError as e:
            click.echo(f'error: USAGE: {" ".join(e.format_message().split())}', err=True)
            sys.exit(ExitCodes.USAGE)
        except click.ClickException as e:
            e.show()
            sys.exit(e.exit_code)
        except click.Abort:
            click.echo('error: INTERRUPTED: aborted by user', err=True)
            sys.exit(ExitCodes.USAGE)
        sys.exit(rv if isinstance(rv, int) else 0)


@click.group(cls=SteerDialGroup, context_settings={'help_option_names': ['-h', '--help']})
@click.version_option(__version__, prog_name='steerdial')
@click.option('--log-level', type=click.Choice(LOG_LEVELS, case_sensitive=False), default='INFO',
              show_default=True)
def cli(log_level: str):
    """Strategy-controllable empathetic dialogue generation"""
    log.get_logger(level=log_level.upper())
    log.set_level(log_level.upper())


@cli.command()
@run_options
@handle_errors
def prepare(config_path: str, seed: Optional[int], out_dir: Optional[str], threads: Optional[int]):
    """Build the vocabulary and the tokenized examples"""
    from .pipeline import cmd_prepare
    cmd_prepare(load_config(config_path, seed=seed, out_dir=out_dir, threads=threads))


@cli.command()
@click.argument('target', type=click.Choice(TRAIN_TARGETS))
@run_options
@handle_errors
def train(target: str, config_path: str, seed: Optional[int], out_dir: Optional[str], threads: Optional[int]):
    """Train one component: lm, lm_joint, classifier or discriminator"""
    from .pipeline import cmd_train
    click.echo(cmd_train(load_config(config_path, seed=seed, out_dir=out_dir, threads=threads), target))


@cli.command()
@run_options
@decoding_options
@handle_errors
def generate(config_path: str, seed: Optional[int], out_dir: Optional[str], threads: Optional[int],
             strategy_source: Optional[str], fudge: Optional[bool], control_lambda: Optional[float]):
    """Generate a response for every helper turn of the test split"""
    from .pipeline import cmd_generate
    config = load_config(config_path, seed=seed, out_dir=out_dir, threads=threads, strategy_source=strategy_source,
                         fudge=fudge, control_lambda=control_lambda)
    click.echo(cmd_generate(config))


@cli.command()
@click.argument('generation_file', required=False, type=click.Path(dir_okay=False))
@run_options
@decoding_options
@handle_errors
def evaluate(generation_file: Optional[str], config_path: str, seed: Optional[int], out_dir: Optional[str],
             threads: Optional[int], strategy_source: Optional[str], fudge: Optional[bool],
             control_lambda: Optional[float]):
    """Score a generation file. Defaults to the file generate writes for the same flags"""
    from .pipeline import cmd_evaluate
    config = load_config(config_path, seed=seed, out_dir=out_dir, threads=threads, strategy_source=strategy_source,
                         fudge=fudge, control_lambda=control_lambda)
    click.echo(cmd_evaluate(config, generation_file))


@cli.command()
@run_options
@decoding_options
@handle_errors
def chat(config_path: str, seed: Optional[int], out_dir: Optional[str], threads: Optional[int],
         strategy_source: Optional[str], fudge: Optional[bool], control_lambda: Optional[float]):
    """Talk to the trained model. `/strategy <name>` sets the next strategy, `/quit` exits"""
    from .pipeline import cmd_chat
    config = load_config(config_path, seed=seed, out_dir=out_dir, threads=threads, strategy_source=strategy_source,
                         fudge=fudge, control_lambda=control_lambda)
    cmd_chat(config, click.get_text_stream('stdin'), click.echo)


@cli.command()
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False), help='Destination directory')
@click.option('--seed', type=int, default=13, show_default=True, help='Corpus seed')
@click.option('--dialogues', type=click.IntRange(min=10), default=200, show_default=True)
@handle_errors
def fixture(out_dir: str, seed: int, dialogues: int):
    """Write the synthetic marker corpus with its commonsense cache and config"""
    from .fixtures import generate_fixture
    paths = generate_fixture(out_dir, seed=seed, dialogues=dialogues)
    click.echo(paths['config'])
