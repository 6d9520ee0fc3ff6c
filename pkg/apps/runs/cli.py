"""
Command-line entry point.

``manage.py <subcommand> ...`` runs a pipeline subcommand and returns its
exit status: 0 on success, 2 for usage errors, 3 for invalid input and 1 for
any other pipeline failure. Django's own commands (``migrate``, ``test``,
...) pass straight through.
"""
import sys
from importlib import import_module

from django.core.management import execute_from_command_line, get_commands
from django.core.management.base import CommandError

from apps.core.exceptions import MotionTransferError

# subcommand -> management command module in apps.runs
COMMANDS = {
    'synth-data': 'synth_data',
    'recaption': 'recaption',
    'train-appearance': 'train_appearance',
    'train-motion': 'train_motion',
    'generate': 'generate',
    'evaluate': 'evaluate',
    'export-backbone': 'export_backbone',
}

USAGE_STATUS = 2


def command_class(module):
    return import_module(f'apps.runs.management.commands.{module}').Command


def usage():
    lines = ["usage: manage.py <subcommand> [options]", "", "subcommands:"]
    for name, module in COMMANDS.items():
        lines.append(f"  {name:<18} {command_class(module).help}")
    lines.append("")
    lines.append("Run 'manage.py <subcommand> --help' for its options.")
    return '\n'.join(lines) + '\n'


def cli_dispatch(argv, stdout=None, stderr=None):
    """
    Run one subcommand.

    Parameters:
    - argv (list[str]): arguments after the program name.

    Returns:
    - int: the exit status.
    """
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    argv = list(argv)
    if not argv or argv[0] in ('-h', '--help', 'help'):
        (stdout if argv else stderr).write(usage())
        return 0 if argv else USAGE_STATUS
    name = argv[0].replace('_', '-') if argv[0] in COMMANDS.values() else argv[0]
    if name not in COMMANDS:
        if name not in get_commands():
            stderr.write(f"Unknown subcommand {name!r}\n\n{usage()}")
            return USAGE_STATUS
        execute_from_command_line(['manage.py', *argv])
        return 0

    command = command_class(COMMANDS[name])(stdout=stdout, stderr=stderr)
    parser = command.create_parser('manage.py', name)
    try:
        options = vars(parser.parse_args(argv[1:]))
    except CommandError as exc:
        stderr.write(f"{exc}\n")
        return USAGE_STATUS
    except SystemExit as exc:
        return exc.code or 0
    args = options.pop('args', ())
    try:
        command.execute(*args, **options)
    except CommandError as exc:
        stderr.write(f"{name}: {exc}\n")
        return USAGE_STATUS
    except MotionTransferError as exc:
        stderr.write(f"{name}: {type(exc).__name__}: {exc}\n")
        return exc.exit_status
    return 0
