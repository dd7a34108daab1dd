"""
Main entry point for the AUIF command-line tool.

    python run_auif.py train --config runs/desk.cfg
"""
import sys

from dotenv import load_dotenv

# Load environment variables before settings are read
load_dotenv()


def main() -> int:
    """Configure logging and dispatch one command."""
    from auif.cli import cli_dispatch
    from auif.core.logging_config import setup_logging

    setup_logging()
    return cli_dispatch(sys.argv[1:])


if __name__ == '__main__':
    sys.exit(main())
