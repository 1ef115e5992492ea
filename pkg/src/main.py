import sys
import logging
import argparse


def handle_exception(exc_type, exc_value, exc_traceback):
    """Log uncaught exceptions instead of printing a bare traceback"""
    if issubclass(exc_type, KeyboardInterrupt):
        sys.__excepthook__(exc_type, exc_value, exc_traceback)
        return

    if issubclass(exc_type, RecursionError):
        logging.error("Recursion error detected. Application will exit.")
    else:
        logging.error(f"An unexpected error occurred: {exc_value}", exc_info=(exc_type, exc_value, exc_traceback))


def build_parser():
    from cli import COMMANDS

    parser = argparse.ArgumentParser(
        prog="run_app.py",
        description="American option obstacle solver, balance-equation verifier and exact Snell tree checks")
    parser.add_argument('command', choices=COMMANDS, help="What to run")
    parser.add_argument('--config', default=None, help="Run configuration (JSON); defaults to configs/reference_put.json")
    parser.add_argument('--out', default=None, help="Output directory; overrides [output] directory")
    parser.add_argument('--quiet', action='store_true', help="Only log warnings and errors")
    parser.add_argument('--recalibrate', action='store_true',
                        help="Regenerate golden files from this run (refused under CI)")
    return parser


def main(argv=None):
    """Main application entry point; returns the process exit code"""
    args = build_parser().parse_args(argv)

    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format='%(message)s',
        handlers=[logging.StreamHandler()]
    )

    sys.excepthook = handle_exception

    from cli import BalanceApp
    app = BalanceApp(config_path=args.config, out_dir=args.out, quiet=args.quiet, recalibrate=args.recalibrate)
    return app.run(args.command)


if __name__ == "__main__":
    sys.exit(main())
