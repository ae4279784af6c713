import sys
import faulthandler
import traceback

from src.cli import main as cli_main


def main():
    # Crash/exception diagnostics: dump tracebacks on fatal errors and uncaught exceptions
    if sys.stderr is not None:
        try:
            faulthandler.enable(all_threads=True)
        except Exception:
            pass

    def log_exception(exc_type, exc_value, exc_tb):
        if sys.stderr is not None:
            print("[FATAL] Unhandled exception:", exc_type.__name__, exc_value, file=sys.stderr)
            traceback.print_exception(exc_type, exc_value, exc_tb)

    sys.excepthook = log_exception

    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
