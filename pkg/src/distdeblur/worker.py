"""Worker process for the socket backend: ``python -m distdeblur.worker HOST PORT``."""

import sys

from .consensus import socket_worker_main


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 2:
        print("usage: python -m distdeblur.worker HOST PORT", file=sys.stderr)
        return 2
    socket_worker_main(argv[0], int(argv[1]))
    return 0


if __name__ == "__main__":
    sys.exit(main())
