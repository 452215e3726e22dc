import sys

from sandbox_runner import cli

if __name__ == "__main__":
    sys.exit(cli())
