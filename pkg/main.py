import sys

from dmosapo.main import cli

if __name__ == "__main__":
    sys.exit(cli())
