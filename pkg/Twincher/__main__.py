import sys
from Twincher.cli import run

sys.exit(run())
