import sys

from sdareid.cli import main

sys.exit(main())
