import sys

from rads.harness.cli import main

sys.exit(main())
