import sys

from cbrl.harness.cli import main

sys.exit(main())
