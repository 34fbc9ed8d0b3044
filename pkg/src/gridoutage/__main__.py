import sys

from gridoutage.cli import main

sys.exit(main())
