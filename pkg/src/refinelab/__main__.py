import sys

from refinelab.cli import main

sys.exit(main())
