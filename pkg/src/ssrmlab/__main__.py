import sys

from ssrmlab.cli import main

sys.exit(main())
