import sys

from binfda.cli import main

sys.exit(main())
