import sys

from lib.fqte.cli import main

sys.exit(main())
