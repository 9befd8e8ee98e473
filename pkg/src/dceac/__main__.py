import sys

from dceac.cli import main

sys.exit(main())
