import sys

from coat.cli import main

sys.exit(main())
