import sys

from rankseg.cli import main

sys.exit(main())
