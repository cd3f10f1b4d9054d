import sys

from bellch.cli import main

sys.exit(main())
