import sys

from informed_dreamer.cli import main

sys.exit(main())
