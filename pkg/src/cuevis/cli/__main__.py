import sys

from cuevis.cli import main

sys.exit(main())
