import sys

from voxinit.cli import main

sys.exit(main())
