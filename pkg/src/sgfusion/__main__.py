import sys

from sgfusion.cli import main

sys.exit(main())
