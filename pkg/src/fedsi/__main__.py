import sys

from fedsi.cli import main

sys.exit(main())
