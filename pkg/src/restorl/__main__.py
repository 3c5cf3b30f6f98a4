import sys

from restorl.cli import main

sys.exit(main())
