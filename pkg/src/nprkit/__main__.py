import sys

from nprkit.cli import main

sys.exit(main())
