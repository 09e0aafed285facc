import sys

from fewdomain.cli import main

sys.exit(main())
