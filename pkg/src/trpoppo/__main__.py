import sys

from trpoppo.cli import main

sys.exit(main())
