import sys

from fedul_sim.cli import main

sys.exit(main())
