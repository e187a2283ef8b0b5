import sys

from compgen.cli import main

sys.exit(main())
