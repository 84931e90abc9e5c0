import sys

from hybridrag.cli import main

sys.exit(main())
