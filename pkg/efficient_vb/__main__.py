import sys

from efficient_vb.cli import main

sys.exit(main())
