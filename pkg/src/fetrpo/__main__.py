import sys

from fetrpo.cli import main

sys.exit(main())
