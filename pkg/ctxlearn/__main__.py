import sys

from ctxlearn.harness.cli import main

sys.exit(main())
