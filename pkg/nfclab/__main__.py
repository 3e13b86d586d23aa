import sys

from nfclab._cli import cli_main

sys.exit(cli_main())
