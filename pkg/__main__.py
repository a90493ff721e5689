# -*- coding: UTF-8 -*-
import sys

from covadj.cli import main

# run as
# curdir:$ python __main__.py analyze --input trial.csv --adjust bicm --debug

if __name__ == "__main__":
    sys.exit(main())
