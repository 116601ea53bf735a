import sys

from _common import main

if __name__ == "__main__":
    sys.exit(main("clustering"))
