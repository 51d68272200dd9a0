from __future__ import annotations

from unicontext import cli


def main(name):
    if name == "__main__":
        cli.main()


main(__name__)
