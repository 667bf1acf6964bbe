"""
    bnexpand
    ~~~~~~~~

    Command-line entry point::

        $ python -m bnexpand inspect --spec cifar_resnet
        layer                  kind    M  ...

    :copyright: (c) 2026 by bnexpand authors and contributors.
    :license: LGPL, see LICENSE for more details.
"""

if __name__ == "__main__":
    import sys

    from bnexpand.cli import main

    sys.exit(main())
