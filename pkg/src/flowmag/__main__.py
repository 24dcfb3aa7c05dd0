"""Allow `python -m flowmag`."""

from .cli import main

main()
