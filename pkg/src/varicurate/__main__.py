"""python -m varicurate delegates to the CLI."""

from .cli import main

main()
