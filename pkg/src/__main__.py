"""Allow running as `python -m src`."""
from .cli import main

main()
