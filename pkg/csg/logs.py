"""Logging setup: a rich handler on stderr, level from CSG_LOG."""

import logging
import os
from typing import Optional

from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler

DEFAULT_LEVEL = "INFO"

_configured = False


def configure_logging(level: Optional[str] = None, force: bool = False) -> int:
    """Install the rich handler on the ``csg`` logger and return the effective level."""
    global _configured
    load_dotenv()

    name = (level or os.getenv("CSG_LOG") or DEFAULT_LEVEL).upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        numeric = logging.INFO

    root = logging.getLogger("csg")
    if _configured and not force:
        root.setLevel(numeric)
        return numeric

    for handler in list(root.handlers):
        root.removeHandler(handler)

    handler = RichHandler(
        console=Console(stderr=True),
        show_path=False,
        rich_tracebacks=False,
        log_time_format="[%X]",
    )
    handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(numeric)
    root.propagate = False
    _configured = True
    return numeric
