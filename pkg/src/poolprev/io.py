"""Atomic file output and number formatting shared by the CLI and model artifacts."""

from __future__ import annotations

import os
import tempfile


def atomic_write(path, text: str):
    """Write ``text`` to ``path`` via a temporary file in the same directory.

    The destination either keeps its old contents or receives the complete
    new contents; a failure part-way never leaves a truncated file.
    """
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt9(x) -> str:
    """CSV number formatting: 9 significant digits."""
    return "%.9g" % x
