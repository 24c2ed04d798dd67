"""Atomic artifact writes and the build version string.

Every report artifact embeds the resolved config and this version string;
writes go to a temp file in the target directory followed by an atomic
rename, so failed commands never leave partial artifacts behind.
"""

from __future__ import annotations

import os
import subprocess
import tempfile
from pathlib import Path

__version__ = "0.1.0"

_build_version_cache = None


def build_version() -> str:
    """``git describe`` of the working tree when available, else the
    package version."""
    global _build_version_cache
    if _build_version_cache is None:
        try:
            out = subprocess.run(
                ["git", "describe", "--always", "--dirty"],
                cwd=Path(__file__).resolve().parent,
                capture_output=True, text=True, timeout=5,
            )
            described = out.stdout.strip()
        except (OSError, subprocess.SubprocessError):
            described = ""
        _build_version_cache = f"drvec-{__version__}" + (f"+{described}" if described else "")
    return _build_version_cache


def write_atomic(path, data) -> None:
    """Write bytes or text to ``path`` via temp-file + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise
