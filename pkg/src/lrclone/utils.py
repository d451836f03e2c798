# src/lrclone/utils.py

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

import typer

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def fnv1a64(data: bytes | bytearray | memoryview, seed: int = FNV64_OFFSET) -> int:
    """64-bit FNV-1a; pass a previous result as `seed` to hash in chunks."""
    h = seed
    for byte in bytes(data):
        h = ((h ^ byte) * FNV64_PRIME) & _MASK64
    return h


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def write_atomic(path: Path, content: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        if isinstance(content, str):
            tmp.write_text(content, encoding="utf-8")
        else:
            tmp.write_bytes(content)
        tmp.replace(path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise OSError(f"failed writing {path}: {e}") from e


def configure_threads() -> int | None:
    """Export LRC_THREADS to the BLAS thread variables; must run before numpy is imported."""
    raw = os.environ.get("LRC_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        typer.secho(f"Ignoring LRC_THREADS={raw!r}: not an integer", fg=typer.colors.YELLOW)
        return None
    if n < 1:
        typer.secho(f"Ignoring LRC_THREADS={n}: must be >= 1", fg=typer.colors.YELLOW)
        return None
    for var in THREAD_ENV_VARS:
        os.environ[var] = str(n)
    return n


def require_deps() -> None:
    try:
        import numpy  # noqa: F401
    except ImportError:
        typer.secho("Missing dependency: numpy. Install with: pip install numpy", fg=typer.colors.RED)
        raise typer.Exit(1) from None

    try:
        import pydantic  # noqa: F401
    except ImportError:
        typer.secho("Missing dependency: pydantic. Install with: pip install pydantic", fg=typer.colors.RED)
        raise typer.Exit(1) from None


def require_yaml() -> None:
    try:
        import yaml  # noqa: F401
    except ImportError:
        typer.secho("Missing dependency: PyYAML. Install with: pip install pyyaml", fg=typer.colors.RED)
        raise typer.Exit(1) from None
