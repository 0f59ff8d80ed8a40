"""Load generated kernel modules from an on-disk cache directory.

Generated sources are written as ordinary ``.py`` files so numba's
``cache=True`` can persist compiled code between processes.  A file is
only rewritten when its content changes, which keeps numba's cache valid.
"""

from __future__ import annotations

import hashlib
import importlib.util
import os
import sys
import tempfile
import threading
from pathlib import Path
from types import ModuleType

_lock = threading.Lock()
_loaded: dict[str, ModuleType] = {}


def cache_dir() -> Path:
    root = os.environ.get("TILEKIT_KERNEL_CACHE")
    if root:
        path = Path(root)
    else:
        base = os.environ.get("XDG_CACHE_HOME") or os.path.join(os.path.expanduser("~"), ".cache")
        path = Path(base) / "tilekit" / "kernels"
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError:
        path = Path(tempfile.gettempdir()) / f"tilekit-kernels-{os.getuid()}"
        path.mkdir(parents=True, exist_ok=True)
    return path


def load_generated(stem: str, source: str) -> ModuleType:
    """Import ``source`` as a module named after ``stem`` and a content hash."""
    digest = hashlib.sha1(source.encode()).hexdigest()[:12]
    modname = f"_tilekit_gen_{stem}_{digest}"
    with _lock:
        if modname in _loaded:
            return _loaded[modname]
        path = cache_dir() / f"{modname}.py"
        if not path.exists() or path.read_text() != source:
            tmp = path.with_suffix(f".{os.getpid()}.tmp")
            tmp.write_text(source)
            os.replace(tmp, path)
        spec = importlib.util.spec_from_file_location(modname, path)
        module = importlib.util.module_from_spec(spec)
        sys.modules[modname] = module
        spec.loader.exec_module(module)
        _loaded[modname] = module
        return module
