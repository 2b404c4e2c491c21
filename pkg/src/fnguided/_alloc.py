"""glibc allocator tuning for the training loop.

Training allocates many multi-megabyte temporaries per step. By default
glibc serves those with fresh ``mmap`` calls and returns them on free, so
every step pays page faults for memory it just released. Raising the mmap
and trim thresholds keeps that memory in the heap for reuse.
"""

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3

_tuned = False


def tune_allocator(mmap_threshold=1 << 30, trim_threshold=1 << 31, top_pad=1 << 28):
    """Apply the thresholds once per process; returns True when applied."""
    global _tuned
    if _tuned:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    mallopt.argtypes = [ctypes.c_int, ctypes.c_int]
    mallopt.restype = ctypes.c_int
    ok = all(mallopt(param, min(value, 2**31 - 1)) == 1 for param, value in (
        (_M_MMAP_THRESHOLD, mmap_threshold),
        (_M_TRIM_THRESHOLD, trim_threshold),
        (_M_TOP_PAD, top_pad)))
    _tuned = ok
    return ok
