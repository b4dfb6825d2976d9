"""Malloc tuning for the quadratic-cost hot loops.

The backward update allocates and frees same-sized multi-megabyte
temporaries every step. Stock glibc both mmaps such blocks and trims the
heap on free, so every step pays fresh page faults; raising the mmap and
trim thresholds keeps the buffers cached in the arena. No effect on
platforms without glibc's mallopt.
"""

from __future__ import annotations

import ctypes

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_THRESHOLD_BYTES = 64 * 1024 * 1024


def tune_malloc() -> bool:
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, _THRESHOLD_BYTES)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, _THRESHOLD_BYTES)
        return bool(ok)
    except (OSError, AttributeError):
        return False


tune_malloc()
