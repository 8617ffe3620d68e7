"""Chunked execution of range kernels over a thread pool.

Kernels release the GIL and write only their own output rows, so the result
is identical for any thread count.
"""

import os
from concurrent.futures import ThreadPoolExecutor

_default_threads = 1


def set_threads(n):
    global _default_threads
    _default_threads = max(1, int(n))


def get_threads():
    return _default_threads


def run_ranges(kernel, n, *args, threads=None, chunk=256):
    """Call ``kernel(start, end, *args)`` over [0, n) in chunks."""
    threads = get_threads() if threads is None else max(1, int(threads))
    if n <= 0:
        return
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if threads == 1 or len(bounds) == 1:
        for s, e in bounds:
            kernel(s, e, *args)
        return
    with ThreadPoolExecutor(max_workers=min(threads, len(bounds), os.cpu_count() * 8 or 8)) as pool:
        list(pool.map(lambda b: kernel(b[0], b[1], *args), bounds))
