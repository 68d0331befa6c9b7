"""Process-wide runtime knobs: thread caps and deterministic sequential mode.

The environment variable DOODLERANK_THREADS caps internal parallelism for
both BLAS kernels and the retrieval shard pool. A value of 0 selects fully
sequential kernels, which is the documented reproducibility mode: identical
inputs then produce byte-identical outputs across runs.
"""

from __future__ import annotations

import os

THREADS_ENV_VAR = "DOODLERANK_THREADS"

_thread_cap: int | None = None
_blas_limiter = None


def thread_cap() -> int | None:
    """Current thread cap; None means the library default (unlimited)."""
    return _thread_cap


def worker_count() -> int:
    """Number of workers the shard pool should use (at least 1)."""
    if _thread_cap is None:
        return max(os.cpu_count() or 1, 1)
    return max(_thread_cap, 1)


def sequential_mode() -> bool:
    """True when the cap forces single-threaded, deterministic kernels."""
    return _thread_cap is not None and _thread_cap <= 1


def configure_threads(n: int | None) -> None:
    """Cap internal parallelism to ``n`` threads (0 means sequential).

    Applies to BLAS pools via threadpoolctl and to the retrieval shard
    executor. Passing None removes the cap.
    """
    global _thread_cap, _blas_limiter
    if _blas_limiter is not None:
        _blas_limiter.restore_original_limits()
        _blas_limiter = None
    if n is None:
        _thread_cap = None
        return
    if n < 0:
        raise ValueError(f"thread cap must be >= 0, got {n}")
    _thread_cap = n
    import threadpoolctl

    _blas_limiter = threadpoolctl.threadpool_limits(limits=max(n, 1))


def configure_from_env() -> None:
    """Apply DOODLERANK_THREADS if set; leave defaults otherwise."""
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from exc
    configure_threads(n)
