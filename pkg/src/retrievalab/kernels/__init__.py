"""Hot-kernel dispatch: compiled extension when built, numpy reference otherwise.

``BACKEND`` names the active implementation ("compiled" or "python").  Both
backends share the same contracts; ``benchmarks/bench_kernels.py`` compares
their throughput side by side.
"""
from retrievalab.kernels import _pyref

try:
    from retrievalab.kernels import _core as _impl

    BACKEND = "compiled"
except ImportError:
    _impl = _pyref
    BACKEND = "python"

fnv1a64 = _impl.fnv1a64
hash_buckets = _impl.hash_buckets
mean_pool = _impl.mean_pool
topk_dot = _impl.topk_dot

__all__ = ["BACKEND", "fnv1a64", "hash_buckets", "mean_pool", "topk_dot"]
