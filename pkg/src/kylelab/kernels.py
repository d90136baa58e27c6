"""Kernel dispatch: compiled extension when available, numpy otherwise.

Set ``KYLELAB_PURE_PYTHON=1`` before import to force the numpy fallback.
"""
import os

from kylelab import _fallback

COMPILED = False
_impl = _fallback
if os.environ.get("KYLELAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from kylelab import _kernels as _impl  # type: ignore[no-redef]

        COMPILED = True
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _fallback

BACKEND = "compiled" if COMPILED else "numpy"

mixture_log_quantile = _impl.mixture_log_quantile
transport_h = _impl.transport_h
gh_moments = _impl.gh_moments
cir_euler = _impl.cir_euler
volterra_cir = _impl.volterra_cir
holder_pairs = _impl.holder_pairs

KIND_NORMAL = _fallback.KIND_NORMAL
KIND_LOGNORMAL = _fallback.KIND_LOGNORMAL
KIND_MIXTURE = _fallback.KIND_MIXTURE
