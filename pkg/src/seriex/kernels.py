"""Backend selection for the hot kernels.

The compiled extension is used when it imports; set ``SERIEX_PURE_PYTHON=1``
to force the numpy fallback. ``BACKEND`` names the active one.
"""
import os

from . import _pykernels

python = _pykernels

if os.environ.get("SERIEX_PURE_PYTHON", "") not in ("", "0"):
    compiled = None
else:
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else python
BACKEND = "cython" if compiled is not None else "python"

gemm_i8 = _impl.gemm_i8
pack_bits = _impl.pack_bits
unpack_bits = _impl.unpack_bits
