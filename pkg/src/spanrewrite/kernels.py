"""Backend selection for the dynamic-programming kernels.

The compiled extension is used when it imports cleanly; otherwise the
pure-Python module is used. Set ``SPANREWRITE_PURE=1`` to force the fallback.
"""

import os

from . import _kernels_py as pure

MATCH = pure.MATCH
SUBSTITUTE = pure.SUBSTITUTE
DELETE = pure.DELETE
INSERT = pure.INSERT

compiled = None
if not os.environ.get("SPANREWRITE_PURE"):
    try:
        from . import _kernels as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else pure
BACKEND = "cython" if compiled is not None else "python"

levenshtein = _impl.levenshtein
edit_ops = _impl.edit_ops
lcs_length = _impl.lcs_length
