"""Backend selection for the block search kernel.

The compiled extension is used when it imports; set ``SCALELAB_PURE_PYTHON=1``
to force the NumPy fallback.  Both produce bitwise-identical results.
"""

import os

from . import _search_fallback

BACKEND = "python"
search_blocks = _search_fallback.search_blocks

if not os.environ.get("SCALELAB_PURE_PYTHON"):
    try:
        from ._search_kernel import search_blocks  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        pass

python_search_blocks = _search_fallback.search_blocks


def compiled_search_blocks():
    """The compiled kernel, or None when it is not available."""
    try:
        from ._search_kernel import search_blocks as fn
    except ImportError:
        return None
    return fn
