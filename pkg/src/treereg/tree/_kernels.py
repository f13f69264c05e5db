"""Select the compiled CART kernels when available.

Set ``TREEREG_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _pytree

BACKEND = "python"
build_tree = _pytree.build_tree
apply_tree = _pytree.apply_tree

if not os.environ.get("TREEREG_PURE_PYTHON"):
    try:
        from . import _ctree
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        build_tree = _ctree.build_tree
        apply_tree = _ctree.apply_tree
