"""Select the compiled kernels when available, else the numpy fallback."""

import logging
import os

logger = logging.getLogger(__name__)

if os.environ.get("KBGNN_PURE_PYTHON"):
    from . import _pycore as _impl

    NAME = "python"
else:
    try:
        from . import _core as _impl

        NAME = "cython"
    except ImportError:  # extension not built
        from . import _pycore as _impl

        NAME = "python"
        logger.debug("kbgnn._core not built; using pure-Python kernels")

radius_pairs = _impl.radius_pairs
seq_graph_batch = _impl.seq_graph_batch
