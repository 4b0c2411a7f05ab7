"""Backend selection for the loop-bound kernels.

The compiled extension is used when it was built; otherwise the pure-Python
twin is imported.  Setting ``MEMHOMOG_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

if os.environ.get("MEMHOMOG_PURE_PYTHON", "") not in ("", "0"):
    from . import _pycore as _impl

    BACKEND = "python"
else:
    try:
        from . import _core as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        from . import _pycore as _impl

        BACKEND = "python"


def _as3d(mask):
    mask = mask.view(np.uint8) if mask.dtype == bool else mask
    if mask.ndim == 2:
        return mask[:, :, None]
    return mask


def label_periodic(mask, periodic):
    """Label face-connected components of ``mask`` (2D or 3D).

    ``periodic`` lists, per axis, whether the axis wraps around.  Labels are
    ``-1`` on background and ``0..count-1`` numbered by first appearance in
    C order.
    """
    m = _as3d(np.ascontiguousarray(mask))
    per = tuple(bool(p) for p in periodic) + (False,) * (3 - len(periodic))
    labels, count = _impl.label_periodic(m, per)
    return labels.reshape(mask.shape), int(count)


def unwrap_shifts(mask, periodic):
    """Per-voxel period shifts from a BFS over face neighbours, plus wrap flags."""
    m = _as3d(np.ascontiguousarray(mask))
    per = tuple(bool(p) for p in periodic) + (False,) * (3 - len(periodic))
    shift, wraps = _impl.unwrap_shifts(m, per)
    nd = mask.ndim
    return shift.reshape(mask.shape + (3,))[..., :nd], np.asarray(wraps[:nd], dtype=bool)


def q1_scatter(conn, ke, ncomp):
    """COO rows, cols, values of element matrices scattered onto global dofs.

    ``conn`` is the ``(ne, nv)`` vertex connectivity, ``ncomp`` the number of
    components per vertex (global dof ``vertex * ncomp + component``) and
    ``ke`` holds one ``(nv*ncomp)^2`` matrix per element, or a single shared one.
    """
    ke = np.asarray(ke, dtype=np.float64)
    if ke.ndim == 2:
        ke = ke[None]
    return _impl.q1_scatter(conn, ke, int(ncomp))

