"""Pure-Python versions of the compiled kernels in ``_core.pyx``.

Every function returns exactly what its compiled twin returns, so either
backend can be used interchangeably (see ``memhomog.kernels``).
"""

from collections import deque

import numpy as np
from scipy import ndimage

_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)


def _canonical(raw, mask_flat):
    """Renumber labels 0..k-1 in order of first appearance (C order)."""
    flat = raw.reshape(-1)
    out = np.full(flat.shape, -1, dtype=np.int32)
    fg = np.flatnonzero(mask_flat)
    if fg.size == 0:
        return out, 0
    vals = flat[fg]
    uniq, first = np.unique(vals, return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.empty(uniq.max() + 1, dtype=np.int32)
    remap[uniq[order]] = np.arange(order.size, dtype=np.int32)
    out[fg] = remap[vals]
    return out, int(order.size)


def label_periodic(mask, periodic):
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    raw, nraw = ndimage.label(m, structure=_FACE_STRUCTURE)
    parent = np.arange(nraw + 1)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for ax in range(3):
        if not periodic[ax] or m.shape[ax] < 2:
            continue
        lo = np.take(raw, 0, axis=ax)
        hi = np.take(raw, m.shape[ax] - 1, axis=ax)
        both = (lo > 0) & (hi > 0)
        for a, b in zip(lo[both], hi[both]):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(nraw + 1)])
    merged = roots[raw]
    labels, count = _canonical(merged, m.reshape(-1) > 0)
    return labels.reshape(m.shape), count


def unwrap_shifts(mask, periodic):
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    dims = m.shape
    shift = np.zeros(dims + (3,), dtype=np.int32)
    visited = np.zeros(dims, dtype=bool)
    wraps = np.zeros(3, dtype=bool)
    for start in zip(*np.nonzero(m)):
        if visited[start]:
            continue
        visited[start] = True
        queue = deque([start])
        while queue:
            cur = queue.popleft()
            cs = shift[cur]
            for ax in range(3):
                for step in (-1, 1):
                    nb = list(cur)
                    ns = [int(cs[0]), int(cs[1]), int(cs[2])]
                    nb[ax] += step
                    if nb[ax] < 0 or nb[ax] >= dims[ax]:
                        if not periodic[ax] or dims[ax] < 2:
                            continue
                        if nb[ax] < 0:
                            nb[ax] = dims[ax] - 1
                            ns[ax] -= 1
                        else:
                            nb[ax] = 0
                            ns[ax] += 1
                    nb = tuple(nb)
                    if not m[nb]:
                        continue
                    if visited[nb]:
                        for q in range(3):
                            if shift[nb + (q,)] != ns[q]:
                                wraps[q] = True
                        continue
                    visited[nb] = True
                    shift[nb] = ns
                    queue.append(nb)
    return shift, wraps


def q1_scatter(conn, ke, ndof):
    conn = np.ascontiguousarray(conn, dtype=np.int64)
    ke = np.ascontiguousarray(ke, dtype=np.float64)
    ne, nv = conn.shape
    nde = nv * ndof
    dofs = (conn[:, :, None] * ndof + np.arange(ndof)[None, None, :]).reshape(ne, nde)
    rows = np.repeat(dofs, nde, axis=1).reshape(-1)
    cols = np.tile(dofs, (1, nde)).reshape(-1)
    vals = np.broadcast_to(ke, (ne, nde, nde)).reshape(-1).copy()
    return rows, cols, vals
