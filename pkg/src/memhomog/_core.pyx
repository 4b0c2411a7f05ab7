# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels.  Outputs are bit-identical to the ones in ``_pycore``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t i) noexcept nogil:
    cdef Py_ssize_t r = i
    while parent[r] != r:
        r = parent[r]
    cdef Py_ssize_t nxt
    while parent[i] != r:
        nxt = parent[i]
        parent[i] = r
        i = nxt
    return r


cdef void _union(Py_ssize_t[::1] parent, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    a = _find(parent, a)
    b = _find(parent, b)
    if a == b:
        return
    if a < b:
        parent[b] = a
    else:
        parent[a] = b


def label_periodic(mask, periodic):
    """Face-connected components of a 3D uint8 mask with optional periodic axes."""
    cdef const cnp.uint8_t[:, :, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t n0 = m.shape[0], n1 = m.shape[1], n2 = m.shape[2]
    cdef int p0 = bool(periodic[0]), p1 = bool(periodic[1]), p2 = bool(periodic[2])
    cdef Py_ssize_t ntot = n0 * n1 * n2
    parent_arr = np.arange(ntot, dtype=np.intp)
    cdef Py_ssize_t[::1] parent = parent_arr
    cdef Py_ssize_t i, j, k, idx, nb
    with nogil:
        for i in range(n0):
            for j in range(n1):
                for k in range(n2):
                    if m[i, j, k] == 0:
                        continue
                    idx = (i * n1 + j) * n2 + k
                    if i + 1 < n0:
                        if m[i + 1, j, k]:
                            _union(parent, idx, idx + n1 * n2)
                    elif p0 and n0 > 1 and m[0, j, k]:
                        _union(parent, idx, (j) * n2 + k)
                    if j + 1 < n1:
                        if m[i, j + 1, k]:
                            _union(parent, idx, idx + n2)
                    elif p1 and n1 > 1 and m[i, 0, k]:
                        _union(parent, idx, (i * n1) * n2 + k)
                    if k + 1 < n2:
                        if m[i, j, k + 1]:
                            _union(parent, idx, idx + 1)
                    elif p2 and n2 > 1 and m[i, j, 0]:
                        _union(parent, idx, (i * n1 + j) * n2)
    labels_arr = np.full(ntot, -1, dtype=np.int32)
    cdef int[::1] labels = labels_arr
    root_label_arr = np.full(ntot, -1, dtype=np.int32)
    cdef int[::1] root_label = root_label_arr
    cdef int count = 0
    cdef Py_ssize_t r
    cdef const cnp.uint8_t[::1] flat = np.ascontiguousarray(mask, dtype=np.uint8).reshape(-1)
    with nogil:
        for idx in range(ntot):
            if flat[idx] == 0:
                continue
            r = _find(parent, idx)
            if root_label[r] < 0:
                root_label[r] = count
                count += 1
            labels[idx] = root_label[r]
    return labels_arr.reshape((n0, n1, n2)), count


def unwrap_shifts(mask, periodic):
    """Breadth-first unwrapping of periodic axes.

    Returns per-voxel integer period shifts (shape ``mask.shape + (3,)``) and a
    flag per axis telling whether some component wraps around that axis.
    """
    cdef const cnp.uint8_t[:, :, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t n0 = m.shape[0], n1 = m.shape[1], n2 = m.shape[2]
    cdef int per[3]
    per[0] = bool(periodic[0]); per[1] = bool(periodic[1]); per[2] = bool(periodic[2])
    cdef Py_ssize_t dims[3]
    dims[0] = n0; dims[1] = n1; dims[2] = n2
    shift_arr = np.zeros((n0, n1, n2, 3), dtype=np.int32)
    cdef int[:, :, :, ::1] shift = shift_arr
    visited_arr = np.zeros((n0, n1, n2), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] visited = visited_arr
    wraps_arr = np.zeros(3, dtype=np.uint8)
    cdef cnp.uint8_t[::1] wraps = wraps_arr
    queue_arr = np.empty(n0 * n1 * n2, dtype=np.intp)
    cdef Py_ssize_t[::1] queue = queue_arr
    cdef Py_ssize_t head, tail, s, cur, a, b, c, ax, d
    cdef Py_ssize_t cc[3]
    cdef Py_ssize_t nn[3]
    cdef int ns[3]
    cdef int step, q
    with nogil:
        for s in range(n0 * n1 * n2):
            a = s // (n1 * n2); b = (s // n2) % n1; c = s % n2
            if m[a, b, c] == 0 or visited[a, b, c]:
                continue
            visited[a, b, c] = 1
            head = 0
            tail = 0
            queue[tail] = s
            tail += 1
            while head < tail:
                cur = queue[head]
                head += 1
                cc[0] = cur // (n1 * n2); cc[1] = (cur // n2) % n1; cc[2] = cur % n2
                for ax in range(3):
                    for d in range(2):
                        step = -1 if d == 0 else 1
                        nn[0] = cc[0]; nn[1] = cc[1]; nn[2] = cc[2]
                        ns[0] = shift[cc[0], cc[1], cc[2], 0]
                        ns[1] = shift[cc[0], cc[1], cc[2], 1]
                        ns[2] = shift[cc[0], cc[1], cc[2], 2]
                        nn[ax] = cc[ax] + step
                        if nn[ax] < 0 or nn[ax] >= dims[ax]:
                            if not per[ax] or dims[ax] < 2:
                                continue
                            if nn[ax] < 0:
                                nn[ax] = dims[ax] - 1
                                ns[ax] -= 1
                            else:
                                nn[ax] = 0
                                ns[ax] += 1
                        if m[nn[0], nn[1], nn[2]] == 0:
                            continue
                        if visited[nn[0], nn[1], nn[2]]:
                            for q in range(3):
                                if shift[nn[0], nn[1], nn[2], q] != ns[q]:
                                    wraps[q] = 1
                            continue
                        visited[nn[0], nn[1], nn[2]] = 1
                        shift[nn[0], nn[1], nn[2], 0] = ns[0]
                        shift[nn[0], nn[1], nn[2], 1] = ns[1]
                        shift[nn[0], nn[1], nn[2], 2] = ns[2]
                        queue[tail] = (nn[0] * n1 + nn[1]) * n2 + nn[2]
                        tail += 1
    return shift_arr, wraps_arr.astype(bool)


def q1_scatter(conn, ke, int ndof):
    """COO triplets for element matrices ``ke`` (ne, nde, nde) on connectivity ``conn``."""
    cdef const cnp.int64_t[:, ::1] cn = np.ascontiguousarray(conn, dtype=np.int64)
    cdef const double[:, :, ::1] k = np.ascontiguousarray(ke, dtype=np.float64)
    cdef Py_ssize_t ne = cn.shape[0], nv = cn.shape[1]
    cdef Py_ssize_t nde = nv * ndof
    cdef Py_ssize_t shared = 1 if k.shape[0] == 1 else 0
    rows_arr = np.empty(ne * nde * nde, dtype=np.int64)
    cols_arr = np.empty(ne * nde * nde, dtype=np.int64)
    vals_arr = np.empty(ne * nde * nde, dtype=np.float64)
    cdef cnp.int64_t[::1] rows = rows_arr
    cdef cnp.int64_t[::1] cols = cols_arr
    cdef double[::1] vals = vals_arr
    cdef Py_ssize_t e, a, b, pos = 0, ee
    cdef cnp.int64_t ra, cb
    with nogil:
        for e in range(ne):
            ee = 0 if shared else e
            for a in range(nde):
                ra = cn[e, a // ndof] * ndof + a % ndof
                for b in range(nde):
                    cb = cn[e, b // ndof] * ndof + b % ndof
                    rows[pos] = ra
                    cols[pos] = cb
                    vals[pos] = k[ee, a, b]
                    pos += 1
    return rows_arr, cols_arr, vals_arr
