import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from memhomog import _pycore, kernels

core = pytest.importorskip("memhomog._core", reason="compiled kernels not built")

masks3 = arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
                elements=st.integers(0, 1))
flags = st.tuples(st.booleans(), st.booleans(), st.booleans())


def canonical(labels):
    """Relabel by first appearance so two labelings can be compared."""
    out = np.full(labels.shape, -1)
    seen = {}
    for idx, v in np.ndenumerate(labels):
        if v >= 0:
            out[idx] = seen.setdefault(v, len(seen))
    return out


@settings(max_examples=60, deadline=None)
@given(m=masks3, per=flags)
def test_label_backends_agree(m, per):
    a, na = core.label_periodic(m, per)
    b, nb = _pycore.label_periodic(m, per)
    assert na == nb
    assert np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(m=masks3)
def test_label_matches_scipy_without_wrap(m):
    lab, n = kernels.label_periodic(m.astype(bool), (False, False, False))
    ref, nref = ndimage.label(m)
    assert n == nref
    assert np.array_equal(canonical(lab), canonical(ref - 1))


@settings(max_examples=60, deadline=None)
@given(m=masks3, per=flags)
def test_unwrap_backends_agree(m, per):
    sa, wa = core.unwrap_shifts(m, per)
    sb, wb = _pycore.unwrap_shifts(m, per)
    assert np.array_equal(sa, sb) and np.array_equal(wa, wb)


def test_unwrap_detects_wrapping_bar():
    m = np.zeros((4, 4, 4), dtype=bool)
    m[:, 1, 1] = True  # bar along axis 0 through the periodic wrap
    _, wraps = kernels.unwrap_shifts(m, (True, True, False))
    assert wraps.tolist() == [True, False, False]


@settings(max_examples=30, deadline=None)
@given(ne=st.integers(1, 8), nv=st.sampled_from([4, 8]), ncomp=st.integers(1, 3),
       shared=st.booleans(), seed=st.integers(0, 1000))
def test_scatter_backends_agree(ne, nv, ncomp, shared, seed):
    rng = np.random.default_rng(seed)
    conn = rng.integers(0, 20, (ne, nv)).astype(np.int64)
    nde = nv * ncomp
    ke = rng.standard_normal((1 if shared else ne, nde, nde))
    ra, ca, va = core.q1_scatter(conn, ke, ncomp)
    rb, cb, vb = _pycore.q1_scatter(conn, ke, ncomp)
    assert np.array_equal(ra, rb) and np.array_equal(ca, cb) and np.array_equal(va, vb)


def test_readonly_inputs_accepted():
    m = np.zeros((3, 3, 3), dtype=np.uint8)
    m[1, 1, 1] = 1
    m.setflags(write=False)
    assert core.label_periodic(m, (True, True, False))[1] == 1


def test_two_dimensional_wrapper():
    m = np.zeros((4, 6), dtype=bool)
    m[0, 2] = m[3, 2] = True
    lab, n = kernels.label_periodic(m, (True, False))
    assert n == 1 and lab.shape == (4, 6)


def test_pure_python_switch():
    env = dict(os.environ, MEMHOMOG_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import memhomog; print(memhomog.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    forced = os.environ.get("MEMHOMOG_PURE_PYTHON", "") not in ("", "0")
    assert kernels.BACKEND == ("python" if forced else "cython")
