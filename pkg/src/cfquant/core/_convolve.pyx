# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Direct 3-D convolution kernels for the training hot path.

Same contracts as cfquant.core.reference; float32 and float64 via a fused
type. Inputs arrive pre-padded so the tap loops need no bounds checks, and
the innermost z-loops run on raw pointers over contiguous rows.
"""

import numpy as np

ctypedef fused real:
    float
    double


def conv3d_forward_padded(real[:, :, :, ::1] xp, real[:, :, :, :, ::1] w,
                          real[::1] b, Py_ssize_t stride, real[:, :, :, ::1] out):
    cdef Py_ssize_t Co = w.shape[0], Ci = w.shape[1], K = w.shape[2]
    cdef Py_ssize_t Xo = out.shape[1], Yo = out.shape[2], Zo = out.shape[3]
    cdef Py_ssize_t co, ci, kx, ky, kz, ox, oy, oz
    cdef real wv, bv
    cdef real *po
    cdef const real *px
    with nogil:
        for co in range(Co):
            bv = b[co]
            for ox in range(Xo):
                for oy in range(Yo):
                    po = &out[co, ox, oy, 0]
                    for oz in range(Zo):
                        po[oz] = bv
            for ci in range(Ci):
                for kx in range(K):
                    for ky in range(K):
                        for kz in range(K):
                            wv = w[co, ci, kx, ky, kz]
                            for ox in range(Xo):
                                for oy in range(Yo):
                                    po = &out[co, ox, oy, 0]
                                    px = &xp[ci, ox * stride + kx, oy * stride + ky, kz]
                                    if stride == 1:
                                        for oz in range(Zo):
                                            po[oz] += wv * px[oz]
                                    else:
                                        for oz in range(Zo):
                                            po[oz] += wv * px[oz * stride]


def conv3d_backward_weight_padded(real[:, :, :, ::1] xp, real[:, :, :, ::1] gy,
                                  Py_ssize_t stride, real[:, :, :, :, ::1] gw):
    cdef Py_ssize_t Co = gw.shape[0], Ci = gw.shape[1], K = gw.shape[2]
    cdef Py_ssize_t Xo = gy.shape[1], Yo = gy.shape[2], Zo = gy.shape[3]
    cdef Py_ssize_t co, ci, kx, ky, kz, ox, oy, oz
    cdef double acc
    cdef const real *pg
    cdef const real *px
    with nogil:
        for co in range(Co):
            for ci in range(Ci):
                for kx in range(K):
                    for ky in range(K):
                        for kz in range(K):
                            acc = 0.0
                            for ox in range(Xo):
                                for oy in range(Yo):
                                    pg = &gy[co, ox, oy, 0]
                                    px = &xp[ci, ox * stride + kx, oy * stride + ky, kz]
                                    if stride == 1:
                                        for oz in range(Zo):
                                            acc += px[oz] * pg[oz]
                                    else:
                                        for oz in range(Zo):
                                            acc += px[oz * stride] * pg[oz]
                            gw[co, ci, kx, ky, kz] = <real> acc


def conv3d_backward_input_padded(real[:, :, :, ::1] gy, real[:, :, :, :, ::1] w,
                                 Py_ssize_t stride, real[:, :, :, ::1] gxp):
    """Accumulates into a zeroed padded-input-shaped buffer; caller crops."""
    cdef Py_ssize_t Co = w.shape[0], Ci = w.shape[1], K = w.shape[2]
    cdef Py_ssize_t Xo = gy.shape[1], Yo = gy.shape[2], Zo = gy.shape[3]
    cdef Py_ssize_t co, ci, kx, ky, kz, ox, oy, oz
    cdef real wv
    cdef const real *pg
    cdef real *px
    with nogil:
        for ci in range(Ci):
            for co in range(Co):
                for kx in range(K):
                    for ky in range(K):
                        for kz in range(K):
                            wv = w[co, ci, kx, ky, kz]
                            for ox in range(Xo):
                                for oy in range(Yo):
                                    pg = &gy[co, ox, oy, 0]
                                    px = &gxp[ci, ox * stride + kx, oy * stride + ky, kz]
                                    if stride == 1:
                                        for oz in range(Zo):
                                            px[oz] += wv * pg[oz]
                                    else:
                                        for oz in range(Zo):
                                            px[oz * stride] += wv * pg[oz]
