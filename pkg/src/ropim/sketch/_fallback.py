"""Pure-numpy sketch kernels.

Same signatures as the compiled ``_kernels`` module. All inputs are already
validated; ``X``/``Y`` are 2-D floating arrays, ``h0`` is 0-based int32 and
``s`` is int8.
"""

import numpy as np

BACKEND = "numpy"


def project(h0, s, X, K_out):
    out = np.zeros((K_out, X.shape[1]), dtype=X.dtype)
    np.add.at(out, h0, X * s[:, None].astype(X.dtype))
    return out


def retract(h0, s, scale, Y):
    factor = (s * scale[h0]).astype(Y.dtype)
    return Y[h0] * factor[:, None]


def roundtrip(h0, s, scale, X, K_out):
    return retract(h0, s, scale, project(h0, s, X, K_out))


def complement(h0, s, scale, X, K_out):
    return X - roundtrip(h0, s, scale, X, K_out)


def sketch_inner_products(H0, S, x, y, K_out):
    M, K = H0.shape
    flat = (H0.astype(np.int64) + (np.arange(M, dtype=np.int64) * K_out)[:, None]).ravel()
    px = np.bincount(flat, weights=(S * x).ravel(), minlength=M * K_out).reshape(M, K_out)
    py = np.bincount(flat, weights=(S * y).ravel(), minlength=M * K_out).reshape(M, K_out)
    return np.einsum("ij,ij->i", px, py)
