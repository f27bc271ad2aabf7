"""Numpy fallback for the compiled kernels in ``_kernels.pyx``.

Same signatures and semantics. Results agree with the compiled path to
rounding; they are not guaranteed bit-identical because BLAS picks its own
reduction order.
"""
import numpy as np

BACKEND = "python"


def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    return a @ b


def adapter_forward(h_out, h_msa, w_down, w_up, parallel):
    src = h_msa if parallel else h_out
    out = h_out + np.maximum(src @ w_down, 0.0) @ w_up
    if parallel:
        out = out + h_msa
    return out


def prototype_norms(protos, eps=1e-12):
    return np.maximum(np.sqrt(np.einsum("ij,ij->i", protos, protos)), eps)


def cosine_prepared(feats, protos_t, pnorm, eps=1e-12):
    if feats.shape[1] != protos_t.shape[0]:
        raise ValueError("cosine_sims: feature and prototype dims differ")
    fn = np.maximum(np.sqrt(np.einsum("ij,ij->i", feats, feats)), eps)
    return (feats @ protos_t) / (fn[:, None] * pnorm[None, :])


def cosine_sims(feats, protos, eps=1e-12):
    if feats.shape[1] != protos.shape[1]:
        raise ValueError("cosine_sims: feature and prototype dims differ")
    return cosine_prepared(feats, protos.T, prototype_norms(protos, eps), eps)


def top2(sims):
    idx = np.argmax(sims, axis=1)
    z1 = sims[np.arange(sims.shape[0]), idx]
    if sims.shape[1] == 1:
        z2 = np.zeros(sims.shape[0])
    else:
        z2 = np.partition(sims, -2, axis=1)[:, -2]
    return idx.astype(np.int64), z1, z2
