"""
Turning an attention layer into a latent-attention layer
========================================================

A trained attention layer stores full-width query/key/value projections.
The latent-attention variant keeps a small shared latent per token instead,
so its weights are low-rank factors of the original matrices.  This demo
factorizes a random attention layer and measures how faithful those factors
are, at full rank and under truncation.
"""

import numpy as np

from hybridforge.attention import AttentionWeights, MLAConfig, ModelConfig
from hybridforge.numkernel import svd_truncated, tensor
from hybridforge.upcycle import init_mla_from_attention

rng = np.random.default_rng(0)
cfg = ModelConfig(L=1, d=32, n_h=4, n_kv=2, d_h=8, vocab=64)


def w(*shape):
    return tensor(rng.standard_normal(shape), dtype=np.float64)


attn = AttentionWeights(
    W_Q=w(cfg.d, cfg.n_h * cfg.d_h),
    W_K=w(cfg.d, cfg.n_kv * cfg.d_h),
    W_V=w(cfg.d, cfg.n_kv * cfg.d_h),
    W_O=w(cfg.n_h * cfg.d_h, cfg.d),
)


def joint_kv_error(mw, mcfg):
    # The stored up-projection keeps only the first d_qk key columns per
    # head (the rest belong to the rotary path), so rebuild the dropped
    # columns through the same left factor before measuring the error.
    a = np.concatenate([attn.W_K.data, attn.W_V.data], axis=1)
    u = mw.W_DKV.data
    m = (u.T @ a).copy()
    key = m[:, : cfg.n_kv * cfg.d_h].reshape(mcfg.r_kv, cfg.n_kv, cfg.d_h)
    key[:, :, : mcfg.d_qk] = mw.W_UK.data.reshape(mcfg.r_kv, cfg.n_kv, mcfg.d_qk)
    m[:, cfg.n_kv * cfg.d_h:] = mw.W_UV.data
    return np.linalg.norm(u @ m - a), np.linalg.norm(a)


# At full rank the factorization is exact: the joint [key, value] block has
# rank at most 2*n_kv*d_h and the query path at most d.
full = MLAConfig(r_q=cfg.d, r_kv=2 * cfg.n_kv * cfg.d_h, d_qk=cfg.d_h - 2,
                 d_v=cfg.d_h, d_r=2)
mw = init_mla_from_attention(attn, cfg, full)
err, scale = joint_kv_error(mw, full)
print(f"full-rank joint kv error: {err / scale:.2e} (relative)")

uq = mw.W_UQ.data.reshape(full.r_q, cfg.n_h, full.d_qk)
qr = mw.W_QR.data.reshape(full.r_q, cfg.n_h, full.d_r)
q_hat = mw.W_DQ.data @ np.concatenate([uq, qr], axis=-1).reshape(full.r_q, -1)
print(f"full-rank query error:    "
      f"{np.linalg.norm(q_hat - attn.W_Q.data) / np.linalg.norm(attn.W_Q.data):.2e}")

# Truncation throws away the smallest singular directions, and the error it
# pays is exactly the optimal rank-r error -- no rank-r factor does better.
print("\nrank  factor error  optimal rank-r error")
kv_src = np.concatenate([attn.W_K.data, attn.W_V.data], axis=1)
for r_kv in (4, 8, 16, 24, 32):
    mcfg = MLAConfig(r_q=24, r_kv=r_kv, d_qk=cfg.d_h - 2, d_v=cfg.d_h, d_r=2)
    got, _ = joint_kv_error(init_mla_from_attention(attn, cfg, mcfg), mcfg)
    best = np.linalg.norm(svd_truncated(kv_src, r_kv).reconstruct() - kv_src)
    print(f"{r_kv:4d}  {got:12.6f}  {best:12.6f}")
