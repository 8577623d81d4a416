"""Structured weight initialization from a pre-trained attention layer.

A latent-attention layer is seeded by factorizing the source projections:
the query projection alone, and the key/value projections jointly, each via
truncated SVD. The left factors become down-projections, the scaled right
factors become up-projections, and the rotary key path takes the tail
columns of the head-averaged key projection. A state-space layer is seeded
by reusing the source projections directly (value -> state write, key ->
input gate, query -> state read, output kept) with identity convolutions, so
the freshly converted layer starts out computing attention-like scores.
"""

from __future__ import annotations

from typing import Optional, Union

import numpy as np

from .attention import (
    KIND_MHA,
    KIND_MLA,
    KIND_MAMBA2,
    AttentionWeights,
    MLAConfig,
    MLAWeights,
    ModelConfig,
)
from .numkernel import Tensor, svd_truncated
from .ssm import Mamba2Weights

__all__ = [
    "init_mla_from_attention",
    "init_mamba2_from_attention",
    "init_random",
    "default_decay_exponents",
    "default_step_bias",
    "identity_conv",
]

AnyWeights = Union[AttentionWeights, MLAWeights, Mamba2Weights]


def init_mla_from_attention(
    w: AttentionWeights, cfg: ModelConfig, mcfg: MLAConfig
) -> MLAWeights:
    """Factorize attention projections into latent-attention weights.

    At full ranks the factorization is exact: the query path reconstructs the
    source query projection and the joint key/value factors reconstruct the
    stacked [key, value] block. At truncated ranks the error equals the
    optimal rank-r Frobenius error, nothing more.
    """
    w.validate(cfg)
    mcfg.validate(cfg)
    n_h, n_kv, d_h = cfg.n_h, cfg.n_kv, cfg.d_h
    d_qk, d_r, d_v = mcfg.d_qk, mcfg.d_r, mcfg.d_v

    # query path: W_Q = U_q (S_q V_q^T), split per head into plain/rotary parts
    fq = svd_truncated(w.W_Q, mcfg.r_q)
    mq = (fq.S.data[:, None] * fq.V.data.T).reshape(mcfg.r_q, n_h, d_h)
    w_uq = mq[:, :, :d_qk].reshape(mcfg.r_q, n_h * d_qk)
    w_qr = mq[:, :, d_qk:].reshape(mcfg.r_q, n_h * d_r)

    # key/value path: joint factorization of the stacked block
    kv = np.concatenate([w.W_K.data, w.W_V.data], axis=1)
    fkv = svd_truncated(kv, mcfg.r_kv)
    mkv = fkv.S.data[:, None] * fkv.V.data.T            # (r_kv, 2*n_kv*d_h)
    key_part = mkv[:, : n_kv * d_h].reshape(mcfg.r_kv, n_kv, d_h)
    w_uk = key_part[:, :, :d_qk].reshape(mcfg.r_kv, n_kv * d_qk)
    w_uv = mkv[:, n_kv * d_h :].reshape(mcfg.r_kv, n_kv * d_v)

    # rotary key: tail columns of the head-averaged key projection
    k_mean = w.W_K.data.reshape(cfg.d, n_kv, d_h).mean(axis=1)
    w_kr = np.ascontiguousarray(k_mean[:, d_h - d_r :])

    out = MLAWeights(
        W_DQ=fq.U,
        W_UQ=Tensor(np.ascontiguousarray(w_uq)),
        W_QR=Tensor(np.ascontiguousarray(w_qr)),
        W_DKV=fkv.U,
        W_UK=Tensor(np.ascontiguousarray(w_uk)),
        W_UV=Tensor(np.ascontiguousarray(w_uv)),
        W_KR=Tensor(w_kr),
        W_O=Tensor(w.W_O.data.copy()),
    )
    out.validate(cfg, mcfg)
    return out


def default_decay_exponents(n_h: int, dtype=np.float32) -> np.ndarray:
    """Log-magnitudes for per-head decay: exp(a) spans [0.5, 0.999] log-uniformly."""
    a = np.linspace(np.log(0.5), np.log(0.999), n_h)
    return np.log(-a).astype(dtype)


def default_step_bias(n_h: int, dtype=np.float32) -> np.ndarray:
    """Bias so the initial step size softplus(bias) spans [0.001, 0.1]."""
    target = np.geomspace(0.001, 0.1, n_h)
    return np.log(np.expm1(target)).astype(dtype)


def identity_conv(channels: int, k: int, dtype=np.float32) -> np.ndarray:
    """Depthwise kernel whose only nonzero tap is the current token."""
    kernel = np.zeros((channels, k), dtype=dtype)
    kernel[:, k - 1] = 1.0
    return kernel


def init_mamba2_from_attention(
    w: AttentionWeights, cfg: ModelConfig, k: int = 4
) -> Mamba2Weights:
    """Reuse attention projections as state-space paths, conv set to identity.

    The value/key/query/output projections are copied bitwise; decay, step
    size, and skip parameters take the standard defaults. With the identity
    convolutions the converted layer's first step reads exactly the projected
    source activations.
    """
    w.validate(cfg)
    dtype = w.W_Q.dtype
    out = Mamba2Weights(
        n_h=cfg.n_h, n_kv=cfg.n_kv, d_h=cfg.d_h, k=k,
        W_x=Tensor(w.W_V.data.copy()),
        W_B=Tensor(w.W_K.data.copy()),
        W_C=Tensor(w.W_Q.data.copy()),
        conv_x=Tensor(identity_conv(cfg.n_kv * cfg.d_h, k, dtype)),
        conv_B=Tensor(identity_conv(cfg.n_kv * cfg.d_h, k, dtype)),
        conv_C=Tensor(identity_conv(cfg.n_h * cfg.d_h, k, dtype)),
        a_log=Tensor(default_decay_exponents(cfg.n_h, dtype)),
        delta_w=Tensor(np.zeros((cfg.d, cfg.n_h), dtype=dtype)),
        delta_b=Tensor(default_step_bias(cfg.n_h, dtype)),
        D=Tensor(np.ones(cfg.n_h, dtype=dtype)),
        W_out=Tensor(w.W_O.data.copy()),
    )
    out.validate()
    return out


def init_random(
    kind: str,
    cfg: ModelConfig,
    mcfg: Optional[MLAConfig] = None,
    seed: int = 0,
    k: int = 4,
    dtype=np.float32,
) -> AnyWeights:
    """Scaled Gaussian init (std = 1/sqrt(fan_in)) for any mixer kind."""
    rng = np.random.default_rng(seed)

    def gauss(fan_in: int, *shape) -> Tensor:
        return Tensor((rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype))

    if kind == KIND_MHA:
        out = AttentionWeights(
            W_Q=gauss(cfg.d, cfg.d, cfg.n_h * cfg.d_h),
            W_K=gauss(cfg.d, cfg.d, cfg.n_kv * cfg.d_h),
            W_V=gauss(cfg.d, cfg.d, cfg.n_kv * cfg.d_h),
            W_O=gauss(cfg.n_h * cfg.d_h, cfg.n_h * cfg.d_h, cfg.d),
        )
        out.validate(cfg)
        return out

    if kind == KIND_MLA:
        if mcfg is None:
            raise ValueError("random MLA init needs an MLAConfig")
        mcfg.validate(cfg)
        out = MLAWeights(
            W_DQ=gauss(cfg.d, cfg.d, mcfg.r_q),
            W_UQ=gauss(mcfg.r_q, mcfg.r_q, cfg.n_h * mcfg.d_qk),
            W_QR=gauss(mcfg.r_q, mcfg.r_q, cfg.n_h * mcfg.d_r),
            W_DKV=gauss(cfg.d, cfg.d, mcfg.r_kv),
            W_UK=gauss(mcfg.r_kv, mcfg.r_kv, cfg.n_kv * mcfg.d_qk),
            W_UV=gauss(mcfg.r_kv, mcfg.r_kv, cfg.n_kv * mcfg.d_v),
            W_KR=gauss(cfg.d, cfg.d, mcfg.d_r),
            W_O=gauss(cfg.n_h * mcfg.d_v, cfg.n_h * mcfg.d_v, cfg.d),
        )
        out.validate(cfg, mcfg)
        return out

    if kind == KIND_MAMBA2:
        out = Mamba2Weights(
            n_h=cfg.n_h, n_kv=cfg.n_kv, d_h=cfg.d_h, k=k,
            W_x=gauss(cfg.d, cfg.d, cfg.n_kv * cfg.d_h),
            W_B=gauss(cfg.d, cfg.d, cfg.n_kv * cfg.d_h),
            W_C=gauss(cfg.d, cfg.d, cfg.n_h * cfg.d_h),
            conv_x=gauss(k, cfg.n_kv * cfg.d_h, k),
            conv_B=gauss(k, cfg.n_kv * cfg.d_h, k),
            conv_C=gauss(k, cfg.n_h * cfg.d_h, k),
            a_log=Tensor(default_decay_exponents(cfg.n_h, dtype)),
            delta_w=Tensor(np.zeros((cfg.d, cfg.n_h), dtype=dtype)),
            delta_b=Tensor(default_step_bias(cfg.n_h, dtype)),
            D=Tensor(np.ones(cfg.n_h, dtype=dtype)),
            W_out=gauss(cfg.n_h * cfg.d_h, cfg.n_h * cfg.d_h, cfg.d),
        )
        out.validate()
        return out

    raise ValueError(f"unknown mixer kind {kind!r}")
