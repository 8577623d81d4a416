"""Whole-model container, hybrid assembly, cache budgeting, checkpointing.

A model is an embedding, a stack of pre-norm residual blocks (token mixer +
gated MLP), a final normalization, and an untied output head. The mixer in
each block is one of the three kinds; everything else is shared structure,
which is what makes swapping mixers per layer meaningful.

Checkpoints are a single binary file: magic "HFRG", a version word, a JSON
header with a tensor directory (name, dtype, shape, offset, byte length,
CRC32), then a 64-byte-aligned little-endian payload. The header alone is
enough to recover the architecture without touching the payload.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
import zlib
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import numkernel as nk
from . import upcycle as up
from .attention import (
    KIND_MHA,
    KIND_MLA,
    KIND_MAMBA2,
    AttentionWeights,
    EmptyCache,
    FullKV,
    LatentKV,
    MLAConfig,
    MLAWeights,
    ModelConfig,
    kv_bytes,
    mha_forward,
    mla_forward,
)
from .numkernel import ParamStore, Tensor
from .smart import HybridLayout
from .ssm import Mamba2Weights, SsmState, mamba2_forward_seq

__all__ = [
    "CheckpointError",
    "LayerParams",
    "HybridModel",
    "build_model",
    "convert_model",
    "assemble",
    "kv_report",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint_header",
]

MAGIC = b"HFRG"
FORMAT_VERSION = 1
_ALIGN = 64

MixerWeights = Union[AttentionWeights, MLAWeights, Mamba2Weights]


class CheckpointError(Exception):
    """Malformed, corrupted, or incompatible checkpoint file."""


@dataclass
class LayerParams:
    """One residual block: pre-norm mixer sublayer + pre-norm gated MLP."""

    norm1: Tensor     # (d,)
    mixer: MixerWeights
    norm2: Tensor     # (d,)
    mlp_gate: Tensor  # (d, d_ff)
    mlp_up: Tensor    # (d, d_ff)
    mlp_down: Tensor  # (d_ff, d)


def mlp_width(d: int) -> int:
    """Fixed expansion factor; the config format does not carry a free d_ff."""
    return 2 * d


@dataclass
class HybridModel:
    """Embedding + mixer/MLP blocks + final norm + untied output head."""

    cfg: ModelConfig
    mcfg: Optional[MLAConfig]
    embed: Tensor           # (vocab, d)
    layers: list[LayerParams]
    final_norm: Tensor      # (d,)
    head: Tensor            # (d, vocab)

    def __post_init__(self):
        if len(self.layers) != self.cfg.L:
            raise ValueError("layer count does not match cfg.L")
        for i, (kind, layer) in enumerate(zip(self.cfg.layer_kinds, self.layers)):
            want = {KIND_MHA: AttentionWeights, KIND_MLA: MLAWeights,
                    KIND_MAMBA2: Mamba2Weights}[kind]
            if not isinstance(layer.mixer, want):
                raise ValueError(f"layer {i}: kind {kind} vs mixer {type(layer.mixer).__name__}")
        if any(k == KIND_MLA for k in self.cfg.layer_kinds) and self.mcfg is None:
            raise ValueError("model with MLA layers needs an MLAConfig")

    # -- parameter plumbing --------------------------------------------------

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("embed", self.embed)]
        for i, layer in enumerate(self.layers):
            p = f"layers.{i}"
            out.append((f"{p}.norm1", layer.norm1))
            for name, t in layer.mixer.items():
                out.append((f"{p}.mixer.{name}", t))
            out.append((f"{p}.norm2", layer.norm2))
            out.append((f"{p}.mlp_gate", layer.mlp_gate))
            out.append((f"{p}.mlp_up", layer.mlp_up))
            out.append((f"{p}.mlp_down", layer.mlp_down))
        out.append(("final_norm", self.final_norm))
        out.append(("head", self.head))
        return out

    def param_store(self) -> ParamStore:
        store = ParamStore()
        for name, t in self.named_tensors():
            store.add(name, t)
        return store

    def param_count(self) -> int:
        return sum(t.data.size for _, t in self.named_tensors())

    def astype(self, dtype) -> "HybridModel":
        return _map_tensors(self, lambda t: Tensor(t.data.astype(dtype)))

    def clone(self) -> "HybridModel":
        return _map_tensors(self, lambda t: Tensor(t.data.copy()))

    # -- forward passes -------------------------------------------------------

    def _mix(self, x: Tensor, i: int, cache=None):
        kind = self.cfg.layer_kinds[i]
        mixer = self.layers[i].mixer
        if kind == KIND_MHA:
            return mha_forward(x, mixer, self.cfg, cache)
        if kind == KIND_MLA:
            return mla_forward(x, mixer, self.cfg, self.mcfg, cache)
        return mamba2_forward_seq(x, mixer, cache)

    def forward(self, ids: np.ndarray, collect_mixer_outputs: bool = False):
        """Teacher-forced logits for (batch, t) or (t,) token ids.

        Optionally also returns each layer's mixer sublayer output (after the
        mixer's own output projection, before the residual add) for
        layer-alignment losses.
        """
        ids = np.asarray(ids)
        x = nk.embedding(self.embed, ids)
        mixer_outs = []
        for i, layer in enumerate(self.layers):
            mixed, _ = self._mix(nk.rms_norm(x, layer.norm1), i)
            if collect_mixer_outputs:
                mixer_outs.append(mixed)
            x = nk.add(x, mixed)
            z = nk.rms_norm(x, layer.norm2)
            gated = nk.mul(nk.silu(nk.matmul(z, layer.mlp_gate)), nk.matmul(z, layer.mlp_up))
            x = nk.add(x, nk.matmul(gated, layer.mlp_down))
        logits = nk.matmul(nk.rms_norm(x, self.final_norm), self.head)
        if collect_mixer_outputs:
            return logits, mixer_outs
        return logits

    def init_caches(self, dtype=np.float32) -> list:
        caches = []
        for kind, layer in zip(self.cfg.layer_kinds, self.layers):
            if kind == KIND_MHA:
                caches.append(FullKV.empty(self.cfg.n_kv, self.cfg.d_h, dtype))
            elif kind == KIND_MLA:
                caches.append(LatentKV.empty(self.mcfg.r_kv, self.mcfg.d_r, dtype))
            else:
                caches.append(SsmState.empty(layer.mixer, dtype))
        return caches

    def forward_cached(self, ids: np.ndarray, caches: list):
        """Incremental decode over new tokens of one sequence; grows the caches."""
        ids = np.asarray(ids)
        if ids.ndim != 1:
            raise ValueError("cached decode takes a flat token id array")
        x = nk.embedding(self.embed, ids)
        new_caches = []
        for i, layer in enumerate(self.layers):
            mixed, c = self._mix(nk.rms_norm(x, layer.norm1), i, caches[i])
            new_caches.append(c)
            x = nk.add(x, mixed)
            z = nk.rms_norm(x, layer.norm2)
            gated = nk.mul(nk.silu(nk.matmul(z, layer.mlp_gate)), nk.matmul(z, layer.mlp_up))
            x = nk.add(x, nk.matmul(gated, layer.mlp_down))
        logits = nk.matmul(nk.rms_norm(x, self.final_norm), self.head)
        return logits, new_caches

    def cache_bytes(self, caches: list) -> tuple[int, int]:
        """(attention-style cache bytes, SSM state bytes) for a cache list."""
        kv = sum(c.byte_size() for c in caches if isinstance(c, (FullKV, LatentKV)))
        ssm = sum(c.byte_size() for c in caches if isinstance(c, SsmState))
        return kv, ssm


def _map_tensors(model: HybridModel, fn) -> HybridModel:
    def map_mixer(m):
        fields = {name: fn(t) for name, t in m.items()}
        if isinstance(m, Mamba2Weights):
            return Mamba2Weights(n_h=m.n_h, n_kv=m.n_kv, d_h=m.d_h, k=m.k, **fields)
        return type(m)(**fields)

    layers = [
        LayerParams(
            norm1=fn(l.norm1), mixer=map_mixer(l.mixer), norm2=fn(l.norm2),
            mlp_gate=fn(l.mlp_gate), mlp_up=fn(l.mlp_up), mlp_down=fn(l.mlp_down),
        )
        for l in model.layers
    ]
    return HybridModel(
        cfg=dataclasses.replace(model.cfg, layer_kinds=list(model.cfg.layer_kinds)),
        mcfg=model.mcfg,
        embed=fn(model.embed),
        layers=layers,
        final_norm=fn(model.final_norm),
        head=fn(model.head),
    )


# ---------------------------------------------------------------------------
# builders


def build_model(
    cfg: ModelConfig,
    mcfg: Optional[MLAConfig] = None,
    seed: int = 0,
    dtype=np.float32,
    conv_k: int = 4,
) -> HybridModel:
    """Random-init model matching cfg.layer_kinds; head zero so logits start flat."""
    rng = np.random.default_rng(seed)
    d_ff = mlp_width(cfg.d)

    def gauss(fan_in, *shape):
        return Tensor((rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype))

    layers = []
    for i, kind in enumerate(cfg.layer_kinds):
        mixer = up.init_random(kind, cfg, mcfg, seed=int(rng.integers(2**31)),
                               k=conv_k, dtype=dtype)
        layers.append(LayerParams(
            norm1=Tensor(np.ones(cfg.d, dtype=dtype)),
            mixer=mixer,
            norm2=Tensor(np.ones(cfg.d, dtype=dtype)),
            mlp_gate=gauss(cfg.d, cfg.d, d_ff),
            mlp_up=gauss(cfg.d, cfg.d, d_ff),
            mlp_down=gauss(d_ff, d_ff, cfg.d),
        ))
    return HybridModel(
        cfg=cfg,
        mcfg=mcfg,
        embed=Tensor(rng.standard_normal((cfg.vocab, cfg.d)).astype(dtype)),
        layers=layers,
        final_norm=Tensor(np.ones(cfg.d, dtype=dtype)),
        head=Tensor(np.zeros((cfg.d, cfg.vocab), dtype=dtype)),
    )


def convert_model(
    teacher: HybridModel,
    kind: str,
    mcfg: Optional[MLAConfig] = None,
    conv_k: int = 4,
    random_seed: Optional[int] = None,
) -> HybridModel:
    """Swap every attention mixer for the target kind; share-copy the rest.

    Structured conversion by default; pass random_seed for the random-init
    ablation arm (same architecture, no knowledge carried over).
    """
    if kind not in (KIND_MLA, KIND_MAMBA2):
        raise ValueError("conversion targets are the MLA and Mamba2 kinds")
    if any(k != KIND_MHA for k in teacher.cfg.layer_kinds):
        raise ValueError("conversion expects an all-attention source model")
    if kind == KIND_MLA and mcfg is None:
        raise ValueError("MLA conversion needs an MLAConfig")

    layers = []
    for i, layer in enumerate(teacher.layers):
        if random_seed is not None:
            mixer = up.init_random(kind, teacher.cfg, mcfg,
                                   seed=random_seed + i, k=conv_k,
                                   dtype=teacher.embed.dtype)
        elif kind == KIND_MLA:
            mixer = up.init_mla_from_attention(layer.mixer, teacher.cfg, mcfg)
        else:
            mixer = up.init_mamba2_from_attention(layer.mixer, teacher.cfg, conv_k)
        layers.append(LayerParams(
            norm1=Tensor(layer.norm1.data.copy()),
            mixer=mixer,
            norm2=Tensor(layer.norm2.data.copy()),
            mlp_gate=Tensor(layer.mlp_gate.data.copy()),
            mlp_up=Tensor(layer.mlp_up.data.copy()),
            mlp_down=Tensor(layer.mlp_down.data.copy()),
        ))
    cfg = dataclasses.replace(teacher.cfg, layer_kinds=[kind] * teacher.cfg.L)
    return HybridModel(
        cfg=cfg,
        mcfg=mcfg,
        embed=Tensor(teacher.embed.data.copy()),
        layers=layers,
        final_norm=Tensor(teacher.final_norm.data.copy()),
        head=Tensor(teacher.head.data.copy()),
    )


# ---------------------------------------------------------------------------
# hybrid assembly


def _shared_names(model: HybridModel) -> list[tuple[str, Tensor]]:
    out = [("embed", model.embed), ("final_norm", model.final_norm), ("head", model.head)]
    for i, l in enumerate(model.layers):
        out += [(f"layers.{i}.norm1", l.norm1), (f"layers.{i}.norm2", l.norm2),
                (f"layers.{i}.mlp_gate", l.mlp_gate), (f"layers.{i}.mlp_up", l.mlp_up),
                (f"layers.{i}.mlp_down", l.mlp_down)]
    return out


def assemble(
    mla_model: HybridModel,
    mamba_model: HybridModel,
    layout: HybridLayout,
    divergence_tol: float = 1e-6,
) -> HybridModel:
    """Per-layer mixer pick by layout; shared parameters come from the MLA source.

    The two sources train separately after conversion, so their shared
    parameters may drift; drift beyond the tolerance is surfaced as a warning
    and the MLA side's values win.
    """
    a, b = mla_model.cfg, mamba_model.cfg
    skeleton = ("L", "d", "n_h", "n_kv", "d_h", "vocab", "rope_base")
    for f in skeleton:
        if getattr(a, f) != getattr(b, f):
            raise ValueError(f"source models disagree on cfg.{f}")
    layout.validate(a.L)
    if any(k != KIND_MLA for k in a.layer_kinds):
        raise ValueError("first source must be all-MLA")
    if any(k != KIND_MAMBA2 for k in b.layer_kinds):
        raise ValueError("second source must be all-Mamba2")

    worst = 0.0
    for (name, ta), (_, tb) in zip(_shared_names(mla_model), _shared_names(mamba_model)):
        if ta.shape != tb.shape:
            raise ValueError(f"shared parameter {name} shape mismatch")
        worst = max(worst, float(np.abs(ta.data - tb.data).max()))
    if worst > divergence_tol:
        warnings.warn(
            f"shared parameters diverge up to {worst:.3e}; keeping the MLA source's",
            RuntimeWarning,
        )

    chosen = set(layout.mla_indices)
    layers = []
    for i in range(a.L):
        src = mla_model.layers[i] if i in chosen else mamba_model.layers[i]
        pick = mla_model.layers[i]  # shared params always from the MLA source
        layers.append(LayerParams(
            norm1=Tensor(pick.norm1.data.copy()),
            mixer=_copy_mixer(src.mixer),
            norm2=Tensor(pick.norm2.data.copy()),
            mlp_gate=Tensor(pick.mlp_gate.data.copy()),
            mlp_up=Tensor(pick.mlp_up.data.copy()),
            mlp_down=Tensor(pick.mlp_down.data.copy()),
        ))
    kinds = [KIND_MLA if i in chosen else KIND_MAMBA2 for i in range(a.L)]
    cfg = dataclasses.replace(a, layer_kinds=kinds)
    return HybridModel(
        cfg=cfg,
        mcfg=mla_model.mcfg,
        embed=Tensor(mla_model.embed.data.copy()),
        layers=layers,
        final_norm=Tensor(mla_model.final_norm.data.copy()),
        head=Tensor(mla_model.head.data.copy()),
    )


def _copy_mixer(m: MixerWeights) -> MixerWeights:
    fields = {name: Tensor(t.data.copy()) for name, t in m.items()}
    if isinstance(m, Mamba2Weights):
        return Mamba2Weights(n_h=m.n_h, n_kv=m.n_kv, d_h=m.d_h, k=m.k, **fields)
    return type(m)(**fields)


# ---------------------------------------------------------------------------
# cache budget report


def kv_report(
    cfg: ModelConfig,
    layout: HybridLayout,
    mcfg: MLAConfig,
    t: int,
    elem_bytes: int = 4,
    conv_k: int = 4,
) -> dict:
    """Per-layer cache bytes vs an all-attention baseline of the same shape.

    The headline percentage counts only per-token cache (latent + rotary-key
    rows); constant-size SSM state is reported separately and excluded from
    the ratio, matching the convention that pure-SSM stacks score 0%.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    layout.validate(cfg.L)
    chosen = set(layout.mla_indices)
    kinds = [KIND_MLA if i in chosen else KIND_MAMBA2 for i in range(cfg.L)]
    per_layer = [
        kv_bytes(kind, cfg, mcfg if kind == KIND_MLA else None, t, elem_bytes)
        for kind in kinds
    ]
    total = sum(per_layer)
    baseline = cfg.L * kv_bytes(KIND_MHA, cfg, None, t, elem_bytes)
    # exact ratio: (sum over MLA layers of r_kv + d_r) / (L * 2 * n_kv * d_h)
    percent = round(100.0 * total / baseline, 2)
    ssm_elems = (
        cfg.n_h * cfg.d_h * cfg.d_h
        + (conv_k - 1) * (2 * cfg.n_kv * cfg.d_h + cfg.n_h * cfg.d_h)
    )
    n_mamba = cfg.L - len(chosen)
    return {
        "t": t,
        "elem_bytes": elem_bytes,
        "layer_kinds": kinds,
        "per_layer_bytes": per_layer,
        "total_kv_bytes": total,
        "baseline_kv_bytes": baseline,
        "percent_of_baseline": percent,
        "ssm_state_bytes": n_mamba * ssm_elems * elem_bytes,
    }


# ---------------------------------------------------------------------------
# checkpoint format


_DTYPES = {"float32": np.float32, "float64": np.float64}


def _header_blob(model: HybridModel, directory: list[dict]) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "cfg": dataclasses.asdict(model.cfg),
        "mcfg": dataclasses.asdict(model.mcfg) if model.mcfg else None,
        "conv_k": [l.mixer.k for l in model.layers
                   if isinstance(l.mixer, Mamba2Weights)][:1] or None,
        "tensors": directory,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(model: HybridModel, path: str) -> None:
    """Write the model to one self-describing binary file."""
    named = model.named_tensors()
    directory = []
    offset = 0
    blobs = []
    for name, t in named:
        if t.dtype.name not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype.name} for {name}")
        raw = np.ascontiguousarray(t.data).astype(t.data.dtype.newbyteorder("<")).tobytes()
        offset = (offset + _ALIGN - 1) // _ALIGN * _ALIGN
        directory.append({
            "name": name,
            "dtype": t.dtype.name,
            "shape": list(t.shape),
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw),
        })
        blobs.append((offset, raw))
        offset += len(raw)

    header = _header_blob(model, directory)
    payload = bytearray(offset)
    for off, raw in blobs:
        payload[off : off + len(raw)] = raw
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array([FORMAT_VERSION], dtype="<u4").tobytes())
        f.write(np.array([len(header)], dtype="<u8").tobytes())
        f.write(header)
        f.write(bytes(payload))


def _read_preamble(f) -> dict:
    magic = f.read(4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    raw = f.read(12)
    if len(raw) != 12:
        raise CheckpointError("file truncated before header")
    version = int(np.frombuffer(raw[:4], dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"format version {version} unsupported")
    hlen = int(np.frombuffer(raw[4:], dtype="<u8")[0])
    blob = f.read(hlen)
    if len(blob) != hlen:
        raise CheckpointError("file truncated inside header")
    try:
        return json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None


def read_checkpoint_header(path: str) -> dict:
    """Parse magic, version, and JSON header; the payload stays untouched."""
    with open(path, "rb") as f:
        header = _read_preamble(f)
    _validate_directory(header)
    return header


def _validate_directory(header: dict) -> None:
    spans = []
    for entry in header["tensors"]:
        if entry["dtype"] not in _DTYPES:
            raise CheckpointError(f"unknown dtype {entry['dtype']}")
        want = int(np.prod(entry["shape"], dtype=np.int64)) * np.dtype(entry["dtype"]).itemsize
        if want != entry["nbytes"]:
            raise CheckpointError(f"{entry['name']}: shape/nbytes mismatch")
        spans.append((entry["offset"], entry["offset"] + entry["nbytes"], entry["name"]))
    spans.sort()
    for (s1, e1, n1), (s2, e2, n2) in zip(spans, spans[1:]):
        if s2 < e1:
            raise CheckpointError(f"overlapping tensors {n1} and {n2}")


def load_checkpoint(path: str) -> HybridModel:
    """Rebuild the model; every tensor is CRC-checked against the directory."""
    with open(path, "rb") as f:
        header = _read_preamble(f)
        payload = f.read()
    _validate_directory(header)

    tensors: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"{entry['name']}: payload truncated")
        raw = payload[lo:hi]
        if zlib.crc32(raw) != entry["crc32"]:
            raise CheckpointError(f"{entry['name']}: checksum mismatch")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        arr = arr.reshape(entry["shape"]).astype(entry["dtype"], copy=True)
        tensors[entry["name"]] = Tensor(arr)

    cfg = ModelConfig(**header["cfg"])
    mcfg = MLAConfig(**header["mcfg"]) if header["mcfg"] else None
    conv_k = header.get("conv_k")
    k = conv_k[0] if conv_k else 4

    try:
        layers = []
        for i, kind in enumerate(cfg.layer_kinds):
            p = f"layers.{i}"
            mixer = _mixer_from(tensors, p + ".mixer", kind, cfg, k)
            layers.append(LayerParams(
                norm1=tensors[f"{p}.norm1"],
                mixer=mixer,
                norm2=tensors[f"{p}.norm2"],
                mlp_gate=tensors[f"{p}.mlp_gate"],
                mlp_up=tensors[f"{p}.mlp_up"],
                mlp_down=tensors[f"{p}.mlp_down"],
            ))
        return HybridModel(
            cfg=cfg, mcfg=mcfg,
            embed=tensors["embed"],
            layers=layers,
            final_norm=tensors["final_norm"],
            head=tensors["head"],
        )
    except KeyError as exc:
        raise CheckpointError(f"missing tensor {exc}") from None


def _mixer_from(tensors, prefix, kind, cfg, k) -> MixerWeights:
    def g(name):
        key = f"{prefix}.{name}"
        if key not in tensors:
            raise CheckpointError(f"missing tensor {key}")
        return tensors[key]

    if kind == KIND_MHA:
        return AttentionWeights(W_Q=g("W_Q"), W_K=g("W_K"), W_V=g("W_V"), W_O=g("W_O"))
    if kind == KIND_MLA:
        return MLAWeights(
            W_DQ=g("W_DQ"), W_UQ=g("W_UQ"), W_QR=g("W_QR"), W_DKV=g("W_DKV"),
            W_UK=g("W_UK"), W_UV=g("W_UV"), W_KR=g("W_KR"), W_O=g("W_O"),
        )
    return Mamba2Weights(
        n_h=cfg.n_h, n_kv=cfg.n_kv, d_h=cfg.d_h, k=k,
        W_x=g("W_x"), W_B=g("W_B"), W_C=g("W_C"),
        conv_x=g("conv_x"), conv_B=g("conv_B"), conv_C=g("conv_C"),
        a_log=g("a_log"), delta_w=g("delta_w"), delta_b=g("delta_b"),
        D=g("D"), W_out=g("W_out"),
    )
