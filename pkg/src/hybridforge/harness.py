"""Synthetic token streams, toy teacher training, evaluation, benchmarks.

The data generator is an order-2 bucket process: the pair of preceding
tokens hashes into a bucket whose small preferred-token table drives the
next draw, lightly mixed with uniform noise. On top of that, marked
positions copy the token from a fixed span back, planting a long-range
dependency much wider than any convolution kernel in the model family, so
recurrent and attention mixers are genuinely distinguishable on this
stream. Every sequence derives from its own counter-keyed generator, which
makes any window of the stream reproducible in isolation.

Benchmarks run the real cached decode path one token at a time on a single
thread and report medians over repetitions; everything except the
wall-clock figures is bit-deterministic per seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import numkernel as nk
from . import distill
from .attention import KIND_MHA, MLAConfig, ModelConfig
from .compose import HybridModel, build_model
from .distill import Batch, TrainConfig, kd_loss
from .numkernel import Tensor

__all__ = [
    "SynthSpec",
    "EvalReport",
    "toy_model_config",
    "toy_mla_config",
    "sequences",
    "batches",
    "split_stream",
    "is_copy_position",
    "gen_data",
    "cross_entropy",
    "train_teacher",
    "unigram_perplexity",
    "eval_model",
    "bench",
    "bench_rows",
    "bench_csv",
    "greedy_decode",
]

# widest convolution kernel used anywhere in the model family; the planted
# copy span must exceed it so no conv path can shortcut the dependency
_MAX_CONV_WIDTH = 4


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic character process."""

    vocab: int = 256
    seq_len: int = 128
    order: int = 2
    copy_span: int = 24
    copy_every: int = 6
    mix_uniform: float = 0.05
    buckets: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if self.order != 2:
            raise ValueError("only the order-2 process is implemented")
        if self.copy_span <= _MAX_CONV_WIDTH:
            raise ValueError(f"copy_span must exceed the conv width {_MAX_CONV_WIDTH}")
        if self.copy_every < 2:
            raise ValueError("copy_every must be >= 2")
        if not 0.0 <= self.mix_uniform < 1.0:
            raise ValueError("mix_uniform must lie in [0, 1)")
        if self.buckets < 1:
            raise ValueError("buckets must be >= 1")


def toy_model_config(**overrides) -> ModelConfig:
    """Desk-scale stack: big enough that rank and placement choices matter."""
    base = dict(L=8, d=64, n_h=4, n_kv=2, d_h=16, vocab=256)
    base.update(overrides)
    return ModelConfig(**base)


def toy_mla_config(**overrides) -> MLAConfig:
    base = dict(r_q=48, r_kv=16, d_qk=12, d_v=16, d_r=4)
    base.update(overrides)
    return MLAConfig(**base)


# ---------------------------------------------------------------------------
# stream generation


def is_copy_position(spec: SynthSpec, t: int) -> bool:
    """Marked positions repeat the token copy_span steps back."""
    return t >= spec.copy_span and t % spec.copy_every == 0


def _bucket_tables(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-bucket preferred tokens and cumulative weights, fixed by the seed."""
    rng = np.random.default_rng([spec.seed, 0xB0C])
    top = min(4, spec.vocab)
    preferred = rng.integers(0, spec.vocab, size=(spec.buckets, top))
    weights = rng.random((spec.buckets, top)) + 0.25
    cumulative = np.cumsum(weights, axis=1)
    cumulative /= cumulative[:, -1:]
    return preferred, cumulative


def _bucket_of(spec: SynthSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # odd multipliers spread the token pair across buckets
    return (a * 2654435761 + b * 40503 + spec.seed * 97) % spec.buckets


def sequences(spec: SynthSpec, start: int, count: int) -> np.ndarray:
    """Token ids for stream sequences [start, start+count), shape (count, seq_len).

    Each sequence draws from default_rng([seed, index]), so any window of the
    stream regenerates identically without touching its neighbours.
    """
    if start < 0 or count < 0:
        raise ValueError("start and count must be non-negative")
    preferred, cumulative = _bucket_tables(spec)
    out = np.empty((count, spec.seq_len), dtype=np.int64)
    for row, index in enumerate(range(start, start + count)):
        rng = np.random.default_rng([spec.seed, index])
        # all randomness drawn up front so the position loop stays cheap
        u_mix = rng.random(spec.seq_len)
        u_pick = rng.random(spec.seq_len)
        uniform_draws = rng.integers(0, spec.vocab, size=spec.seq_len)
        x = out[row]
        x[:2] = uniform_draws[:2]
        for t in range(2, spec.seq_len):
            if is_copy_position(spec, t):
                x[t] = x[t - spec.copy_span]
            elif u_mix[t] < spec.mix_uniform:
                x[t] = uniform_draws[t]
            else:
                bucket = _bucket_of(spec, x[t - 2], x[t - 1])
                slot = np.searchsorted(cumulative[bucket], u_pick[t])
                x[t] = preferred[bucket, slot]
    return out


def batches(spec: SynthSpec, start: int, count: int, batch_size: int) -> list[Batch]:
    """Consecutive stream sequences packed into (batch_size, seq_len) batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    tokens = sequences(spec, start, count)
    return [Batch(tokens[i : i + batch_size]) for i in range(0, count, batch_size)]


def split_stream(
    spec: SynthSpec, count: int, batch_size: int
) -> tuple[list[Batch], list[Batch]]:
    """Leading fifth of the stream for layer alignment, the rest for KD."""
    n_align = count // 5
    return (
        batches(spec, 0, n_align, batch_size),
        batches(spec, n_align, count - n_align, batch_size),
    )


def gen_data(spec: SynthSpec, count: int, batch_size: int) -> dict:
    """Materialize the training splits plus a disjoint held-out stream window."""
    align, kd = split_stream(spec, count, batch_size)
    held_out = batches(spec, count, max(count // 10, 1), batch_size)
    return {"ild": align, "kd": kd, "eval": held_out}


# ---------------------------------------------------------------------------
# teacher training


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token negative log-likelihood over every position."""
    logp = nk.log_softmax(logits, axis=-1)
    picked = nk.take_last_axis(logp, np.asarray(targets))
    return nk.neg(nk.tmean(picked))


def train_teacher(
    cfg: ModelConfig,
    data: Iterable[Batch],
    tc: TrainConfig,
    log=None,
) -> HybridModel:
    """Cross-entropy train a fresh attention-only stack on the stream."""
    if any(kind != KIND_MHA for kind in cfg.layer_kinds):
        raise ValueError("teacher must be attention-only")
    dtype = np.float32 if tc.precision == "float32" else np.float64
    model = build_model(cfg, seed=tc.seed, dtype=dtype)

    def loss_fn(m, batch):
        return cross_entropy(m.forward(batch.inputs), batch.targets)

    return distill._train(model, data, tc, loss_fn, "teacher", log)


def unigram_perplexity(data: Sequence[Batch]) -> float:
    """Perplexity of the best context-free model of the same tokens."""
    tokens = np.concatenate([b.targets.ravel() for b in data])
    counts = np.bincount(tokens)
    freqs = counts[tokens] / tokens.size
    return float(np.exp(-np.mean(np.log(freqs))))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    """Quality and throughput summary; unset fields stay None."""

    perplexity: Optional[float] = None
    mean_kl_to_teacher: Optional[float] = None
    tokens_per_s_prefill: Optional[float] = None
    tokens_per_s_decode: Optional[float] = None
    peak_cache_bytes: Optional[int] = None

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value is None:
                continue
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def eval_model(
    model: HybridModel,
    data: Sequence[Batch],
    teacher: Optional[HybridModel] = None,
) -> EvalReport:
    """Teacher-forced perplexity, plus mean per-token KL when a teacher is given."""
    data = list(data)
    if not data:
        raise ValueError("need at least one evaluation batch")
    top = max(int(b.x.max()) for b in data)
    if top >= model.cfg.vocab:
        raise ValueError(f"token id {top} outside model vocab {model.cfg.vocab}")
    if teacher is not None and teacher.cfg.vocab != model.cfg.vocab:
        raise ValueError("teacher/model vocab mismatch")

    ce_vals = []
    kl_vals = []
    with nk.no_grad():
        for batch in data:
            logits = model.forward(batch.inputs)
            ce_vals.append(cross_entropy(logits, batch.targets).item())
            if teacher is not None:
                t_logits = teacher.forward(batch.inputs)
                positions = batch.inputs.shape[1]
                kl_vals.append(kd_loss(t_logits, logits).item() / positions)
    kl = float(np.mean(kl_vals)) if teacher is not None else None
    # KL of near-identical models can round epsilon-negative; clamp to the domain
    if kl is not None and kl < 0:
        kl = 0.0
    return EvalReport(perplexity=float(np.exp(np.mean(ce_vals))), mean_kl_to_teacher=kl)


# ---------------------------------------------------------------------------
# throughput and cache benchmarks


def greedy_decode(
    model: HybridModel,
    prompt: np.ndarray,
    gen_len: int,
) -> tuple[np.ndarray, np.ndarray, float, list]:
    """Cached prefill + one-token-at-a-time argmax decode.

    Returns (generated ids, per-token decode seconds, prefill seconds, caches).
    """
    dtype = model.embed.dtype
    caches = model.init_caches(dtype)
    out = np.empty(gen_len, dtype=np.int64)
    times = np.empty(gen_len)
    with nk.no_grad():
        t0 = time.perf_counter()
        logits, caches = model.forward_cached(np.asarray(prompt), caches)
        prefill_s = time.perf_counter() - t0
        last = int(np.argmax(logits.data[-1]))
        for j in range(gen_len):
            t0 = time.perf_counter()
            logits, caches = model.forward_cached(np.array([last]), caches)
            times[j] = time.perf_counter() - t0
            last = int(np.argmax(logits.data[-1]))
            out[j] = last
    return out, times, prefill_s, caches


def bench(
    model: HybridModel,
    prompt_len: int,
    gen_len: int,
    reps: int = 3,
    seed: int = 0,
) -> EvalReport:
    """Median single-sequence throughput and the peak per-token cache footprint."""
    if reps < 3:
        raise ValueError("reps must be >= 3 for a stable median")
    if prompt_len < 1 or gen_len < 1:
        raise ValueError("prompt_len and gen_len must be >= 1")
    prompt = np.random.default_rng([seed, 0]).integers(0, model.cfg.vocab, size=prompt_len)
    prefill_times = []
    decode_times = []
    peak = None
    for _ in range(reps):
        _, times, prefill_s, caches = greedy_decode(model, prompt, gen_len)
        prefill_times.append(prefill_s)
        decode_times.append(times.sum())
        kv, _ = model.cache_bytes(caches)
        peak = kv if peak is None else max(peak, kv)  # caches only grow
    return EvalReport(
        tokens_per_s_prefill=prompt_len / float(np.median(prefill_times)),
        tokens_per_s_decode=gen_len / float(np.median(decode_times)),
        peak_cache_bytes=int(peak),
    )


def bench_rows(
    model: HybridModel,
    prompt_len: int,
    gen_lens: Sequence[int],
    reps: int = 3,
    seed: int = 0,
) -> list[dict]:
    rows = []
    for gen_len in gen_lens:
        report = bench(model, prompt_len, gen_len, reps=reps, seed=seed)
        rows.append({
            "gen_len": int(gen_len),
            "tokens_per_s": report.tokens_per_s_decode,
            "peak_cache_bytes": report.peak_cache_bytes,
        })
    return rows


def bench_csv(rows: Sequence[dict]) -> str:
    lines = ["gen_len,tokens_per_s,peak_cache_bytes"]
    for row in rows:
        lines.append(f"{row['gen_len']},{row['tokens_per_s']:.3f},{row['peak_cache_bytes']}")
    return "\n".join(lines) + "\n"
