"""
Two-phase distillation: align the layers, then match the logits
===============================================================

A converted student inherits factorized weights, but its mixer sublayers
still drift from the teacher's.  Distillation runs in two phases: first an
alignment phase trains each student layer to reproduce the teacher's mixer
outputs under the teacher's own inputs, then knowledge distillation matches
the output distributions.  This demo trains a small teacher, converts it to
an all-SSM student, and shows both losses falling in order.
"""

import itertools

import numpy as np

from hybridforge import numkernel as nk
from hybridforge.attention import KIND_MAMBA2, ModelConfig
from hybridforge.compose import convert_model
from hybridforge.distill import TrainConfig, ild_loss, kd_loss, run_ild, run_kd
from hybridforge.harness import SynthSpec, batches, eval_model, train_teacher

spec = SynthSpec(vocab=64, seq_len=32, copy_span=8, copy_every=4, buckets=64,
                 seed=3)
cfg = ModelConfig(L=2, d=32, n_h=4, n_kv=2, d_h=8, vocab=64)

# A quick teacher: enough steps to be clearly better than chance on the
# synthetic stream, trained on an 80% split.
train_data = batches(spec, 0, 160, 8)
held_out = batches(spec, 200, 16, 8)
teacher = train_teacher(cfg, itertools.islice(itertools.cycle(train_data), 150),
                        TrainConfig(steps=150, learning_rate=3e-3, log_every=0))
print(f"teacher perplexity on held-out data: "
      f"{eval_model(teacher, held_out).perplexity:.2f} (vocab {cfg.vocab})")

# Conversion keeps the embeddings, norms, MLPs, and head, and initializes
# SSM mixers from the attention weights.
student = convert_model(teacher, KIND_MAMBA2)


def mean_kd(model):
    with nk.no_grad():
        vals = [kd_loss(teacher.forward(b.inputs), model.forward(b.inputs)).item()
                for b in held_out]
    return float(np.mean(vals))


def mean_align(model):
    with nk.no_grad():
        vals = []
        for b in held_out:
            _, t_outs = teacher.forward(b.inputs, collect_mixer_outputs=True)
            _, s_outs = model.forward(b.inputs, collect_mixer_outputs=True)
            vals.append(ild_loss(t_outs, s_outs).item())
    return float(np.mean(vals))


print(f"\nsequence-summed KL to teacher after conversion: "
      f"{mean_kd(student):.4f}")

# Phase 1: alignment pulls each student mixer toward the teacher's per-layer
# outputs; the held-out alignment loss drops accordingly.
align = batches(spec, 160, 24, 8)
align_before = mean_align(student)
run_ild(teacher, student, itertools.islice(itertools.cycle(align), 40),
        TrainConfig(steps=40, learning_rate=1e-3, log_every=0))
align_after = mean_align(student)
print(f"alignment loss on held-out data: {align_before:.4f} -> "
      f"{align_after:.4f}")
assert align_after < align_before

kl_after_align = mean_kd(student)
print(f"sequence-summed KL after alignment: {kl_after_align:.4f}")

# Phase 2: knowledge distillation on the big split closes the remaining gap
# in the output distribution.
run_kd(teacher, student, itertools.islice(itertools.cycle(train_data), 80),
       TrainConfig(steps=80, learning_rate=1e-3, log_every=0))
kl_after_kd = mean_kd(student)
print(f"sequence-summed KL after distillation: {kl_after_kd:.4f}")
assert kl_after_kd < kl_after_align

report = eval_model(student, held_out, teacher=teacher)
print(f"\nfinal student: perplexity {report.perplexity:.2f}, "
      f"per-token mean KL {report.mean_kl_to_teacher:.4f}")
