"""
Cache budgets for published hybrid layouts
==========================================

A hybrid's decode-time memory is dominated by the per-token cache of its
attention layers; state-space layers contribute only a constant.  The cache
report prices a layout against an all-attention baseline of the same shape.
This demo reproduces the headline percentages for three model shapes at
several attention budgets, then breaks one small report down layer by layer.
"""

from hybridforge.attention import MLAConfig, ModelConfig
from hybridforge.compose import kv_report
from hybridforge.smart import HybridLayout

# Each row: stack shape, latent ranks, and the attention layer placement.
# The percentage depends only on the layout and the widths, not on the
# sequence length or element size, so t=2048 is just a concrete horizon.
ROWS = [
    (16, 2048, 32, 8, 64, 1344, 128, 32, 32, [0, 2, 4, 6, 8, 10, 12, 14]),
    (16, 2048, 32, 8, 64, 1344, 128, 32, 32, [0, 2, 5, 8, 11, 14]),
    (16, 2048, 32, 8, 64, 1344, 128, 32, 32, [0, 5, 10, 14]),
    (28, 3072, 24, 8, 128, 1536, 128, 64, 64,
     [0, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20, 22, 24, 27]),
    (28, 3072, 24, 8, 128, 1536, 128, 64, 64, [0, 4, 8, 12, 16, 20, 24, 27]),
    (28, 3072, 24, 8, 128, 1536, 128, 64, 64, [0, 5, 11, 17, 22, 27]),
    (32, 4096, 32, 8, 128, 2048, 160, 64, 64,
     [0, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20, 22, 24, 26, 28, 31]),
    (32, 4096, 32, 8, 128, 2048, 160, 64, 64, [0, 4, 8, 13, 18, 23, 27, 31]),
]

print(" L    d    attention layers   cache vs baseline")
for L, d, n_h, n_kv, d_h, r_q, r_kv, d_qk, d_r, indices in ROWS:
    cfg = ModelConfig(L=L, d=d, n_h=n_h, n_kv=n_kv, d_h=d_h, vocab=256)
    mcfg = MLAConfig(r_q=r_q, r_kv=r_kv, d_qk=d_qk, d_v=d_h, d_r=d_r)
    report = kv_report(cfg, HybridLayout(mla_indices=indices), mcfg, t=2048)
    print(f"{L:3d} {d:5d}    {len(indices):2d} of {L:2d}           "
          f"{report['percent_of_baseline']:5.2f}%")

# The ratio decomposes per layer: an attention layer stores r_kv + d_r
# elements per token where the baseline stores 2 * n_kv * d_h, and a
# state-space layer stores none.
cfg = ModelConfig(L=4, d=32, n_h=4, n_kv=2, d_h=8, vocab=64)
mcfg = MLAConfig(r_q=24, r_kv=8, d_qk=6, d_v=8, d_r=2)
report = kv_report(cfg, HybridLayout(mla_indices=[0, 3]), mcfg, t=100)
print(f"\ntoy 4-layer stack at t={report['t']} "
      f"({report['elem_bytes']} bytes/element):")
for i, (kind, b) in enumerate(zip(report["layer_kinds"],
                                  report["per_layer_bytes"])):
    print(f"  layer {i} [{kind:7s}] {b:6d} bytes")
print(f"  total {report['total_kv_bytes']} vs baseline "
      f"{report['baseline_kv_bytes']} -> {report['percent_of_baseline']}% "
      f"(+ {report['ssm_state_bytes']} bytes constant state)")
