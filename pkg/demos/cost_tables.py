"""Walk-through of the static cost analyzer.

Reproduces the parameter/FLOP figures for the flow-network family, the
heavy flow baselines, and the full video system at the standard width
multipliers and key-frame intervals.

Run: python demos/cost_tables.py
"""

from flowdet.analyzer import (
    SystemCostConfig,
    amortized_cost,
    count_network,
    format_report,
    single_frame_cost,
    speedup_ratio,
)
from flowdet.baselines import build_flownet_half, build_flownet_s
from flowdet.lightflow import build_light_flow

# ---------------------------------------------------------------------------
# 1. The flow network family, counted at a 512x384 input.
#    Width multiplier beta scales every feature channel count; the five
#    2-channel flow predictors never scale.
# ---------------------------------------------------------------------------
print("flow network cost vs width multiplier (input 512x384x6)")
print(f"{'beta':>6} {'params (M)':>12} {'FLOPs (B)':>11}")
for beta in (1.0, 0.75, 0.5, 0.25):
    report = count_network(build_light_flow(beta).graph, {"Images": (6, 384, 512)})
    print(f"{beta:>6} {report.params / 1e6:>12.3f} {report.flops / 1e9:>11.4f}")

# ---------------------------------------------------------------------------
# 2. How much cheaper is it than classic encoder/decoder flow networks?
#    The baselines exist as analyzer-only layer graphs; transposed convs
#    are billed at output resolution.
# ---------------------------------------------------------------------------
print("\nheavy flow baselines at the same input")
flownet = count_network(build_flownet_s(), {"Images": (6, 384, 512)})
flownet_half = count_network(build_flownet_half(), {"Images": (6, 384, 512)})
light = count_network(build_light_flow(1.0).graph, {"Images": (6, 384, 512)})
for name, rep in (("flownet", flownet), ("flownet-half", flownet_half), ("light-flow 1.0", light)):
    print(f"{name:>14}: {rep.params / 1e6:7.2f} M params, {rep.flops / 1e9:8.3f} B FLOPs")
print(f"speedup flownet -> light-flow: {speedup_ratio(flownet, light):.1f}x")

# ---------------------------------------------------------------------------
# 3. Per-layer detail for the smallest configuration.
# ---------------------------------------------------------------------------
print("\nper-layer report, width 0.5, first 12 layers")
report = count_network(build_light_flow(0.5).graph, {"Images": (6, 384, 512)})
print(format_report(report, top=12))

# ---------------------------------------------------------------------------
# 4. Whole-system amortized cost.  Key frames pay for the backbone, the
#    aggregation GRU, and all heads; non-key frames pay only for flow
#    estimation, two map warps, and the head remainder.  The flow network
#    runs every frame at half the detection resolution.
# ---------------------------------------------------------------------------
print("\nsystem cost at detection input 400x224, flow input 200x112, l = 10")
print(f"{'alpha':>6} {'beta':>6} {'params (M)':>12} {'FLOPs/frame (B)':>16}")
for alpha, beta in ((1.0, 1.0), (1.0, 0.75), (1.0, 0.5), (0.75, 0.75), (0.75, 0.5), (0.5, 0.5)):
    cost = amortized_cost(SystemCostConfig(alpha=alpha, beta=beta, key_interval=10))
    print(f"{alpha:>6} {beta:>6} {cost.params / 1e6:>12.3f} {cost.per_frame_flops / 1e9:>16.4f}")

dense = single_frame_cost(alpha=1.0)
print(f"\nsingle-frame baseline (no flow, no aggregation): "
      f"{dense.params / 1e6:.2f} M params, {dense.per_frame_flops / 1e9:.3f} B FLOPs/frame")
ours = amortized_cost(SystemCostConfig(alpha=1.0, beta=1.0, key_interval=10))
print(f"key-frame scheduling buys {speedup_ratio(dense, ours):.1f}x fewer FLOPs per frame")

# ---------------------------------------------------------------------------
# 5. The key-frame interval trades freshness for compute: per-frame cost
#    decays as (key + (l-1) * nonkey) / l.
# ---------------------------------------------------------------------------
print("\nper-frame FLOPs vs key-frame interval (alpha = beta = 1.0)")
for l in (1, 2, 5, 10, 20):
    cost = amortized_cost(SystemCostConfig(key_interval=l))
    print(f"  l = {l:>2}: {cost.per_frame_flops / 1e9:.4f} B")
