"""Tour of the kernel layer: warping, GRU gating, gradients, MAC counting.

Run: python demos/kernels_and_gradients.py
"""

import numpy as np

from flowdet import ops
from flowdet.aggregation import flow_guided_gru, init_gru_params
from flowdet.analyzer import count_network
from flowdet.graph import init_params, run_graph
from flowdet.lightflow import build_light_flow, flow_fusion_executor
from flowdet.ops import MAC_COUNTER
from flowdet.selfcheck import gradient_check
from flowdet.tensor import Tensor, no_grad

rng = np.random.default_rng(0)

# ---------------------------------------------------------------------------
# Bilinear warping.  out(p) samples the feature map at p + flow(p); zero
# flow is the identity, integer flow is an index shift with zero fill.
# ---------------------------------------------------------------------------
ramp = Tensor(np.tile(np.arange(6.0), (1, 1, 4, 1)))
shift_right = np.zeros((1, 2, 4, 6))
shift_right[0, 0] = 1.0
print("ramp row:          ", ramp.data[0, 0, 0])
print("warped by (1, 0):  ", ops.bilinear_warp(ramp, Tensor(shift_right)).data[0, 0, 0])
half_px = np.zeros((1, 2, 4, 6))
half_px[0, 0] = 0.5
print("warped by (0.5, 0):", ops.bilinear_warp(ramp, Tensor(half_px)).data[0, 0, 0])

# ---------------------------------------------------------------------------
# Flow-guided GRU.  The previous aggregated state is warped into the
# current frame, then update/reset gates blend it with a ReLU candidate.
# With all parameters at zero both gates sit at 0.5 and the candidate is
# zero, so the output is exactly half the warped state.
# ---------------------------------------------------------------------------
d = 4
zeros = init_gru_params(d, rng)
for tensor in zeros.tensors():
    tensor.data[...] = 0.0
f_cur = Tensor(rng.standard_normal((1, d, 5, 5)))
f_prev = Tensor(rng.standard_normal((1, d, 5, 5)))
out = flow_guided_gru(f_cur, f_prev, Tensor(np.zeros((1, 2, 5, 5))), zeros)
print("\nGRU with zero parameters: max |out - prev/2| =", np.abs(out.data - 0.5 * f_prev.data).max())

# ---------------------------------------------------------------------------
# Every kernel has an analytic backward pass; central finite differences
# agree to ~1e-10 in float64.
# ---------------------------------------------------------------------------
x = Tensor(rng.standard_normal((1, 3, 6, 6)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
err = gradient_check(lambda: ops.conv2d(x, ops.ConvParams(weight=w, stride=2, padding=1)).sum(), [x, w])
print(f"\nconv2d gradient vs finite differences: max relative error {err:.2e}")

feat = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
flow = Tensor(rng.integers(-1, 2, (1, 2, 5, 5)) + rng.uniform(0.1, 0.9, (1, 2, 5, 5)), requires_grad=True)
err = gradient_check(lambda: ops.bilinear_warp(feat, flow).sum(), [feat, flow])
print(f"warp gradient (feature and flow paths):  max relative error {err:.2e}")

# ---------------------------------------------------------------------------
# The conv kernels can count their own multiply-adds; the static analyzer
# must agree exactly with what actually executed (FLOPs = 2 * MACs).
# ---------------------------------------------------------------------------
spec = build_light_flow(0.5)
params = init_params(spec.graph, {"Images": (6, 64, 64)}, rng)
frames = Tensor(rng.standard_normal((1, 6, 64, 64)).astype(np.float32))
MAC_COUNTER.enabled = True
MAC_COUNTER.reset()
with no_grad():
    run_graph(spec.graph, params, {"Images": frames}, special={"flow_fusion": flow_fusion_executor()})
executed = MAC_COUNTER.macs
MAC_COUNTER.enabled = False
counted = count_network(spec.graph, {"Images": (6, 64, 64)}).flops
print(f"\nexecuted MACs: {executed:,}; analyzer FLOPs: {counted:,}; exact match: {2 * executed == counted}")
