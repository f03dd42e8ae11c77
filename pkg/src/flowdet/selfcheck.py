"""Executable verification: gradient checks and independent-oracle suites.

Every analytic backward pass is compared against central finite
differences in float64; every tricky kernel is compared against a slow
scalar reference written without any of the vectorized machinery.  The
test suite and the `selftest` CLI subcommand both run these.
"""

import numpy as np

from . import ops
from .aggregation import GruParams, flow_guided_gru
from .analyzer import count_network, gru_layercosts
from .detector import nms, psroi_warp
from .lightflow import epe_loss
from .ops import MAC_COUNTER, ConvParams
from .tensor import Tensor


def finite_difference_gradients(fn, tensors, step=1e-4):
    """Central differences of the scalar `fn()` w.r.t. each tensor's entries."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn().data)
            flat[i] = orig - step
            f_minus = float(fn().data)
            flat[i] = orig
            gf[i] = (f_plus - f_minus) / (2 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric):
    """Max elementwise |a - n| / max(|a|, |n|, 1)."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def gradient_check(fn, tensors, step=1e-4):
    """Run fn, backprop, and report the worst error against finite differences."""
    for t in tensors:
        t.zero_grad()
    out = fn()
    out.backward()
    numeric = finite_difference_gradients(fn, tensors, step)
    return max(max_relative_error(t.grad, n) for t, n in zip(tensors, numeric))


def _rand(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _safe_flow(rng, n, h, w, span=2):
    """Random flow whose fractional parts stay in [0.1, 0.9]: finite
    differencing never crosses a bilinear grid line."""
    ints = rng.integers(-span, span + 1, size=(n, 2, h, w)).astype(np.float64)
    frac = rng.uniform(0.1, 0.9, size=(n, 2, h, w))
    return Tensor(ints + frac, requires_grad=True)


def check_conv2d(rng):
    x = _rand(rng, (1, 2, 6, 6))
    w = _rand(rng, (3, 2, 3, 3))
    b = _rand(rng, (3,))
    p = ConvParams(weight=w, bias=b, stride=2, padding=1)
    return gradient_check(lambda: ops.conv2d(x, p).sum(), [x, w, b])


def check_depthwise_separable(rng):
    x = _rand(rng, (1, 3, 5, 5))
    dw_w = _rand(rng, (3, 1, 3, 3))
    pw_w = _rand(rng, (4, 3, 1, 1))
    pw_b = _rand(rng, (4,))
    dw = ConvParams(weight=dw_w, stride=1, padding=1, groups=3)
    pw = ConvParams(weight=pw_w, bias=pw_b)
    return gradient_check(lambda: ops.depthwise_separable(x, dw, pw).sum(), [x, dw_w, pw_w, pw_b])


def check_bilinear_warp(rng):
    feat = _rand(rng, (1, 2, 5, 5))
    flow = _safe_flow(rng, 1, 5, 5)
    return gradient_check(lambda: ops.bilinear_warp(feat, flow).sum(), [feat, flow])


def _random_gru_params(rng, d):
    def k():
        return _rand(rng, (d, d, 3, 3))

    def b():
        return _rand(rng, (d,))

    return GruParams(k(), k(), k(), k(), k(), k(), b(), b(), b())


def check_flow_guided_gru(rng):
    d = 2
    f_cur = _rand(rng, (1, d, 4, 4))
    f_prev = _rand(rng, (1, d, 4, 4))
    flow = _safe_flow(rng, 1, 4, 4, span=1)
    params = _random_gru_params(rng, d)
    tensors = [f_cur, f_prev, flow] + params.tensors()
    return gradient_check(lambda: flow_guided_gru(f_cur, f_prev, flow, params).sum(), tensors)


def check_epe_loss(rng):
    pred = _rand(rng, (1, 2, 4, 4))
    gt = Tensor(rng.standard_normal((1, 2, 4, 4)))
    return gradient_check(lambda: epe_loss(pred, gt), [pred])


GRADIENT_CHECKS = (
    ("conv2d", check_conv2d, 1e-5),
    ("depthwise_separable", check_depthwise_separable, 1e-5),
    ("bilinear_warp", check_bilinear_warp, 1e-4),
    ("flow_guided_gru", check_flow_guided_gru, 1e-4),
    ("epe_loss", check_epe_loss, 1e-4),
)


def run_gradient_suite(instances=20, seed=0):
    """[(name, worst error over `instances` random cases, tolerance, ok)]."""
    results = []
    for name, fn, tol in GRADIENT_CHECKS:
        rng = np.random.default_rng(seed)
        worst = max(fn(rng) for _ in range(instances))
        results.append((name, worst, tol, worst < tol))
    return results


# -- scalar references -------------------------------------------------------


def warp_scalar_reference(feature, flow):
    """Per-pixel bilinear sampling with zero-padding, plain loops."""
    feature = feature.data if isinstance(feature, Tensor) else np.asarray(feature)
    flow = flow.data if isinstance(flow, Tensor) else np.asarray(flow)
    n, c, h, w = feature.shape
    out = np.zeros_like(feature, dtype=np.float64)
    f64 = feature.astype(np.float64)
    for b in range(n):
        for y in range(h):
            for x in range(w):
                sx = x + float(flow[b, 0, y, x])
                sy = y + float(flow[b, 1, y, x])
                x0, y0 = int(np.floor(sx)), int(np.floor(sy))
                tx, ty = sx - x0, sy - y0
                for dy, dx, wt in (
                    (0, 0, (1 - tx) * (1 - ty)),
                    (0, 1, tx * (1 - ty)),
                    (1, 0, (1 - tx) * ty),
                    (1, 1, tx * ty),
                ):
                    yy, xx = y0 + dy, x0 + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        out[b, :, y, x] += wt * f64[b, :, yy, xx]
    return out


def _conv3x3_scalar(x, w, bias=None):
    d_out, d_in = w.shape[:2]
    h, wd = x.shape[1:]
    out = np.zeros((d_out, h, wd))
    for o in range(d_out):
        for y in range(h):
            for xx in range(wd):
                acc = float(bias[o]) if bias is not None else 0.0
                for i in range(d_in):
                    for ky in range(3):
                        for kx in range(3):
                            yy, xxx = y + ky - 1, xx + kx - 1
                            if 0 <= yy < h and 0 <= xxx < wd:
                                acc += x[i, yy, xxx] * w[o, i, ky, kx]
                out[o, y, xx] = acc
    return out


def gru_scalar_reference(f_cur, f_prev, flow, params: GruParams):
    """Scalar-loop reimplementation of the flow-guided GRU update."""

    def arr(t):
        return (t.data if isinstance(t, Tensor) else np.asarray(t)).astype(np.float64)

    fc, fp, fl = arr(f_cur), arr(f_prev), arr(flow)
    outs = []
    for b in range(fc.shape[0]):
        fhat = warp_scalar_reference(fp[b][None], fl[b][None])[0]
        sig = lambda v: 1.0 / (1.0 + np.exp(-v))
        z = sig(_conv3x3_scalar(fc[b], arr(params.w_z), arr(params.b_z)) + _conv3x3_scalar(fhat, arr(params.u_z)))
        r = sig(_conv3x3_scalar(fc[b], arr(params.w_r), arr(params.b_r)) + _conv3x3_scalar(fhat, arr(params.u_r)))
        cand = np.maximum(
            0.0,
            _conv3x3_scalar(fc[b], arr(params.w_h), arr(params.b_h)) + _conv3x3_scalar(r * fhat, arr(params.u_h)),
        )
        outs.append((1 - z) * fhat + z * cand)
    return np.stack(outs)


def psroi_scalar_reference(maps, rois, stride=16, group_channels=None):
    """Scalar-loop position-sensitive pooling (clamped bilinear samples)."""
    maps = maps.data if isinstance(maps, Tensor) else np.asarray(maps)
    m = maps[0].astype(np.float64)
    bins = 7 * 7
    group = group_channels or maps.shape[1] // bins
    fh, fw = maps.shape[2:]
    img_h, img_w = fh * stride, fw * stride
    out = np.zeros((len(rois), group, 7, 7))

    def sample(c, sy, sx):
        sy = min(max(sy, 0.0), fh - 1.0)
        sx = min(max(sx, 0.0), fw - 1.0)
        y0, x0 = int(np.floor(sy)), int(np.floor(sx))
        y1, x1 = min(y0 + 1, fh - 1), min(x0 + 1, fw - 1)
        ty, tx = sy - y0, sx - x0
        return (
            m[c, y0, x0] * (1 - ty) * (1 - tx)
            + m[c, y0, x1] * (1 - ty) * tx
            + m[c, y1, x0] * ty * (1 - tx)
            + m[c, y1, x1] * ty * tx
        )

    for ridx, roi in enumerate(np.asarray(rois, dtype=np.float64)):
        x1 = min(max(roi[0], 0.0), img_w)
        y1 = min(max(roi[1], 0.0), img_h)
        x2 = min(max(roi[2], 0.0), img_w)
        y2 = min(max(roi[3], 0.0), img_h)
        bw = (x2 - x1) / stride / 7
        bh = (y2 - y1) / stride / 7
        for i in range(7):
            for j in range(7):
                g = i * 7 + j
                for k in range(group):
                    c = g * group + k
                    acc = 0.0
                    for si in range(2):
                        for sj in range(2):
                            sy = y1 / stride + (i + (si + 0.5) / 2) * bh - 0.5
                            sx = x1 / stride + (j + (sj + 0.5) / 2) * bw - 0.5
                            acc += sample(c, sy, sx)
                    out[ridx, k, i, j] = acc / 4.0
    return out


def nms_reference(boxes, scores, thresh):
    """Greedy suppression computed with scalar loops (no vectorization)."""

    def iou(a, b):
        iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
        ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
        inter = iw * ih
        union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
        return inter / union if union > 0 else 0.0

    remaining = set(range(len(boxes)))
    picked = []
    while remaining:
        best = min(remaining, key=lambda i: (-scores[i], i))
        picked.append(best)
        remaining.discard(best)
        for j in list(remaining):
            if iou(boxes[best], boxes[j]) > thresh:
                remaining.discard(j)
    return picked


def random_boxes(rng, n, extent=200.0):
    x1 = rng.uniform(0, extent * 0.8, n)
    y1 = rng.uniform(0, extent * 0.8, n)
    w = rng.uniform(2, extent * 0.4, n)
    h = rng.uniform(2, extent * 0.4, n)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


# -- oracle suite ------------------------------------------------------------


def run_oracle_suite(seed=0, nms_trials=20, nms_max_boxes=200):
    """[(name, ok, detail)] for the independent-reference equivalences."""
    rng = np.random.default_rng(seed)
    results = []

    feat = Tensor(rng.standard_normal((2, 3, 6, 7)))
    zero = Tensor(np.zeros((2, 2, 6, 7)))
    ok = np.array_equal(ops.bilinear_warp(feat, zero).data, feat.data)
    results.append(("warp zero-flow identity", ok, "exact"))

    flow = _safe_flow(rng, 2, 6, 7)
    got = ops.bilinear_warp(feat, flow).data
    ref = warp_scalar_reference(feat, flow)
    err = float(np.abs(got - ref).max())
    results.append(("warp vs scalar reference", err < 1e-12, f"max abs {err:.2e}"))

    d = 3
    f_cur = Tensor(rng.standard_normal((2, d, 5, 5)))
    f_prev = Tensor(rng.standard_normal((2, d, 5, 5)))
    gflow = _safe_flow(rng, 2, 5, 5, span=1)
    gparams = _random_gru_params(rng, d)
    got = flow_guided_gru(f_cur, f_prev, gflow, gparams).data
    ref = gru_scalar_reference(f_cur, f_prev, gflow, gparams)
    err = float(np.abs(got - ref).max())
    results.append(("flow_guided_gru vs scalar reference", err < 1e-10, f"max abs {err:.2e}"))

    maps = Tensor(rng.standard_normal((1, 490, 6, 8)))
    rois = random_boxes(rng, 8, extent=90.0)
    got = psroi_warp(maps, rois)
    ref = psroi_scalar_reference(maps, rois)
    err = float(np.abs(got - ref).max())
    results.append(("psroi_warp vs scalar reference", err < 1e-10, f"max abs {err:.2e}"))

    mismatches = 0
    for _ in range(nms_trials):
        n = int(rng.integers(1, nms_max_boxes + 1))
        boxes = random_boxes(rng, n)
        scores = rng.uniform(0, 1, n)
        if rng.uniform() < 0.3 and n > 2:
            scores[1] = scores[0]  # exercise the tie-break
            boxes[1] = boxes[0]
        thresh = float(rng.uniform(0.2, 0.8))
        if list(nms(boxes, scores, thresh)) != nms_reference(boxes, scores, thresh):
            mismatches += 1
    results.append(("nms vs brute-force reference", mismatches == 0, f"{nms_trials} trials, {mismatches} mismatches"))

    results.append(_mac_consistency_check())
    return results


def _mac_consistency_check():
    """Executed conv multiply-adds must equal the analyzer's conv count."""
    from .graph import init_params, run_graph
    from .lightflow import build_light_flow, flow_fusion_executor
    from .tensor import no_grad

    rng = np.random.default_rng(0)
    spec = build_light_flow(0.5)
    params = init_params(spec.graph, {"Images": (6, 64, 64)}, rng)
    x = Tensor(rng.standard_normal((1, 6, 64, 64)).astype(np.float32))
    MAC_COUNTER.enabled = True
    MAC_COUNTER.reset()
    with no_grad():
        run_graph(spec.graph, params, {"Images": x}, special={"flow_fusion": flow_fusion_executor()})
        d = 8
        gparams = GruParams(
            *(Tensor(rng.standard_normal((d, d, 3, 3)).astype(np.float32)) for _ in range(6)),
            *(Tensor(np.zeros(d, dtype=np.float32)) for _ in range(3)),
        )
        flow_guided_gru(
            Tensor(rng.standard_normal((1, d, 4, 4)).astype(np.float32)),
            Tensor(rng.standard_normal((1, d, 4, 4)).astype(np.float32)),
            Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32)),
            gparams,
        )
    executed = MAC_COUNTER.macs
    MAC_COUNTER.enabled = False
    flow_report = count_network(spec.graph, {"Images": (6, 64, 64)})
    counted = flow_report.flops
    counted += sum(c.flops for c in gru_layercosts(d, (4, 4)) if c.kind == "conv")
    ok = 2 * executed == counted
    return ("kernel MACs vs analyzer conv FLOPs", ok, f"2*{executed} vs {counted}")


def run_all(gradient_instances=5, seed=0):
    """Combined suite used by the CLI; returns (records, all_ok)."""
    records = []
    for name, err, tol, ok in run_gradient_suite(instances=gradient_instances, seed=seed):
        records.append((f"gradient: {name}", ok, f"max rel err {err:.2e} (tol {tol:g})"))
    for name, ok, detail in run_oracle_suite(seed=seed):
        records.append((f"oracle: {name}", ok, detail))
    return records, all(ok for _, ok, _ in records)
