"""Toy-scale flow training on synthetic translation pairs.

The generator renders a textured canvas, then crops two windows that
differ by a random global translation (sub-pixel, bilinear sampled), so
the ground-truth flow is known exactly: warping frame A by the constant
flow reproduces frame B wherever both windows see the canvas.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .graph import init_params, run_graph
from .lightflow import LightFlowSpec, epe_loss, flow_fusion_executor
from .tensor import Tensor, no_grad


@dataclass
class OptConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 4e-5
    batch_size: int = 8
    iterations: int = 500
    seed: int = 0


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (g * g)
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def _textured_canvas(rng, h, w):
    """Dense multi-octave noise plus textured rectangles.

    Every patch must be discriminative at several scales or the motion
    signal is too weak to learn anything in a few hundred steps.
    """
    canvas = np.zeros((3, h, w), dtype=np.float64)
    for octave, weight in ((8, 0.5), (4, 0.35), (2, 0.25), (1, 0.15)):
        ch, cw = max(2, h // octave), max(2, w // octave)
        canvas += weight * ops.bilinear_resize(rng.standard_normal((1, 3, ch, cw)), h, w)[0]
    for _ in range(rng.integers(4, 9)):
        ph = int(rng.integers(h // 8, h // 3))
        pw = int(rng.integers(w // 8, w // 3))
        y = int(rng.integers(0, h - ph))
        x = int(rng.integers(0, w - pw))
        patch = 0.4 * ops.bilinear_resize(rng.standard_normal((1, 3, max(2, ph // 2), max(2, pw // 2))), ph, pw)[0]
        canvas[:, y : y + ph, x : x + pw] = patch + rng.uniform(-1, 1, size=(3, 1, 1))
    return canvas


def _sample_window(canvas, y0, x0, h, w):
    """Bilinear crop at a sub-pixel offset (canvas is large enough)."""
    ys = y0 + np.arange(h)
    xs = x0 + np.arange(w)
    yl = np.floor(ys).astype(np.int64)
    xl = np.floor(xs).astype(np.int64)
    fy = (ys - yl)[None, :, None]
    fx = (xs - xl)[None, None, :]
    rows = canvas[:, yl, :] * (1 - fy) + canvas[:, yl + 1, :] * fy
    return rows[:, :, xl] * (1 - fx) + rows[:, :, xl + 1] * fx


def make_synthetic_pair(rng, size=64, max_shift=8.0):
    """(frame_a, frame_b, gt_flow): frame_b(p) == frame_a(p + t) on the overlap.

    The ground-truth flow is the constant (tx, ty), in pixels of the frame
    grid, pointing from frame-B positions into frame A.
    """
    margin = int(np.ceil(max_shift)) + 2
    canvas = _textured_canvas(rng, size + 2 * margin, size + 2 * margin)
    tx = float(rng.uniform(-max_shift, max_shift))
    ty = float(rng.uniform(-max_shift, max_shift))
    a = _sample_window(canvas, margin, margin, size, size)
    b = _sample_window(canvas, margin + ty, margin + tx, size, size)
    gt = np.empty((2, size, size), dtype=np.float32)
    gt[0] = tx
    gt[1] = ty
    return a.astype(np.float32), b.astype(np.float32), gt


def make_synthetic_pair_with_patch_motion(rng, size=64, max_shift=8.0, patch_shift=4):
    """Global translation plus independently moving textured rectangles.

    The ground truth inside a moving patch (in frame-B coordinates) is the
    patch's total motion.  Dis-occluded background pixels keep the global
    motion label, so warp(a, gt) only approximates b near patch borders;
    good enough for a toy generator, and off by default.
    """
    margin = int(np.ceil(max_shift)) + patch_shift + 2
    ch, cw = size + 2 * margin, size + 2 * margin
    base = np.zeros((3, ch, cw), dtype=np.float64)
    for octave, weight in ((8, 0.5), (4, 0.35), (2, 0.25), (1, 0.15)):
        base += weight * ops.bilinear_resize(
            rng.standard_normal((1, 3, max(2, ch // octave), max(2, cw // octave))), ch, cw
        )[0]
    tx = float(rng.uniform(-max_shift, max_shift))
    ty = float(rng.uniform(-max_shift, max_shift))
    canvas_a = base.copy()
    canvas_b = base.copy()
    patches = []
    for _ in range(rng.integers(2, 5)):
        ph = int(rng.integers(ch // 8, ch // 4))
        pw = int(rng.integers(cw // 8, cw // 4))
        y = int(rng.integers(patch_shift, ch - ph - patch_shift))
        x = int(rng.integers(patch_shift, cw - pw - patch_shift))
        tex = 0.4 * ops.bilinear_resize(
            rng.standard_normal((1, 3, max(2, ph // 2), max(2, pw // 2))), ph, pw
        )[0] + rng.uniform(-1, 1, size=(3, 1, 1))
        dy = int(rng.integers(-patch_shift, patch_shift + 1))
        dx = int(rng.integers(-patch_shift, patch_shift + 1))
        canvas_a[:, y : y + ph, x : x + pw] = tex
        canvas_b[:, y + dy : y + dy + ph, x + dx : x + dx + pw] = tex
        patches.append((y, x, ph, pw, dy, dx))
    a = _sample_window(canvas_a, margin, margin, size, size)
    b = _sample_window(canvas_b, margin + ty, margin + tx, size, size)
    gt = np.empty((2, size, size), dtype=np.float32)
    gt[0] = tx
    gt[1] = ty
    for y, x, ph, pw, dy, dx in patches:
        # patch footprint in frame-B pixel coordinates
        by = y + dy - margin - ty
        bx = x + dx - margin - tx
        y0, y1 = int(np.clip(np.ceil(by), 0, size)), int(np.clip(np.floor(by + ph), 0, size))
        x0, x1 = int(np.clip(np.ceil(bx), 0, size)), int(np.clip(np.floor(bx + pw), 0, size))
        gt[0, y0:y1, x0:x1] = tx + dx
        gt[1, y0:y1, x0:x1] = ty + dy
    return a.astype(np.float32), b.astype(np.float32), gt


def make_dataset(count=256, size=64, max_shift=8.0, seed=0, per_patch_motion=False):
    rng = np.random.default_rng(seed)
    maker = make_synthetic_pair_with_patch_motion if per_patch_motion else make_synthetic_pair
    return [maker(rng, size, max_shift) for _ in range(count)]


def downsample_gt(gt, factor):
    """Average-pool a ground-truth flow and rescale into the coarse grid's units."""
    pooled = ops.avg_pool(Tensor(gt[None] if gt.ndim == 3 else gt), factor).data
    return pooled / factor


def _batch(dataset, idx):
    a = np.stack([dataset[i][0] for i in idx])
    b = np.stack([dataset[i][1] for i in idx])
    gt = np.stack([dataset[i][2] for i in idx])
    return a, b, gt


def _forward_epe(spec, params, a, b, gt_coarse, scale_magnitudes=True):
    stacked = Tensor(np.concatenate([a, b], axis=1))
    fused = run_graph(
        spec.graph,
        params,
        {spec.input_name: stacked},
        special={"flow_fusion": flow_fusion_executor(scale_magnitudes)},
        want=[spec.fused_name],
    )[spec.fused_name]
    return epe_loss(fused, Tensor(gt_coarse))


@dataclass
class TrainResult:
    params: dict
    epe_history: list = field(default_factory=list)  # per-epoch mean EPE, index 0 = untrained

    @property
    def initial_epe(self):
        return self.epe_history[0]

    @property
    def final_epe(self):
        return self.epe_history[-1]


def evaluate_epe(spec, params, dataset, batch_size=16):
    """Mean EPE over a dataset, in fused-grid pixel units."""
    size = dataset[0][0].shape[1]
    factor = size // _fused_size(spec, size)
    total, n = 0.0, 0
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = list(range(start, min(start + batch_size, len(dataset))))
            a, b, gt = _batch(dataset, idx)
            loss = _forward_epe(spec, params, a, b, downsample_gt(gt, factor))
            total += float(loss.data) * len(idx)
            n += len(idx)
    return total / n


def _fused_size(spec, size):
    from .graph import propagate_shapes

    shapes = propagate_shapes(spec.graph, {spec.input_name: (6, size, size)})
    return shapes[spec.fused_name][1]


def train_toy(spec: LightFlowSpec, dataset, cfg: OptConfig):
    """Train the flow network on synthetic pairs; loss is mean EPE of the
    fused prediction against the pooled ground truth.

    Returns the trained parameter store and the per-epoch mean training EPE
    (entry 0 is the untrained network; EPE is in fused-grid units).
    """
    if not dataset:
        raise ValueError("train_toy: empty dataset")
    rng = np.random.default_rng(cfg.seed)
    size = dataset[0][0].shape[1]
    factor = size // _fused_size(spec, size)
    params = init_params(
        spec.graph, {spec.input_name: (6, size, size)}, rng, zero_names=spec.zero_init_names, requires_grad=True
    )
    trainable = [p for name, p in params.items() if p.requires_grad and "bn_mean" not in name and "bn_var" not in name]
    opt = Adam(
        trainable, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay
    )

    history = [evaluate_epe(spec, params, dataset)]
    steps_done = 0
    order = np.arange(len(dataset))
    while steps_done < cfg.iterations:
        rng.shuffle(order)
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            if steps_done >= cfg.iterations:
                break
            idx = order[start : start + cfg.batch_size]
            a, b, gt = _batch(dataset, idx)
            loss = _forward_epe(spec, params, a, b, downsample_gt(gt, factor))
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.data))
            steps_done += 1
        if epoch_losses:
            history.append(float(np.mean(epoch_losses)))
    return TrainResult(params=params, epe_history=history)
