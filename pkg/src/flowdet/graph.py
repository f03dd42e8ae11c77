"""Layer-graph representation shared by execution and cost counting.

A `NetworkGraph` is an ordered list of layer specs.  The same graph object
drives the tensor executor and the static analyzer, so the shapes that run
are, by construction, the shapes that get counted.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Tensor, relu


@dataclass
class LayerSpec:
    name: str
    kind: str  # input | conv | upsample2x | concat | add | flow_fusion
    inputs: tuple = ()
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = True
    bn: bool = False
    act: str | None = None  # relu | leaky_relu | None
    tag: str = ""


@dataclass
class NetworkGraph:
    name: str
    layers: list = field(default_factory=list)
    by_name: dict = field(default_factory=dict)

    def add(self, layer: LayerSpec):
        if layer.name in self.by_name:
            raise ValueError(f"duplicate layer name {layer.name!r} in graph {self.name!r}")
        self.layers.append(layer)
        self.by_name[layer.name] = layer
        return layer

    def conv(self, name, src, out_c, kernel=1, stride=1, groups=1, bn=True, act="leaky_relu", tag="", bias=True):
        return self.add(
            LayerSpec(
                name=name,
                kind="conv",
                inputs=(src,),
                out_channels=out_c,
                kernel=kernel,
                stride=stride,
                padding=kernel // 2,
                groups=groups,
                bias=bias,
                bn=bn,
                act=act,
                tag=tag,
            )
        )


def propagate_shapes(graph: NetworkGraph, input_shapes):
    """Resolve every layer's (channels, h, w) given input shapes.

    Spatial mismatches at concat/add nodes resolve by cropping every input
    to the common top-left window (the executor does the same), which is
    how decoder skip connections behave on dims that are not divisible by
    the full downsampling factor.
    """
    shapes = {}
    for layer in graph.layers:
        if layer.kind == "input":
            if layer.name not in input_shapes:
                raise ValueError(f"missing input shape for {layer.name!r}")
            shapes[layer.name] = tuple(input_shapes[layer.name])
            continue
        src = [shapes[s] for s in layer.inputs]
        if layer.kind == "conv":
            c, h, w = src[0]
            icg = c // layer.groups
            if icg * layer.groups != c:
                raise ValueError(f"{layer.name}: groups {layer.groups} does not divide channels {c}")
            oh, ow = ops.conv_output_hw(h, w, layer.kernel, layer.stride, layer.padding)
            if oh < 1 or ow < 1:
                raise ValueError(f"{layer.name}: empty output for input {src[0]}")
            shapes[layer.name] = (layer.out_channels, oh, ow)
        elif layer.kind == "deconv":
            # transposed conv with k = 2*stride, pad = stride//2: exact stride-fold upsampling
            c, h, w = src[0]
            shapes[layer.name] = (layer.out_channels, h * layer.stride, w * layer.stride)
        elif layer.kind == "upsample2x":
            c, h, w = src[0]
            shapes[layer.name] = (c, 2 * h, 2 * w)
        elif layer.kind == "concat":
            h = min(s[1] for s in src)
            w = min(s[2] for s in src)
            shapes[layer.name] = (sum(s[0] for s in src), h, w)
        elif layer.kind == "add":
            cs = {s[0] for s in src}
            if len(cs) != 1:
                raise ValueError(f"{layer.name}: channel mismatch in add inputs {src}")
            shapes[layer.name] = (src[0][0], min(s[1] for s in src), min(s[2] for s in src))
        elif layer.kind == "flow_fusion":
            finest = max(src, key=lambda s: s[1] * s[2])
            shapes[layer.name] = (2, finest[1], finest[2])
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r} at {layer.name!r}")
    return shapes


# -- parameters ----------------------------------------------------------


def he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(graph: NetworkGraph, input_shapes, rng, dtype=np.float32, zero_names=(), requires_grad=True):
    """He-uniform conv weights, zero biases, identity batch norm.

    Layers listed in `zero_names` get all-zero weights (used for the flow
    predictor output convs so the initial flow estimate is exactly zero).
    """
    shapes = propagate_shapes(graph, input_shapes)
    params = {}
    for layer in graph.layers:
        if layer.kind != "conv":
            continue
        in_c = shapes[layer.inputs[0]][0]
        icg = in_c // layer.groups
        wshape = (layer.out_channels, icg, layer.kernel, layer.kernel)
        fan_in = icg * layer.kernel * layer.kernel
        if layer.name in zero_names:
            w = np.zeros(wshape, dtype=dtype)
        else:
            w = he_uniform(rng, wshape, fan_in, dtype)
        params[f"{layer.name}.weight"] = Tensor(w, requires_grad=requires_grad)
        if layer.bias:
            params[f"{layer.name}.bias"] = Tensor(np.zeros(layer.out_channels, dtype=dtype), requires_grad=requires_grad)
        if layer.bn:
            params[f"{layer.name}.bn_gamma"] = Tensor(np.ones(layer.out_channels, dtype=dtype), requires_grad=requires_grad)
            params[f"{layer.name}.bn_beta"] = Tensor(np.zeros(layer.out_channels, dtype=dtype), requires_grad=requires_grad)
            params[f"{layer.name}.bn_mean"] = Tensor(np.zeros(layer.out_channels, dtype=dtype))
            params[f"{layer.name}.bn_var"] = Tensor(np.ones(layer.out_channels, dtype=dtype))
    return params


def conv_params_for(layer: LayerSpec, params):
    return ops.ConvParams(
        weight=params[f"{layer.name}.weight"],
        bias=params.get(f"{layer.name}.bias"),
        stride=layer.stride,
        padding=layer.padding,
        groups=layer.groups,
    )


def bn_params_for(layer: LayerSpec, params):
    return ops.BnParams(
        gamma=params[f"{layer.name}.bn_gamma"],
        beta=params[f"{layer.name}.bn_beta"],
        mean=params[f"{layer.name}.bn_mean"].data,
        var=params[f"{layer.name}.bn_var"].data,
        eps=0.0,
    )


_ACTS = {"relu": relu, "leaky_relu": lambda t: ops.leaky_relu(t, 0.1)}


def run_graph(graph: NetworkGraph, params, inputs, special=None, want=None):
    """Execute `graph` on tensor `inputs` (dict name -> Tensor).

    `special` maps a layer kind to a callable `(layer, input_tensors) ->
    Tensor` for kinds the core executor does not know (flow fusion).
    Returns a dict with every layer's output (or only `want` names if
    given, still computing all predecessors).
    """
    special = special or {}
    values = {}
    for layer in graph.layers:
        if layer.kind == "input":
            if layer.name not in inputs:
                raise ValueError(f"missing graph input {layer.name!r}")
            values[layer.name] = inputs[layer.name]
            continue
        srcs = [values[s] for s in layer.inputs]
        if layer.kind == "conv":
            out = ops.conv2d(srcs[0], conv_params_for(layer, params))
            if layer.bn:
                out = ops.batch_norm(out, bn_params_for(layer, params))
            if layer.act:
                out = _ACTS[layer.act](out)
        elif layer.kind == "upsample2x":
            out = ops.nearest_upsample_2x(srcs[0])
        elif layer.kind in ("concat", "add"):
            h = min(t.shape[2] for t in srcs)
            w = min(t.shape[3] for t in srcs)
            srcs = [ops.crop_spatial(t, h, w) for t in srcs]
            if layer.kind == "concat":
                out = ops.concat_channels(*srcs)
            else:
                out = srcs[0]
                for t in srcs[1:]:
                    out = out + t
        elif layer.kind in special:
            out = special[layer.kind](layer, srcs)
        else:
            raise ValueError(f"no executor for layer kind {layer.kind!r} at {layer.name!r}")
        values[layer.name] = out
    if want is not None:
        return {k: values[k] for k in want}
    return values


def round_channels(count, multiplier, minimum=8):
    """Width-multiplier rounding: nearest even integer, floor at `minimum`."""
    if multiplier <= 0:
        raise ValueError(f"width multiplier must be positive, got {multiplier}")
    if multiplier == 1.0:
        return count
    return max(minimum, int(2 * np.round(count * multiplier / 2.0)))
