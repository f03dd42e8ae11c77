"""Analyzer-only transcriptions of heavier optical-flow networks.

These graphs exist to be counted, not executed: they provide the baseline
cost figures that the Light Flow design is compared against.  Transposed
convolutions are counted at output resolution (out_positions * k^2 * in_c
* out_c multiply-adds), the convention that reproduces the published
totals for these architectures.
"""

from .graph import LayerSpec, NetworkGraph

# FlowNetS encoder: (name, kernel, stride, out_channels)
_FLOWNET_ENCODER = (
    ("conv1", 7, 2, 64),
    ("conv2", 5, 2, 128),
    ("conv3", 5, 2, 256),
    ("conv3_1", 3, 1, 256),
    ("conv4", 3, 2, 512),
    ("conv4_1", 3, 1, 512),
    ("conv5", 3, 2, 512),
    ("conv5_1", 3, 1, 512),
    ("conv6", 3, 2, 1024),
    ("conv6_1", 3, 1, 1024),
)

# refinement: (level, deconv out_c, skip layer)
_FLOWNET_REFINE = (
    (5, 512, "conv5_1"),
    (4, 256, "conv4_1"),
    (3, 128, "conv3_1"),
    (2, 64, "conv2"),
)


def build_flownet_s(width=1.0, name="flownet_s"):
    """The encoder/decoder flow network with multi-level refinement.

    `width=1.0` is the full network; `width=0.5` is the half-width variant.
    """
    g = NetworkGraph(name=name)
    g.add(LayerSpec(name="Images", kind="input", tag="flow"))

    def ch(c):
        return max(2, int(round(c * width)))

    prev = "Images"
    for lname, k, s, out_c in _FLOWNET_ENCODER:
        g.add(
            LayerSpec(
                name=lname,
                kind="conv",
                inputs=(prev,),
                out_channels=ch(out_c),
                kernel=k,
                stride=s,
                padding=k // 2,
                bn=False,
                act="leaky_relu",
                tag="flow",
            )
        )
        prev = lname

    g.add(
        LayerSpec(
            name="predict_flow6", kind="conv", inputs=("conv6_1",), out_channels=2, kernel=3, padding=1, bn=False, tag="flow"
        )
    )
    deconv_src = "conv6_1"
    flow_src = "predict_flow6"
    for level, out_c, skip in _FLOWNET_REFINE:
        g.add(
            LayerSpec(
                name=f"deconv{level}",
                kind="deconv",
                inputs=(deconv_src,),
                out_channels=ch(out_c),
                kernel=4,
                stride=2,
                bn=False,
                act="leaky_relu",
                tag="flow",
            )
        )
        g.add(
            LayerSpec(
                name=f"upsample_flow{level + 1}to{level}",
                kind="deconv",
                inputs=(flow_src,),
                out_channels=2,
                kernel=4,
                stride=2,
                bn=False,
                tag="flow",
            )
        )
        g.add(
            LayerSpec(
                name=f"concat{level}",
                kind="concat",
                inputs=(skip, f"deconv{level}", f"upsample_flow{level + 1}to{level}"),
                tag="flow",
            )
        )
        g.add(
            LayerSpec(
                name=f"predict_flow{level}",
                kind="conv",
                inputs=(f"concat{level}",),
                out_channels=2,
                kernel=3,
                padding=1,
                bn=False,
                tag="flow",
            )
        )
        deconv_src = f"concat{level}"
        flow_src = f"predict_flow{level}"
    return g


def build_flownet_half():
    return build_flownet_s(width=0.5, name="flownet_half")
