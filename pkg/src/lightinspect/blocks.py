"""Composite network blocks: visual attention condensers, anti-aliased
downsample blocks, and the dual-softmax classification head.

Each block is a forward function plus a hand-derived backward.  Parameters
travel as plain dicts of numpy arrays so the graph executor and the
checkpoint format stay format-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConvSpec


@dataclass(frozen=True)
class VacSpec:
    """Visual attention condenser: condense -> embed -> expand -> gate.

    The block output keeps the input shape; ``condense_stride`` controls how
    aggressively the attention path shrinks before embedding.
    """

    channels: int
    condense_stride: int = 2
    embed_groups: int = 2
    embed_channels: int = 8

    def __post_init__(self):
        if self.condense_stride < 2:
            raise ValueError(f"condense_stride must be >= 2, got {self.condense_stride}")
        if self.channels % self.embed_groups != 0:
            raise ValueError(
                f"embed_groups ({self.embed_groups}) must divide channels ({self.channels})"
            )
        if self.embed_channels % self.embed_groups != 0:
            raise ValueError(
                f"embed_groups ({self.embed_groups}) must divide embed_channels "
                f"({self.embed_channels})"
            )

    @property
    def embed1(self) -> ConvSpec:
        return ConvSpec(self.channels, self.embed_channels, 3, 3, padding=1, groups=self.embed_groups)

    @property
    def embed2(self) -> ConvSpec:
        return ConvSpec(
            self.embed_channels, self.embed_channels, 3, 3, padding=1, groups=self.embed_groups
        )

    @property
    def proj(self) -> ConvSpec:
        return ConvSpec(self.embed_channels, self.channels, 1, 1)

    def param_shapes(self) -> dict[str, tuple]:
        return {
            "embed1_w": self.embed1.weight_shape(),
            "embed1_b": (self.embed_channels,),
            "embed2_w": self.embed2.weight_shape(),
            "embed2_b": (self.embed_channels,),
            "proj_w": self.proj.weight_shape(),
            "proj_b": (self.channels,),
        }


def vac_forward(v: np.ndarray, params: dict, spec: VacSpec, want_cache: bool = False):
    """V' = V * sigmoid(A) where A is the expanded condensed embedding.

    The attention path max-pools by ``condense_stride``, embeds with two
    grouped 3x3 convs (ReLU), expands back by nearest-neighbour upsampling,
    and projects to the input channel count with a pointwise conv.
    """
    n, c, h, w = v.shape
    if c != spec.channels:
        raise ValueError(f"vac input has {c} channels, spec expects {spec.channels}")
    s = spec.condense_stride
    if h % s != 0 or w % s != 0:
        raise ValueError(
            f"vac input {h}x{w} not divisible by condense_stride {s}; expansion would be inexact"
        )
    pooled = T.max_pool(v, s, s)
    z1 = T.conv2d_forward(pooled, params["embed1_w"], params["embed1_b"], spec.embed1)
    e1 = T.relu(z1)
    z2 = T.conv2d_forward(e1, params["embed2_w"], params["embed2_b"], spec.embed2)
    e2 = T.relu(z2)
    up = T.nearest_upsample(e2, s)
    a = T.conv2d_forward(up, params["proj_w"], params["proj_b"], spec.proj)
    gate = T.sigmoid(a)
    out = v * gate
    if want_cache:
        return out, {"v": v, "pooled": pooled, "z1": z1, "e1": e1, "z2": z2, "e2": e2,
                     "up": up, "gate": gate}
    return out


def vac_backward(grad_out: np.ndarray, cache: dict, params: dict, spec: VacSpec):
    """Returns (grad_input, grad_params)."""
    v, gate = cache["v"], cache["gate"]
    s = spec.condense_stride
    grad_v_direct = grad_out * gate
    grad_gate = grad_out * v
    grad_a = T.sigmoid_backward(grad_gate, gate)
    grad_up, g_proj_w, g_proj_b = T.conv2d_backward(grad_a, cache["up"], params["proj_w"], spec.proj)
    grad_e2 = T.nearest_upsample_backward(grad_up, s)
    grad_z2 = T.relu_backward(grad_e2, cache["z2"])
    grad_e1, g_e2_w, g_e2_b = T.conv2d_backward(grad_z2, cache["e1"], params["embed2_w"], spec.embed2)
    grad_z1 = T.relu_backward(grad_e1, cache["z1"])
    grad_pooled, g_e1_w, g_e1_b = T.conv2d_backward(
        grad_z1, cache["pooled"], params["embed1_w"], spec.embed1
    )
    grad_v = grad_v_direct + T.max_pool_backward(grad_pooled, v, s, s)
    grads = {
        "embed1_w": g_e1_w, "embed1_b": g_e1_b,
        "embed2_w": g_e2_w, "embed2_b": g_e2_b,
        "proj_w": g_proj_w, "proj_b": g_proj_b,
    }
    return grad_v, grads


@dataclass(frozen=True)
class AadsSpec:
    """Anti-aliased downsample block: optional stride-1 conv, then blur_pool 2.

    This is the only spatial-reduction block permitted after the input layer.
    """

    in_channels: int
    out_channels: int
    use_conv: bool = True

    def __post_init__(self):
        if not self.use_conv and self.in_channels != self.out_channels:
            raise ValueError(
                f"identity aads block cannot change channels "
                f"({self.in_channels} -> {self.out_channels})"
            )

    @property
    def conv(self) -> ConvSpec:
        return ConvSpec(self.in_channels, self.out_channels, 3, 3, stride=1, padding=1)

    def param_shapes(self) -> dict[str, tuple]:
        if not self.use_conv:
            return {}
        return {"conv_w": self.conv.weight_shape(), "conv_b": (self.out_channels,)}


def aads_down_block(v: np.ndarray, params: dict, spec: AadsSpec, want_cache: bool = False):
    if v.shape[2] < 2 or v.shape[3] < 2:
        raise ValueError(f"aads block needs spatial dims >= 2, got {v.shape[2]}x{v.shape[3]}")
    if spec.use_conv:
        z = T.conv2d_forward(v, params["conv_w"], params["conv_b"], spec.conv)
        y = T.relu(z)
    else:
        z = y = v
    out = T.blur_pool(y, 2)
    if want_cache:
        return out, {"v": v, "z": z, "y": y}
    return out


def aads_down_backward(grad_out: np.ndarray, cache: dict, params: dict, spec: AadsSpec):
    grad_y = T.blur_pool_backward(grad_out, cache["y"], 2)
    if not spec.use_conv:
        return grad_y, {}
    grad_z = T.relu_backward(grad_y, cache["z"])
    grad_v, gw, gb = T.conv2d_backward(grad_z, cache["v"], params["conv_w"], spec.conv)
    return grad_v, {"conv_w": gw, "conv_b": gb}


def dual_head_forward(features: np.ndarray, params: dict, want_cache: bool = False):
    """Two independent FC->softmax columns over pooled features.

    Returns (p1, p2, p_agg) with p_agg the unweighted mean, itself a valid
    distribution.
    """
    if features.ndim != 2:
        raise ValueError(f"dual head expects flat (N,F) features, got rank {features.ndim}")
    z1 = T.fully_connected(features, params["head1_w"], params["head1_b"])
    z2 = T.fully_connected(features, params["head2_w"], params["head2_b"])
    p1 = T.softmax(z1)
    p2 = T.softmax(z2)
    p_agg = 0.5 * (p1 + p2)
    if want_cache:
        return (p1, p2, p_agg), {"features": features, "p1": p1, "p2": p2}
    return p1, p2, p_agg


def dual_head_backward(grad_p1: np.ndarray, grad_p2: np.ndarray, cache: dict, params: dict):
    """Backward through both columns given gradients wrt p1 and p2.

    Gradients wrt p_agg must already be folded into grad_p1/grad_p2 by the
    caller (each head sees half of it).
    """
    f = cache["features"]
    gz1 = T.softmax_backward(grad_p1, cache["p1"])
    gz2 = T.softmax_backward(grad_p2, cache["p2"])
    gf1, gw1, gb1 = T.fully_connected_backward(gz1, f, params["head1_w"])
    gf2, gw2, gb2 = T.fully_connected_backward(gz2, f, params["head2_w"])
    grads = {"head1_w": gw1, "head1_b": gb1, "head2_w": gw2, "head2_b": gb2}
    return gf1 + gf2, grads


def dual_head_param_shapes(in_features: int, classes: int = 2) -> dict[str, tuple]:
    return {
        "head1_w": (classes, in_features),
        "head1_b": (classes,),
        "head2_w": (classes, in_features),
        "head2_b": (classes,),
    }
