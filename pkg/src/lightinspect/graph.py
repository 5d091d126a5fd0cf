"""Columnar architecture DAG: typed nodes, execution, counting, checkpoints.

A graph is a topologically ordered list of nodes; every node's inputs point
at earlier indices, so acyclicity holds by construction.  The executor runs
forward/backward without an autograd tape, using the hand-derived kernel
backwards from :mod:`lightinspect.tensor` and :mod:`lightinspect.blocks`.

``validate`` checks structural soundness (single input, dual heads feeding
one aggregation node, consistent shapes).  Design-rule conformance (FLOPs
budget, no pointwise strided convs, AADS-only downsampling) is a separate
concern owned by :func:`lightinspect.search.indicator_feasible`, so that
rule-violating graphs can still be constructed, executed, and rejected by
the feasibility gate.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import blocks as B
from . import tensor as T
from .blocks import AadsSpec, VacSpec
from .tensor import ConvSpec

CHECKPOINT_MAGIC = b"VQCK"

REFERENCE_VERSION = "ref-v1"


class GraphError(ValueError):
    """Structural problem in an architecture graph."""


@dataclass(frozen=True)
class InputSpec:
    channels: int = 1
    standardize: bool = False   # per-sample zero-mean/unit-variance over C,H,W


@dataclass(frozen=True)
class Conv3x3Spec:
    in_channels: int
    out_channels: int
    stride: int = 1
    groups: int = 1
    relu: bool = True

    def conv(self) -> ConvSpec:
        return ConvSpec(self.in_channels, self.out_channels, 3, 3,
                        stride=self.stride, padding=1, groups=self.groups)


@dataclass(frozen=True)
class ConvDwSpec:
    channels: int
    relu: bool = True

    def conv(self) -> ConvSpec:
        return ConvSpec(self.channels, self.channels, 3, 3,
                        stride=1, padding=1, groups=self.channels)


@dataclass(frozen=True)
class Conv1x1Spec:
    """Pointwise conv.  A stride above 1 is expressible (so the feasibility
    gate has something to reject) but the builder never emits one."""

    in_channels: int
    out_channels: int
    relu: bool = True
    stride: int = 1

    def conv(self) -> ConvSpec:
        return ConvSpec(self.in_channels, self.out_channels, 1, 1, stride=self.stride)


@dataclass(frozen=True)
class MaxPoolSpec:
    kernel: int = 2
    stride: int = 2


@dataclass(frozen=True)
class FcHeadSpec:
    in_features: int
    classes: int = 2
    standardize: bool = False   # per-sample feature standardization before the FC


@dataclass(frozen=True)
class Node:
    kind: str
    spec: object | None
    inputs: tuple[int, ...]
    column: int = 0


@dataclass
class ArchGraph:
    nodes: list[Node]
    meta: dict = field(default_factory=dict)

    def head_ids(self) -> tuple[int, int]:
        ids = [i for i, n in enumerate(self.nodes) if n.kind == "fc_head"]
        if len(ids) != 2:
            raise GraphError(f"graph must have exactly two fc_head nodes, found {len(ids)}")
        return ids[0], ids[1]

    def agg_id(self) -> int:
        ids = [i for i, n in enumerate(self.nodes) if n.kind == "agg"]
        if len(ids) != 1:
            raise GraphError(f"graph must have exactly one agg node, found {len(ids)}")
        return ids[0]


# ---------------------------------------------------------------------------
# Validation and shape inference
# ---------------------------------------------------------------------------

def infer_shapes(graph: ArchGraph, h: int, w: int) -> list[tuple]:
    """Per-node output shapes, (C, H, W) or ('flat', F), for one sample."""
    shapes: list[tuple] = []
    for i, node in enumerate(graph.nodes):
        ins = [shapes[j] for j in node.inputs]
        k = node.kind
        if k == "input":
            shapes.append((node.spec.channels, h, w))
            continue
        if any(j >= i for j in node.inputs):
            raise GraphError(f"node {i} references a later node; graph must be topological")
        if k in ("conv3x3", "conv_dw", "conv1x1"):
            c, ih, iw = ins[0]
            spec = node.spec.conv()
            if c != spec.in_channels:
                raise GraphError(f"node {i} ({k}): input has {c} channels, spec wants {spec.in_channels}")
            oh, ow = spec.out_hw(ih, iw)
            shapes.append((spec.out_channels, oh, ow))
        elif k == "vac":
            c, ih, iw = ins[0]
            if c != node.spec.channels:
                raise GraphError(f"node {i} (vac): input has {c} channels, spec wants {node.spec.channels}")
            if ih % node.spec.condense_stride or iw % node.spec.condense_stride:
                raise GraphError(
                    f"node {i} (vac): {ih}x{iw} not divisible by condense_stride "
                    f"{node.spec.condense_stride}"
                )
            shapes.append((c, ih, iw))
        elif k == "aads_down":
            c, ih, iw = ins[0]
            if c != node.spec.in_channels:
                raise GraphError(f"node {i} (aads_down): input has {c} channels, spec wants {node.spec.in_channels}")
            shapes.append((node.spec.out_channels, -(-ih // 2), -(-iw // 2)))
        elif k == "max_pool":
            c, ih, iw = ins[0]
            s, kk = node.spec.stride, node.spec.kernel
            shapes.append((c, (ih - kk) // s + 1, (iw - kk) // s + 1))
        elif k == "concat":
            cs = [sh[0] for sh in ins]
            hws = {(sh[1], sh[2]) for sh in ins}
            if len(hws) != 1:
                raise GraphError(f"node {i} (concat): spatial dims differ across inputs: {hws}")
            ih, iw = hws.pop()
            shapes.append((sum(cs), ih, iw))
        elif k == "add":
            if len(set(ins)) != 1:
                raise GraphError(f"node {i} (add): input shapes differ: {ins}")
            shapes.append(ins[0])
        elif k == "gap":
            c, _, _ = ins[0]
            shapes.append((c, 1, 1))
        elif k == "fc_head":
            c, ih, iw = ins[0]
            feats = c * ih * iw
            if feats != node.spec.in_features:
                raise GraphError(
                    f"node {i} (fc_head): flattened input is {feats} features, "
                    f"spec wants {node.spec.in_features}"
                )
            shapes.append(("flat", node.spec.classes))
        elif k == "agg":
            if len(ins) != 2 or ins[0] != ins[1]:
                raise GraphError(f"node {i} (agg): needs two equal-shape head inputs")
            shapes.append(ins[0])
        else:
            raise GraphError(f"node {i}: unknown kind {k!r}")
    return shapes


def validate(graph: ArchGraph, h: int = 224, w: int = 224):
    """Structural validation; raises GraphError with the offending node id."""
    inputs = [i for i, n in enumerate(graph.nodes) if n.kind == "input"]
    if len(inputs) != 1 or inputs[0] != 0:
        raise GraphError(f"graph must start with exactly one input node, found {inputs}")
    h1, h2 = graph.head_ids()
    agg = graph.agg_id()
    if set(graph.nodes[agg].inputs) != {h1, h2}:
        raise GraphError("agg node must consume exactly the two fc_head nodes")
    consumed = {j for n in graph.nodes for j in n.inputs}
    dangling = [
        i for i in range(len(graph.nodes)) if i not in consumed and i != agg
    ]
    if dangling:
        raise GraphError(f"dangling nodes (unconsumed, not the output): {dangling}")
    infer_shapes(graph, h, w)  # raises on any shape inconsistency


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def node_param_shapes(node: Node) -> dict[str, tuple]:
    k = node.kind
    if k in ("conv3x3", "conv_dw", "conv1x1"):
        spec = node.spec.conv()
        return {"w": spec.weight_shape(), "b": (spec.out_channels,)}
    if k == "vac":
        return node.spec.param_shapes()
    if k == "aads_down":
        return node.spec.param_shapes()
    if k == "fc_head":
        return {"w": (node.spec.classes, node.spec.in_features), "b": (node.spec.classes,)}
    return {}


class ModelParams:
    """Weights and matching gradient buffers for one graph."""

    def __init__(self, values: dict[tuple[int, str], np.ndarray]):
        self.values = values
        self.grads = {k: np.zeros_like(v) for k, v in values.items()}

    def node(self, node_id: int) -> dict[str, np.ndarray]:
        return {name: arr for (nid, name), arr in self.values.items() if nid == node_id}

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, node_id: int, grads: dict[str, np.ndarray]):
        for name, g in grads.items():
            self.grads[(node_id, name)] += g

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.values.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.values.items()})


def _kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(graph: ArchGraph, seed: int, dtype=np.float64) -> ModelParams:
    """Kaiming-uniform (fan-in) weights, zero biases, seed-deterministic."""
    rng = np.random.default_rng(seed)
    values: dict[tuple[int, str], np.ndarray] = {}
    for i, node in enumerate(graph.nodes):
        for name, shape in sorted(node_param_shapes(node).items()):
            if name.endswith("b"):
                values[(i, name)] = np.zeros(shape, dtype=dtype)
            else:
                fan_in = int(np.prod(shape[1:]))
                values[(i, name)] = _kaiming_uniform(rng, shape, fan_in, dtype)
    return values and ModelParams(values) or ModelParams({})


def _rescale(params: ModelParams, key: tuple[int, str], z: np.ndarray, target: float) -> np.ndarray:
    std = float(z.std())
    if std < 1e-8:
        return z
    scale = target / std
    params.values[key] *= scale
    return z * scale  # bias is zero at init, so rescaling is exact


def calibrate_params(graph: ArchGraph, params: ModelParams, seed: int,
                     probe_hw: tuple[int, int] = (64, 64), probe_batch: int = 4,
                     target_std: float = 1.0):
    """Deterministic per-layer variance calibration of freshly initialized weights.

    Without normalization layers, the attention gates and fixed blur kernels
    attenuate activations layer by layer, which stalls plain SGD.  A single
    seeded white-noise probe pass rescales every weight tensor so each
    pre-activation has roughly unit variance.  Biases stay zero, so the
    rescale is exact and the result remains seed-deterministic.
    """
    rng = np.random.default_rng(seed + 0x5EED)
    in_channels = graph.nodes[0].spec.channels
    probe = rng.uniform(0.0, 1.0, size=(probe_batch, in_channels, *probe_hw))
    probe = probe.astype(next(iter(params.values.values())).dtype if params.values else np.float64)
    acts: list = [None] * len(graph.nodes)
    for i, node in enumerate(graph.nodes):
        ins = [acts[j] for j in node.inputs]
        k = node.kind
        if k == "input":
            acts[i] = T.standardize(probe, axes=(1, 2, 3))[0] if node.spec.standardize else probe
        elif k in ("conv3x3", "conv_dw", "conv1x1"):
            p = params.node(i)
            z = T.conv2d_forward(ins[0], p["w"], p["b"], node.spec.conv())
            z = _rescale(params, (i, "w"), z, target_std)
            acts[i] = T.relu(z) if node.spec.relu else z
        elif k == "vac":
            spec = node.spec
            p = params.node(i)
            pooled = T.max_pool(ins[0], spec.condense_stride, spec.condense_stride)
            z1 = T.conv2d_forward(pooled, p["embed1_w"], p["embed1_b"], spec.embed1)
            z1 = _rescale(params, (i, "embed1_w"), z1, target_std)
            e1 = T.relu(z1)
            z2 = T.conv2d_forward(e1, params.values[(i, "embed2_w")], p["embed2_b"], spec.embed2)
            z2 = _rescale(params, (i, "embed2_w"), z2, target_std)
            up = T.nearest_upsample(T.relu(z2), spec.condense_stride)
            a = T.conv2d_forward(up, params.values[(i, "proj_w")], p["proj_b"], spec.proj)
            a = _rescale(params, (i, "proj_w"), a, target_std)
            acts[i] = ins[0] * T.sigmoid(a)
        elif k == "aads_down":
            if node.spec.use_conv:
                p = params.node(i)
                z = T.conv2d_forward(ins[0], p["conv_w"], p["conv_b"], node.spec.conv)
                z = _rescale(params, (i, "conv_w"), z, target_std)
                acts[i] = T.blur_pool(T.relu(z), 2)
            else:
                acts[i] = T.blur_pool(ins[0], 2)
        elif k == "max_pool":
            acts[i] = T.max_pool(ins[0], node.spec.kernel, node.spec.stride)
        elif k == "concat":
            acts[i] = np.concatenate(ins, axis=1)
        elif k == "add":
            acts[i] = ins[0] + ins[1]
        elif k == "gap":
            n, c = ins[0].shape[:2]
            acts[i] = T.global_avg_pool(ins[0]).reshape(n, c, 1, 1)
        elif k == "fc_head":
            p = params.node(i)
            flat = ins[0].reshape(ins[0].shape[0], -1)
            if node.spec.standardize:
                flat = T.standardize(flat, axes=(1,))[0]
            z = T.fully_connected(flat, p["w"], p["b"])
            z = _rescale(params, (i, "w"), z, target_std)
            acts[i] = T.softmax(z)
        elif k == "agg":
            acts[i] = 0.5 * (ins[0] + ins[1])
    return params


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def forward(graph: ArchGraph, params: ModelParams, batch: np.ndarray, want_cache: bool = False):
    """Topological-order execution; returns (p1, p2, p_agg).

    Pure in its inputs: identical batches give identical outputs.
    """
    if batch.ndim != 4:
        raise GraphError(f"batch must be NCHW, got rank {batch.ndim}")
    acts: list = [None] * len(graph.nodes)
    caches: list = [None] * len(graph.nodes) if want_cache else None
    for i, node in enumerate(graph.nodes):
        k = node.kind
        ins = [acts[j] for j in node.inputs]
        if k == "input":
            if batch.shape[1] != node.spec.channels:
                raise GraphError(
                    f"node {i}: batch has {batch.shape[1]} channels, input spec wants "
                    f"{node.spec.channels}"
                )
            if node.spec.standardize:
                acts[i], _ = T.standardize(batch, axes=(1, 2, 3))
            else:
                acts[i] = batch
        elif k in ("conv3x3", "conv_dw", "conv1x1"):
            p = params.node(i)
            z = T.conv2d_forward(ins[0], p["w"], p["b"], node.spec.conv())
            acts[i] = T.relu(z) if node.spec.relu else z
            if want_cache:
                caches[i] = {"x": ins[0], "z": z}
        elif k == "vac":
            if want_cache:
                acts[i], caches[i] = B.vac_forward(ins[0], params.node(i), node.spec, want_cache=True)
            else:
                acts[i] = B.vac_forward(ins[0], params.node(i), node.spec)
        elif k == "aads_down":
            if want_cache:
                acts[i], caches[i] = B.aads_down_block(ins[0], params.node(i), node.spec, want_cache=True)
            else:
                acts[i] = B.aads_down_block(ins[0], params.node(i), node.spec)
        elif k == "max_pool":
            acts[i] = T.max_pool(ins[0], node.spec.kernel, node.spec.stride)
            if want_cache:
                caches[i] = {"x": ins[0]}
        elif k == "concat":
            acts[i] = np.concatenate(ins, axis=1)
            if want_cache:
                caches[i] = {"channels": [a.shape[1] for a in ins]}
        elif k == "add":
            acts[i] = ins[0] + ins[1]
        elif k == "gap":
            n, c = ins[0].shape[:2]
            acts[i] = T.global_avg_pool(ins[0]).reshape(n, c, 1, 1)
            if want_cache:
                caches[i] = {"x": ins[0]}
        elif k == "fc_head":
            flat = ins[0].reshape(ins[0].shape[0], -1)
            if node.spec.standardize:
                feats, scale = T.standardize(flat, axes=(1,))
            else:
                feats, scale = flat, None
            p = params.node(i)
            z = T.fully_connected(feats, p["w"], p["b"])
            prob = T.softmax(z)
            acts[i] = prob
            if want_cache:
                caches[i] = {"feats": feats, "scale": scale, "prob": prob,
                             "in_shape": ins[0].shape}
        elif k == "agg":
            acts[i] = 0.5 * (ins[0] + ins[1])
        else:
            raise GraphError(f"node {i}: unknown kind {k!r}")
    h1, h2 = graph.head_ids()
    result = (acts[h1], acts[h2], acts[graph.agg_id()])
    if want_cache:
        return result, caches
    return result


def backward(graph: ArchGraph, params: ModelParams, caches: list,
             grad_p1: np.ndarray, grad_p2: np.ndarray):
    """Backpropagate gradients wrt the two head distributions.

    The caller folds any aggregate-output gradient into grad_p1/grad_p2
    (the aggregation is a fixed mean, so each head sees half of it).
    Parameter gradients accumulate into ``params.grads``.
    """
    h1, h2 = graph.head_ids()
    node_grads: dict[int, np.ndarray] = {h1: grad_p1, h2: grad_p2}

    def send(j: int, g: np.ndarray):
        if j in node_grads:
            node_grads[j] = node_grads[j] + g
        else:
            node_grads[j] = g

    for i in range(len(graph.nodes) - 1, -1, -1):
        node = graph.nodes[i]
        if node.kind == "agg" or i not in node_grads:
            continue
        g = node_grads.pop(i)
        k = node.kind
        if k == "input":
            continue
        if k in ("conv3x3", "conv_dw", "conv1x1"):
            cache = caches[i]
            gz = T.relu_backward(g, cache["z"]) if node.spec.relu else g
            p = params.node(i)
            gx, gw, gb = T.conv2d_backward(gz, cache["x"], p["w"], node.spec.conv())
            params.accumulate(i, {"w": gw, "b": gb})
            send(node.inputs[0], gx)
        elif k == "vac":
            gx, gp = B.vac_backward(g, caches[i], params.node(i), node.spec)
            params.accumulate(i, gp)
            send(node.inputs[0], gx)
        elif k == "aads_down":
            gx, gp = B.aads_down_backward(g, caches[i], params.node(i), node.spec)
            params.accumulate(i, gp)
            send(node.inputs[0], gx)
        elif k == "max_pool":
            send(node.inputs[0], T.max_pool_backward(g, caches[i]["x"], node.spec.kernel, node.spec.stride))
        elif k == "concat":
            offs = 0
            for j, c in zip(node.inputs, caches[i]["channels"]):
                send(j, g[:, offs : offs + c])
                offs += c
        elif k == "add":
            send(node.inputs[0], g)
            send(node.inputs[1], g)
        elif k == "gap":
            x = caches[i]["x"]
            send(node.inputs[0], T.global_avg_pool_backward(g.reshape(x.shape[0], x.shape[1]), x))
        elif k == "fc_head":
            cache = caches[i]
            gz = T.softmax_backward(g, cache["prob"])
            p = params.node(i)
            gf, gw, gb = T.fully_connected_backward(gz, cache["feats"], p["w"])
            params.accumulate(i, {"w": gw, "b": gb})
            if node.spec.standardize:
                gf = T.standardize_backward(gf, cache["feats"], cache["scale"], axes=(1,))
            send(node.inputs[0], gf.reshape(cache["in_shape"]))


# ---------------------------------------------------------------------------
# Complexity accounting
# ---------------------------------------------------------------------------

def conv_mac_flops(h_out: int, w_out: int, c_out: int, c_in_per_group: int,
                   k_h: int, k_w: int) -> int:
    """2 * H_out * W_out * C_out * (C_in/groups) * k_h * k_w (1 MAC = 2 FLOPs)."""
    return 2 * h_out * w_out * c_out * c_in_per_group * k_h * k_w


def _conv_node_flops(spec: ConvSpec, h: int, w: int, relu: bool, bias: bool = True) -> int:
    h_out, w_out = spec.out_hw(h, w)
    out_elems = h_out * w_out * spec.out_channels
    total = conv_mac_flops(h_out, w_out, spec.out_channels,
                           spec.in_channels // spec.groups, spec.kernel_h, spec.kernel_w)
    if bias:
        total += out_elems
    if relu:
        total += out_elems
    return total


def count_params(graph: ArchGraph) -> int:
    return sum(
        int(np.prod(shape))
        for node in graph.nodes
        for shape in node_param_shapes(node).values()
    )


def count_flops(graph: ArchGraph, h: int, w: int) -> int:
    """Analytic per-sample forward FLOPs; additive over nodes."""
    shapes = infer_shapes(graph, h, w)
    total = 0
    for i, node in enumerate(graph.nodes):
        k = node.kind
        if k == "input":
            if node.spec.standardize:
                total += 4 * node.spec.channels * h * w
            continue
        if k in ("conv3x3", "conv_dw", "conv1x1"):
            _, ih, iw = shapes[node.inputs[0]]
            total += _conv_node_flops(node.spec.conv(), ih, iw, node.spec.relu)
        elif k == "vac":
            c, ih, iw = shapes[node.inputs[0]]
            s = node.spec.condense_stride
            ph, pw = ih // s, iw // s
            total += (s * s - 1) * c * ph * pw                      # max-pool comparisons
            total += _conv_node_flops(node.spec.embed1, ph, pw, relu=True)
            total += _conv_node_flops(node.spec.embed2, ph, pw, relu=True)
            total += _conv_node_flops(node.spec.proj, ih, iw, relu=False)
            total += 2 * c * ih * iw                                # sigmoid + gating multiply
        elif k == "aads_down":
            cin, ih, iw = shapes[node.inputs[0]]
            if node.spec.use_conv:
                total += _conv_node_flops(node.spec.conv, ih, iw, relu=True)
            oh, ow = -(-ih // 2), -(-iw // 2)
            # blur_pool counted as an unbiased depthwise 3x3 conv
            total += conv_mac_flops(oh, ow, node.spec.out_channels, 1, 3, 3)
        elif k == "max_pool":
            c, oh, ow = shapes[i]
            total += (node.spec.kernel ** 2 - 1) * c * oh * ow
        elif k == "concat":
            pass
        elif k == "add":
            c, ih, iw = shapes[i]
            total += c * ih * iw
        elif k == "gap":
            c, ih, iw = shapes[node.inputs[0]]
            total += c * ih * iw + c
        elif k == "fc_head":
            if node.spec.standardize:
                total += 4 * node.spec.in_features
            total += 2 * node.spec.in_features * node.spec.classes
            total += node.spec.classes          # bias adds
            total += 4 * node.spec.classes      # softmax (max-sub, exp, sum, divide)
        elif k == "agg":
            total += 2 * shapes[i][1]
    return total


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_SPEC_FIELDS = {
    "input": ("channels", "standardize"),
    "conv3x3": ("in_channels", "out_channels", "stride", "groups", "relu"),
    "conv_dw": ("channels", "relu"),
    "conv1x1": ("in_channels", "out_channels", "relu", "stride"),
    "vac": ("channels", "condense_stride", "embed_groups", "embed_channels"),
    "aads_down": ("in_channels", "out_channels", "use_conv"),
    "max_pool": ("kernel", "stride"),
    "fc_head": ("in_features", "classes", "standardize"),
}

_SPEC_TYPES = {
    "input": InputSpec,
    "conv3x3": Conv3x3Spec,
    "conv_dw": ConvDwSpec,
    "conv1x1": Conv1x1Spec,
    "vac": VacSpec,
    "aads_down": AadsSpec,
    "max_pool": MaxPoolSpec,
    "fc_head": FcHeadSpec,
}


def serialize_graph(graph: ArchGraph) -> str:
    """Human-readable node list: one line per node, plus a JSON meta line."""
    lines = ["archgraph v1"]
    if graph.meta:
        lines.append("meta " + json.dumps(graph.meta, sort_keys=True))
    for i, node in enumerate(graph.nodes):
        parts = [f"node {i} {node.kind}"]
        for f in _SPEC_FIELDS.get(node.kind, ()):
            v = getattr(node.spec, f)
            parts.append(f"{f}={int(v) if isinstance(v, bool) else v}")
        parts.append("inputs=" + (",".join(map(str, node.inputs)) if node.inputs else "-"))
        parts.append(f"col={node.column}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def parse_graph(text: str) -> ArchGraph:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines or lines[0] != "archgraph v1":
        raise GraphError(f"unrecognized graph header: {lines[:1]}")
    meta: dict = {}
    nodes: list[Node] = []
    for ln in lines[1:]:
        if ln.startswith("meta "):
            meta = json.loads(ln[5:])
            continue
        toks = ln.split()
        if toks[0] != "node":
            raise GraphError(f"unparseable graph line: {ln!r}")
        idx, kind = int(toks[1]), toks[2]
        if idx != len(nodes):
            raise GraphError(f"node lines out of order at {idx}")
        kv = dict(tok.split("=", 1) for tok in toks[3:])
        inputs = tuple(int(s) for s in kv.pop("inputs").split(",")) if kv.get("inputs", "-") != "-" else ()
        column = int(kv.pop("col", "0"))
        if kind in _SPEC_TYPES:
            fields = {}
            for f in _SPEC_FIELDS[kind]:
                raw = kv[f]
                fields[f] = bool(int(raw)) if f in ("relu", "use_conv", "standardize") else int(raw)
            spec = _SPEC_TYPES[kind](**fields)
        else:
            spec = None
        nodes.append(Node(kind=kind, spec=spec, inputs=inputs, column=column))
    return ArchGraph(nodes=nodes, meta=meta)


def save_checkpoint(path: str, graph: ArchGraph, params: ModelParams):
    """Graph text plus named f32 tensor blobs in one binary file."""
    gtext = serialize_graph(graph).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<I", len(gtext)))
        fh.write(gtext)
        keys = sorted(params.values.keys())
        fh.write(struct.pack("<I", len(keys)))
        for nid, name in keys:
            key = f"{nid}.{name}".encode()
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            T.write_tensor(fh, params.values[(nid, name)])


def load_checkpoint(path: str, dtype=np.float32) -> tuple[ArchGraph, ModelParams]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        (glen,) = struct.unpack("<I", fh.read(4))
        graph = parse_graph(fh.read(glen).decode())
        (count,) = struct.unpack("<I", fh.read(4))
        values: dict[tuple[int, str], np.ndarray] = {}
        for _ in range(count):
            (klen,) = struct.unpack("<H", fh.read(2))
            key = fh.read(klen).decode()
            nid, name = key.split(".", 1)
            values[(int(nid), name)] = T.read_tensor(fh).astype(dtype)
    return graph, ModelParams(values)


# ---------------------------------------------------------------------------
# Builder
# ---------------------------------------------------------------------------

class GraphBuilder:
    """Append-only builder that tracks node ids for wiring."""

    def __init__(self, channels: int = 1, standardize: bool = False):
        self.nodes: list[Node] = [Node("input", InputSpec(channels, standardize), ())]

    def add(self, kind: str, spec, inputs, column: int = 0) -> int:
        if isinstance(inputs, int):
            inputs = (inputs,)
        self.nodes.append(Node(kind, spec, tuple(inputs), column))
        return len(self.nodes) - 1

    def conv3x3(self, src, cin, cout, stride=1, groups=1, relu=True, column=0):
        return self.add("conv3x3", Conv3x3Spec(cin, cout, stride, groups, relu), src, column)

    def conv_dw(self, src, channels, relu=True, column=0):
        return self.add("conv_dw", ConvDwSpec(channels, relu), src, column)

    def conv1x1(self, src, cin, cout, relu=True, column=0):
        return self.add("conv1x1", Conv1x1Spec(cin, cout, relu), src, column)

    def vac(self, src, channels, condense_stride=2, embed_groups=2, embed_channels=8, column=0):
        return self.add("vac", VacSpec(channels, condense_stride, embed_groups, embed_channels),
                        src, column)

    def aads(self, src, cin, cout=None, use_conv=None, column=0):
        cout = cin if cout is None else cout
        if use_conv is None:
            use_conv = cout != cin
        return self.add("aads_down", AadsSpec(cin, cout, use_conv), src, column)

    def concat(self, srcs, column=0):
        return self.add("concat", None, tuple(srcs), column)

    def residual_add(self, a, b, column=0):
        return self.add("add", None, (a, b), column)

    def gap(self, src, column=0):
        return self.add("gap", None, src, column)

    def dual_heads(self, src, in_features, classes=2, standardize=False):
        h1 = self.add("fc_head", FcHeadSpec(in_features, classes, standardize), src)
        h2 = self.add("fc_head", FcHeadSpec(in_features, classes, standardize), src)
        return self.add("agg", None, (h1, h2))

    def build(self, meta: dict | None = None, h: int = 224, w: int = 224) -> ArchGraph:
        g = ArchGraph(self.nodes, meta or {})
        validate(g, h, w)
        return g


def build_reference_config() -> ArchGraph:
    """The shipped compact inspection network.

    Frozen columnar configuration: attention condensers concentrated in the
    two earliest stages, three columns with a single early merge and denser
    late merges, all downsampling after the stem via anti-aliased blocks,
    and the dual softmax head.  Budgets enforced by the build-time tests:
    0.70M..0.85M parameters, <= 100M FLOPs at 224x224.
    """
    g = GraphBuilder(channels=1, standardize=True)
    stem = g.conv3x3(0, 1, 16, stride=2)                  # 16 @ 112
    trunk0 = g.aads(stem, 16)                             # 16 @ 56

    # Stage 1 (56x56): three independent columns, VAC-heavy.
    cols = []
    for col in (1, 2, 3):
        x = g.conv1x1(trunk0, 16, 20, column=col)
        x = g.vac(x, 20, condense_stride=4, embed_groups=4, embed_channels=8, column=col)
        x = g.conv_dw(x, 20, column=col)
        x = g.vac(x, 20, condense_stride=4, embed_groups=4, embed_channels=8, column=col)
        x = g.conv1x1(x, 20, 20, column=col)
        x = g.aads(x, 20, column=col)                     # 20 @ 28
        x = g.conv1x1(x, 20, 32, column=col)
        cols.append(x)

    # Stage 2 (28x28): columns continue; first merge joins columns 1+2.
    stage2 = []
    for col, x in zip((1, 2, 3), cols):
        x = g.vac(x, 32, condense_stride=2, embed_groups=4, embed_channels=16, column=col)
        x = g.conv_dw(x, 32, column=col)
        x = g.conv1x1(x, 32, 32, column=col)
        x = g.conv_dw(x, 32, column=col)
        x = g.conv1x1(x, 32, 32, column=col)
        stage2.append(x)
    merged = g.concat(stage2[:2])                         # 64 @ 28
    merged = g.conv1x1(merged, 64, 64)
    side = stage2[2]                                      # 32 @ 28, stays independent

    # Stage 3 (14x14): remaining column merges in; residual refinement.
    trunk = g.aads(merged, 64)                            # 64 @ 14
    trunk = g.conv1x1(trunk, 64, 96)
    side = g.aads(side, 32, column=3)                     # 32 @ 14
    side = g.conv1x1(side, 32, 48, column=3)
    trunk = g.concat([trunk, side])                       # 144 @ 14
    trunk = g.conv1x1(trunk, 144, 128)
    y = g.conv_dw(trunk, 128)
    y = g.conv1x1(y, 128, 128)
    trunk = g.residual_add(trunk, y)

    # Stage 4 (7x7): widest stage, grouped 3x3 plus residual pointwise.
    trunk = g.aads(trunk, 128)                            # 128 @ 7
    trunk = g.conv1x1(trunk, 128, 256)
    y = g.conv3x3(trunk, 256, 256, groups=8)
    y = g.conv1x1(y, 256, 256)
    trunk = g.residual_add(trunk, y)

    pooled = g.gap(trunk)                                 # 256 features
    wide = g.conv1x1(pooled, 256, 2048)                   # cheap post-pool widening
    g.dual_heads(wide, 2048, standardize=True)
    return g.build(meta={"version": REFERENCE_VERSION})
