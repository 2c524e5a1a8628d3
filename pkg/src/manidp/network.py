"""Gated CNN building blocks.

A network here is a plain convolution stem, a stack of gated convolution
layers, and a pooled linear classifier head. Each gated layer owns a small
controller that predicts per-instance channel saliencies from the layer's
input; saliencies below a threshold are zeroed by the gate, and the
surviving values multiplicatively scale that layer's output channels as
they feed the next convolution. The stem and the head are never gated.

FLOPs are reported as multiply-accumulate counts; pooling, bias adds and
activations are not counted. Controller cost is always counted in full.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from manidp import autograd as ag
from manidp.autograd import ShapeError, Tensor

UNGATED = "ungated"

ThresholdRule = Union[str, Sequence[float], Callable[[int, Tensor], float]]


# -- domain types --------------------------------------------------------------


@dataclass
class SaliencyController:
    """Squeeze-excitation style saliency predictor for one gated layer.

    Maps pooled input features [B, c_in] to nonnegative saliencies
    [B, c_out] via reduce -> relu -> expand -> relu. The terminal ReLU
    (rather than a sigmoid) leaves saliencies unbounded above and lets the
    l1 penalty drive them exactly to zero.
    """

    W_reduce: Tensor
    b_reduce: Tensor
    W_expand: Tensor
    b_expand: Tensor
    reduction_ratio: int = 4

    @property
    def in_channels(self) -> int:
        return self.W_reduce.shape[1]

    @property
    def hidden_width(self) -> int:
        return self.W_reduce.shape[0]

    @property
    def out_channels(self) -> int:
        return self.W_expand.shape[0]

    def parameters(self) -> List[Tensor]:
        return [self.W_reduce, self.b_reduce, self.W_expand, self.b_expand]


@dataclass
class GatedConvLayer:
    """One gated convolution: weight [c_out, c_in, k, k] plus its controller."""

    weight: Tensor
    bias: Tensor
    controller: SaliencyController
    stride: int = 1
    padding: int = 1

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias] + self.controller.parameters()


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description sufficient to rebuild a network."""

    in_channels: int = 1
    num_classes: int = 10
    stem_channels: int = 8
    gated_channels: Tuple[int, ...] = (16, 16, 32, 32)
    gated_strides: Tuple[int, ...] = (2, 1, 2, 1)
    kernel_size: int = 3
    stem_stride: int = 1
    reduction_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "gated_channels", tuple(int(c) for c in self.gated_channels))
        object.__setattr__(self, "gated_strides", tuple(int(s) for s in self.gated_strides))
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.stem_channels < 1:
            raise ValueError(f"stem_channels must be >= 1, got {self.stem_channels}")
        if not self.gated_channels:
            raise ValueError("at least one gated layer is required")
        if any(c < 1 for c in self.gated_channels):
            raise ValueError(f"gated_channels must all be >= 1, got {self.gated_channels}")
        if len(self.gated_strides) != len(self.gated_channels):
            raise ValueError(
                f"gated_strides has {len(self.gated_strides)} entries but "
                f"gated_channels has {len(self.gated_channels)}"
            )
        if any(s < 1 for s in self.gated_strides):
            raise ValueError(f"strides must all be >= 1, got {self.gated_strides}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.stem_stride < 1:
            raise ValueError(f"stem_stride must be >= 1, got {self.stem_stride}")
        if self.reduction_ratio < 1:
            raise ValueError(f"reduction_ratio must be >= 1, got {self.reduction_ratio}")


@dataclass
class Network:
    """Stem convolution, gated layer stack, and linear classifier head."""

    spec: NetworkSpec
    stem_weight: Tensor
    stem_bias: Tensor
    layers: List[GatedConvLayer]
    head_weight: Tensor
    head_bias: Tensor

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[0]

    @property
    def num_gated_layers(self) -> int:
        return len(self.layers)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        named: List[Tuple[str, Tensor]] = [
            ("stem.weight", self.stem_weight),
            ("stem.bias", self.stem_bias),
        ]
        for i, layer in enumerate(self.layers):
            named.append((f"layers.{i}.weight", layer.weight))
            named.append((f"layers.{i}.bias", layer.bias))
            named.append((f"layers.{i}.controller.W_reduce", layer.controller.W_reduce))
            named.append((f"layers.{i}.controller.b_reduce", layer.controller.b_reduce))
            named.append((f"layers.{i}.controller.W_expand", layer.controller.W_expand))
            named.append((f"layers.{i}.controller.b_expand", layer.controller.b_expand))
        named.append(("head.weight", self.head_weight))
        named.append(("head.bias", self.head_bias))
        return named

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()


@dataclass
class ForwardTrace:
    """Everything a forward pass records about the gating decisions.

    Per gated layer: raw saliencies, gated saliencies, boolean keep masks,
    the threshold used, and the pooled pre-gate output features. Logits are
    always present; per-instance cross-entropy is attached by the loss.
    """

    saliencies: List[Tensor] = field(default_factory=list)
    gated_saliencies: List[Tensor] = field(default_factory=list)
    masks: List[np.ndarray] = field(default_factory=list)
    pooled_features: List[Tensor] = field(default_factory=list)
    thresholds: List[float] = field(default_factory=list)
    logits: Optional[Tensor] = None
    ce_per_instance: Optional[Tensor] = None

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]

    @property
    def num_gated_layers(self) -> int:
        return len(self.saliencies)


# -- construction ---------------------------------------------------------------


def controller_hidden_width(in_channels: int, reduction_ratio: int) -> int:
    return max(1, in_channels // reduction_ratio)


def _kaiming(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    std = math.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def build_controller(
    rng: np.random.Generator, in_channels: int, out_channels: int, reduction_ratio: int, dtype
) -> SaliencyController:
    hidden = controller_hidden_width(in_channels, reduction_ratio)
    # Expand weights start nonnegative so no saliency channel is dead at
    # birth: the terminal ReLU cannot revive a channel whose output is zero
    # for every input, and signed init kills about half of them that way.
    expand = _kaiming(rng, (out_channels, hidden), hidden, dtype)
    expand.data = np.abs(expand.data)
    return SaliencyController(
        W_reduce=_kaiming(rng, (hidden, in_channels), in_channels, dtype),
        b_reduce=_zeros(hidden, dtype),
        W_expand=expand,
        b_expand=_zeros(out_channels, dtype),
        reduction_ratio=reduction_ratio,
    )


def build_network(spec: NetworkSpec, seed: int = 0, scale_probe=None) -> Network:
    """Seeded Kaiming fan-in initialization, zero biases.

    Without batch normalization the saliency scale at init depends on the
    incoming feature magnitudes, which compound through the gated layers.
    Passing a small input batch as ``scale_probe`` rescales each
    controller's expand weights once so every layer starts at mean
    saliency 1.0 (a neutral gate); the result is deterministic given
    (seed, probe).
    """
    rng = np.random.default_rng(seed)
    dtype = ag.current_dtype()
    k = spec.kernel_size
    stem_weight = _kaiming(
        rng, (spec.stem_channels, spec.in_channels, k, k), spec.in_channels * k * k, dtype
    )
    stem_bias = _zeros(spec.stem_channels, dtype)
    layers: List[GatedConvLayer] = []
    prev = spec.stem_channels
    for c_out, stride in zip(spec.gated_channels, spec.gated_strides):
        weight = _kaiming(rng, (c_out, prev, k, k), prev * k * k, dtype)
        bias = _zeros(c_out, dtype)
        controller = build_controller(rng, prev, c_out, spec.reduction_ratio, dtype)
        layers.append(
            GatedConvLayer(weight=weight, bias=bias, controller=controller, stride=stride, padding=k // 2)
        )
        prev = c_out
    head_weight = _kaiming(rng, (spec.num_classes, prev), prev, dtype)
    head_bias = _zeros(spec.num_classes, dtype)
    net = Network(
        spec=spec,
        stem_weight=stem_weight,
        stem_bias=stem_bias,
        layers=layers,
        head_weight=head_weight,
        head_bias=head_bias,
    )
    if scale_probe is not None:
        _rescale_controllers(net, scale_probe)
    return net


def _rescale_controllers(net: Network, probe) -> None:
    """Set each controller's init scale so its mean saliency over the probe
    batch is 1.0.

    Layers are handled in order because rescaling one controller changes
    the features every later controller sees.
    """
    probe_t = probe if isinstance(probe, Tensor) else Tensor(np.asarray(probe))
    for index in range(len(net.layers)):
        with ag.no_grad():
            _, trace = network_forward(net, probe_t, UNGATED)
        means = trace.saliencies[index].data.mean(axis=0)
        controller = net.layers[index].controller
        if float(means.max()) <= 1e-12:
            # Expand weights are nonnegative, so an all-zero layer means the
            # hidden units never fire on the probe; restart them alive.
            controller.W_reduce.data = np.abs(controller.W_reduce.data)
            with ag.no_grad():
                _, trace = network_forward(net, probe_t, UNGATED)
            means = trace.saliencies[index].data.mean(axis=0)
        # Per-channel normalization: every channel starts at mean saliency
        # 1.0, so none begins close enough to the ReLU dead zone for early
        # momentum steps to kill it.
        scale = np.where(means > 1e-12, means, 1.0)
        controller.W_expand.data = controller.W_expand.data / scale[:, None]
    with ag.no_grad():
        logits, _ = network_forward(net, probe_t, UNGATED)
    spread = float(logits.data.std())
    if spread > 1e-12:
        # Temper the starting logits so the first gradient steps stay small
        # regardless of how feature magnitudes compounded through depth.
        net.head_weight.data = net.head_weight.data * (0.5 / spread)


def rebalance_saliency_scale(net: Network, probe, target: float = 1.0) -> List[float]:
    """Fold saliency-scale drift into the consuming weights, preserving the function.

    Saliencies multiply features, so training can trade magnitude freely
    between the two; after a while a layer's mean saliency may sit far from
    the scale the sparsity penalty was tuned for. For each gated layer this
    measures the mean saliency over the probe batch and rescales the
    controller output by ``target / mean`` while scaling the consumer of the
    gated channels (the next convolution, or the classifier head for the
    last layer) by the inverse. The network output is unchanged, and gate
    decisions are unchanged too because thresholds are order statistics of
    the saliencies and scale along with them.

    Returns the measured per-layer mean saliencies. Layers whose mean is
    ~zero are left alone. Optimizer momentum is expressed in the old
    parameter scale, so restart the optimizer state after calling this.
    """
    if target <= 0:
        raise ValueError(f"target must be positive, got {target}")
    probe_t = probe if isinstance(probe, Tensor) else Tensor(np.asarray(probe))
    with ag.no_grad():
        _, trace = network_forward(net, probe_t, UNGATED)
    means: List[float] = []
    for index, layer in enumerate(net.layers):
        mean = float(trace.saliencies[index].data.mean())
        means.append(mean)
        if mean <= 1e-12:
            continue
        s = target / mean
        layer.controller.W_expand.data = layer.controller.W_expand.data * s
        layer.controller.b_expand.data = layer.controller.b_expand.data * s
        if index + 1 < len(net.layers):
            consumer = net.layers[index + 1].weight
        else:
            consumer = net.head_weight
        consumer.data = consumer.data / s
    return means


def check_chaining(net: Network) -> None:
    """Verify consecutive channel counts agree before running a forward pass."""
    prev = net.stem_weight.shape[0]
    for i, layer in enumerate(net.layers):
        if layer.in_channels != prev:
            raise ShapeError(
                f"layer {i}: weight expects {layer.in_channels} input channels "
                f"but the previous layer produces {prev}"
            )
        if layer.controller.in_channels != prev:
            raise ShapeError(
                f"layer {i}: controller reads {layer.controller.in_channels} channels "
                f"but the previous layer produces {prev}"
            )
        if layer.controller.out_channels != layer.out_channels:
            raise ShapeError(
                f"layer {i}: controller emits {layer.controller.out_channels} saliencies "
                f"but the layer has {layer.out_channels} output channels"
            )
        prev = layer.out_channels
    if net.head_weight.shape[1] != prev:
        raise ShapeError(
            f"head expects {net.head_weight.shape[1]} features but the last "
            f"gated layer produces {prev} channels"
        )


# -- forward operations -----------------------------------------------------------


def _saliency_from_pooled(controller: SaliencyController, pooled: Tensor) -> Tensor:
    reduced = ag.relu(ag.linear(pooled, controller.W_reduce, controller.b_reduce))
    return ag.relu(ag.linear(reduced, controller.W_expand, controller.b_expand))


def predict_saliency(controller: SaliencyController, features: Tensor) -> Tensor:
    """Per-instance channel saliencies [B, c_out] from a feature map [B, c_in, H, W]."""
    if features.data.ndim != 4:
        raise ShapeError(f"predict_saliency: features must be 4-D, got {features.shape}")
    if features.shape[1] != controller.in_channels:
        raise ShapeError(
            f"predict_saliency: channel axis (axis 1) has {features.shape[1]} channels "
            f"but the controller reads {controller.in_channels}"
        )
    return _saliency_from_pooled(controller, ag.global_avg_pool(features))


def gate(saliency: Tensor, threshold: float) -> Tuple[Tensor, np.ndarray]:
    """Zero saliencies strictly below the threshold; ties are kept.

    The threshold is a constant: no gradient flows through it, and the
    adjoint is identity on kept entries, zero on pruned ones.
    """
    xi = float(threshold)
    if xi < 0:
        raise ValueError(f"gate: threshold must be >= 0, got {xi}")
    mask = saliency.data >= xi
    gated = ag.apply_op(saliency.data * mask, (saliency,), lambda g: (g * mask,))
    return gated, mask


def _conv_relu(x: Tensor, weight: Tensor, bias: Tensor, stride: int, padding: int) -> Tensor:
    out = ag.conv2d(x, weight, stride=stride, padding=padding)
    out = out + bias.reshape((1, bias.shape[0], 1, 1))
    return ag.relu(out)


def gated_conv_forward(layer: GatedConvLayer, features: Tensor, gated_prev: Tensor) -> Tensor:
    """relu(conv(features * gated_prev, weight) + bias), dense over all channels."""
    scaled = ag.channel_scale(features, gated_prev)
    return _conv_relu(scaled, layer.weight, layer.bias, layer.stride, layer.padding)


def gated_conv_skip(
    layer: GatedConvLayer,
    features: np.ndarray,
    gated_prev: np.ndarray,
    mask_prev: np.ndarray,
) -> np.ndarray:
    """Skip-mode convolution: masked-out input channels are never touched.

    Masks may differ per instance, so instances are processed one at a time.
    Produces the same values as the dense route because pruned channels are
    exact zeros there.
    """
    b, _, h, w = features.shape
    k = layer.kernel_size
    oh = (h + 2 * layer.padding - k) // layer.stride + 1
    ow = (w + 2 * layer.padding - k) // layer.stride + 1
    out = np.empty((b, layer.out_channels, oh, ow), dtype=features.dtype)
    with ag.no_grad():
        for i in range(b):
            kept = np.flatnonzero(mask_prev[i])
            if kept.size == 0:
                out[i] = 0.0
                continue
            scaled = features[i : i + 1, kept] * gated_prev[i, kept][None, :, None, None]
            sub_weight = np.ascontiguousarray(layer.weight.data[:, kept])
            out[i] = ag.conv2d(
                Tensor(scaled), Tensor(sub_weight), stride=layer.stride, padding=layer.padding
            ).data[0]
    out += layer.bias.data[None, :, None, None]
    return np.maximum(out, 0)


def _resolve_threshold(rule: ThresholdRule, index: int, saliency: Tensor, n_layers: int) -> float:
    if isinstance(rule, str):
        if rule != UNGATED:
            raise ValueError(f"unknown threshold sentinel {rule!r}, expected {UNGATED!r}")
        return 0.0
    if callable(rule):
        return float(rule(index, saliency))
    if len(rule) != n_layers:
        raise ShapeError(
            f"thresholds has {len(rule)} entries but the network has {n_layers} gated layers"
        )
    return float(rule[index])


def network_forward(
    net: Network, x: Tensor, thresholds: ThresholdRule = UNGATED
) -> Tuple[Tensor, ForwardTrace]:
    """Full dense forward pass: stem -> gated stack -> head.

    ``thresholds`` is the UNGATED sentinel (every gate open), a sequence of
    one threshold per gated layer, or a callable ``(layer_index, raw
    saliencies) -> threshold`` evaluated mid-forward, which is how training
    derives thresholds from the current batch.

    Each layer's controller reads the pre-gate previous feature map; its
    gated saliency scales that layer's output channels where the next
    convolution (or the head) consumes them.
    """
    check_chaining(net)
    if x.data.ndim != 4:
        raise ShapeError(f"network_forward: input must be 4-D [B, C, H, W], got {x.shape}")
    if x.shape[1] != net.stem_weight.shape[1]:
        raise ShapeError(
            f"network_forward: input has {x.shape[1]} channels (axis 1) but the "
            f"stem expects {net.stem_weight.shape[1]}"
        )
    n_layers = len(net.layers)
    trace = ForwardTrace()
    k_stem = net.stem_weight.shape[2]
    features = _conv_relu(x, net.stem_weight, net.stem_bias, net.spec.stem_stride, k_stem // 2)
    pooled_prev = ag.global_avg_pool(features)
    gated_prev: Optional[Tensor] = None
    for index, layer in enumerate(net.layers):
        saliency = _saliency_from_pooled(layer.controller, pooled_prev)
        xi = _resolve_threshold(thresholds, index, saliency, n_layers)
        gated, mask = gate(saliency, xi)
        if gated_prev is None:
            features = _conv_relu(features, layer.weight, layer.bias, layer.stride, layer.padding)
        else:
            features = gated_conv_forward(layer, features, gated_prev)
        pooled_prev = ag.global_avg_pool(features)
        trace.saliencies.append(saliency)
        trace.gated_saliencies.append(gated)
        trace.masks.append(mask)
        trace.pooled_features.append(pooled_prev)
        trace.thresholds.append(xi)
        gated_prev = gated
    head_in = pooled_prev * gated_prev
    trace.logits = ag.linear(head_in, net.head_weight, net.head_bias)
    return trace.logits, trace


# -- FLOPs accounting --------------------------------------------------------------


def conv_output_hw(h: int, w: int, k: int, stride: int, padding: int) -> Tuple[int, int]:
    return (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1


def layer_flops(
    layer: GatedConvLayer, active_in: int, active_out: int, out_h: int, out_w: int
) -> int:
    """MACs for one gated layer at the given kept-channel counts.

    The convolution term scales with both kept sets; the controller always
    runs on every channel and is counted in full.
    """
    if not 0 <= active_in <= layer.in_channels:
        raise ValueError(
            f"active_in must lie in [0, {layer.in_channels}], got {active_in}"
        )
    if not 0 <= active_out <= layer.out_channels:
        raise ValueError(
            f"active_out must lie in [0, {layer.out_channels}], got {active_out}"
        )
    k = layer.kernel_size
    conv = active_in * active_out * k * k * out_h * out_w
    ctrl = layer.controller.in_channels * layer.controller.hidden_width
    ctrl += layer.controller.hidden_width * layer.controller.out_channels
    return conv + ctrl


def feature_shapes(net: Network, input_hw: Tuple[int, int]) -> List[Tuple[int, int]]:
    """Spatial output shape of the stem followed by each gated layer."""
    k = net.stem_weight.shape[2]
    shapes = [conv_output_hw(input_hw[0], input_hw[1], k, net.spec.stem_stride, k // 2)]
    for layer in net.layers:
        h, w = shapes[-1]
        shapes.append(conv_output_hw(h, w, layer.kernel_size, layer.stride, layer.padding))
    return shapes


def network_flops(net: Network, input_hw: Tuple[int, int], kept_counts: Sequence[int]) -> int:
    """Whole-network MACs with the given kept-channel count per gated layer.

    The stem and head always run at full width. A gated layer's input
    width is the previous layer's kept count (the stem is never pruned).
    """
    if len(kept_counts) != len(net.layers):
        raise ShapeError(
            f"kept_counts has {len(kept_counts)} entries but the network has "
            f"{len(net.layers)} gated layers"
        )
    shapes = feature_shapes(net, input_hw)
    stem_oh, stem_ow = shapes[0]
    k = net.stem_weight.shape[2]
    total = net.stem_weight.shape[1] * net.stem_weight.shape[0] * k * k * stem_oh * stem_ow
    active_in = net.stem_weight.shape[0]
    for layer, kept, (oh, ow) in zip(net.layers, kept_counts, shapes[1:]):
        total += layer_flops(layer, active_in, int(kept), oh, ow)
        active_in = int(kept)
    total += net.head_weight.shape[1] * net.head_weight.shape[0]
    return total


def full_network_flops(net: Network, input_hw: Tuple[int, int]) -> int:
    return network_flops(net, input_hw, [layer.out_channels for layer in net.layers])
