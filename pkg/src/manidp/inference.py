"""Threshold calibration, dynamic skip-mode inference, and FLOPs analysis.

After training, per-layer pruning thresholds are frozen from average channel
saliencies over a calibration set. At inference each instance then selects
its own sub-network: channels whose saliency falls below the layer threshold
are skipped entirely, and the per-instance cost is reported in MACs so the
spread of sub-network sizes can be analyzed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from manidp import autograd as ag
from manidp import network as nw
from manidp.autograd import ShapeError, Tensor
from manidp.training import threshold_from_mean


# -- domain types --------------------------------------------------------------


@dataclass(frozen=True)
class CalibratedThresholds:
    """Frozen per-layer gate thresholds plus the statistics that made them."""

    xi: Tuple[float, ...]
    eta: float
    calibration_size: int

    def __post_init__(self):
        if not 0.0 <= self.eta < 1.0:
            raise ValueError(f"eta must lie in [0, 1), got {self.eta}")
        if self.calibration_size < 1:
            raise ValueError(
                f"calibration_size must be >= 1, got {self.calibration_size}"
            )
        for index, value in enumerate(self.xi):
            if value < 0:
                raise ValueError(f"threshold for layer {index} is negative: {value}")


@dataclass(frozen=True)
class SubNetworkProfile:
    """The sub-network one instance selected: kept channels, cost, outcome."""

    kept: Tuple[Tuple[int, ...], ...]
    flops: int
    predicted: int
    correct: Optional[bool] = None

    def kept_counts(self) -> Tuple[int, ...]:
        return tuple(len(indices) for indices in self.kept)


@dataclass(frozen=True)
class FlopsDistribution:
    """Histogram of per-instance MACs plus (flops, ce, correct) triples."""

    counts: np.ndarray
    bin_edges: np.ndarray
    flops: np.ndarray
    ce: np.ndarray
    correct: np.ndarray


# -- helpers -------------------------------------------------------------------


def _images_labels(data) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if hasattr(data, "images"):
        return data.images, getattr(data, "labels", None)
    if isinstance(data, tuple):
        images, labels = data
        return np.asarray(images), np.asarray(labels)
    return np.asarray(data), None


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield start, min(start + batch_size, n)


def _skip_forward(
    net: nw.Network, x: np.ndarray, thresholds: CalibratedThresholds
) -> Tuple[np.ndarray, List[List[Tuple[int, ...]]]]:
    """Forward pass that convolves only kept channels.

    Returns logits plus each instance's kept-channel index sets, one per
    gated layer. Masked channels are exact zeros in the dense route, so the
    skip route produces the same logits while touching fewer channels.
    """
    nw.check_chaining(net)
    if x.ndim != 4:
        raise ShapeError(f"skip forward: input must be 4-D [B, C, H, W], got {x.shape}")
    if len(thresholds.xi) != len(net.layers):
        raise ShapeError(
            f"skip forward: {len(thresholds.xi)} thresholds for "
            f"{len(net.layers)} gated layers"
        )
    b = x.shape[0]
    k_stem = net.stem_weight.shape[2]
    with ag.no_grad():
        features = nw._conv_relu(
            Tensor(x), net.stem_weight, net.stem_bias, net.spec.stem_stride, k_stem // 2
        )
        pooled_prev = ag.global_avg_pool(features)
        kept_sets: List[List[Tuple[int, ...]]] = [[] for _ in range(b)]
        gated_prev: Optional[np.ndarray] = None
        mask_prev: Optional[np.ndarray] = None
        for index, layer in enumerate(net.layers):
            saliency = nw._saliency_from_pooled(layer.controller, pooled_prev)
            mask = saliency.data >= thresholds.xi[index]
            for i in range(b):
                kept_sets[i].append(tuple(np.flatnonzero(mask[i]).tolist()))
            if gated_prev is None:
                features = nw._conv_relu(
                    features, layer.weight, layer.bias, layer.stride, layer.padding
                )
            else:
                features = Tensor(
                    nw.gated_conv_skip(layer, features.data, gated_prev, mask_prev)
                )
            pooled_prev = ag.global_avg_pool(features)
            gated_prev = saliency.data * mask
            mask_prev = mask
        head_in = pooled_prev.data * gated_prev
        logits = head_in @ net.head_weight.data.T + net.head_bias.data
    return logits, kept_sets


def _profiles_from(
    net: nw.Network,
    input_hw: Tuple[int, int],
    logits: np.ndarray,
    kept_sets: List[List[Tuple[int, ...]]],
    labels: Optional[np.ndarray],
) -> Tuple[np.ndarray, List[SubNetworkProfile]]:
    predictions = logits.argmax(axis=1)
    profiles = []
    for i, kept in enumerate(kept_sets):
        counts = [len(indices) for indices in kept]
        flops = nw.network_flops(net, input_hw, counts)
        correct = None if labels is None else bool(predictions[i] == labels[i])
        profiles.append(
            SubNetworkProfile(
                kept=tuple(kept),
                flops=flops,
                predicted=int(predictions[i]),
                correct=correct,
            )
        )
    return predictions, profiles


# -- calibration ---------------------------------------------------------------


def calibrate_thresholds(
    net: nw.Network, data, eta: float, batch_size: int = 256
) -> CalibratedThresholds:
    """Freeze per-layer thresholds from mean saliencies over a calibration set.

    Layers are calibrated front to back: a layer's saliencies depend on the
    gating of every earlier layer, so earlier thresholds are applied while
    the later layers run ungated. This matches the thresholds an in-batch
    rule would pick with the whole calibration set as one batch. Means are
    accumulated in 64-bit so the result is insensitive to batch order.
    """
    images, _ = _images_labels(data)
    if images.shape[0] == 0:
        raise ValueError("calibrate_thresholds: calibration set is empty")
    if not 0.0 <= eta < 1.0:
        raise ValueError(f"calibrate_thresholds: eta must lie in [0, 1), got {eta}")
    n = images.shape[0]
    xi: List[float] = []
    for index in range(len(net.layers)):
        settled = list(xi)

        def rule(layer_index: int, saliency: Tensor) -> float:
            if layer_index < len(settled):
                return settled[layer_index]
            return 0.0

        acc = np.zeros(net.layers[index].out_channels, dtype=np.float64)
        for start, stop in _batches(n, batch_size):
            with ag.no_grad():
                _, trace = nw.network_forward(net, Tensor(images[start:stop]), rule)
            acc += trace.saliencies[index].data.sum(axis=0, dtype=np.float64)
        xi.append(threshold_from_mean(acc / n, eta))
    return CalibratedThresholds(xi=tuple(xi), eta=eta, calibration_size=n)


# -- dynamic inference -----------------------------------------------------------


def dynamic_infer(
    net: nw.Network,
    x,
    thresholds: CalibratedThresholds,
    labels: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, List[SubNetworkProfile]]:
    """Skip-mode inference: pruned channels are never convolved.

    Returns predicted classes plus one profile per instance recording the
    kept-channel sets and the whole-network MACs at those widths.
    """
    x = np.asarray(x)
    logits, kept_sets = _skip_forward(net, x, thresholds)
    return _profiles_from(net, (x.shape[2], x.shape[3]), logits, kept_sets, labels)


def dynamic_logits(net: nw.Network, x, thresholds: CalibratedThresholds) -> np.ndarray:
    """Skip-mode logits only, for callers that need raw scores per class."""
    logits, _ = _skip_forward(net, np.asarray(x), thresholds)
    return logits


# -- evaluation -------------------------------------------------------------------


def evaluate(
    net: nw.Network, data, thresholds: CalibratedThresholds, batch_size: int = 256
) -> Dict[str, object]:
    """Aggregate dynamic inference over a labelled dataset.

    Returns a JSON-ready document: top-1 error, mean per-instance MACs, the
    reduction relative to the ungated network, and the mean kept fraction
    per gated layer.
    """
    images, labels = _images_labels(data)
    if labels is None:
        raise ValueError("evaluate: dataset carries no labels")
    n = images.shape[0]
    if n == 0:
        raise ValueError("evaluate: dataset is empty")
    wrong = 0
    flops_sum = 0
    kept_sum = np.zeros(len(net.layers), dtype=np.float64)
    widths = np.array([layer.out_channels for layer in net.layers], dtype=np.float64)
    for start, stop in _batches(n, batch_size):
        predictions, profiles = dynamic_infer(
            net, images[start:stop], thresholds, labels[start:stop]
        )
        wrong += int((predictions != labels[start:stop]).sum())
        for profile in profiles:
            flops_sum += profile.flops
            kept_sum += np.array(profile.kept_counts(), dtype=np.float64)
    full = nw.full_network_flops(net, (images.shape[2], images.shape[3]))
    mean_flops = flops_sum / n
    return {
        "top1_error": wrong / n,
        "mean_flops": mean_flops,
        "flops_reduction": 1.0 - mean_flops / full,
        "per_layer_kept_fraction": (kept_sum / n / widths).tolist(),
    }


def flops_distribution(
    net: nw.Network,
    data,
    thresholds: CalibratedThresholds,
    bins: int,
    batch_size: int = 256,
) -> FlopsDistribution:
    """Histogram of per-instance MACs plus (flops, ce, correct) per instance.

    The cross-entropy column lets downstream analysis relate each
    instance's difficulty to the size of the sub-network it was given.
    """
    if bins < 1:
        raise ValueError(f"flops_distribution: bins must be >= 1, got {bins}")
    images, labels = _images_labels(data)
    if labels is None:
        raise ValueError("flops_distribution: dataset carries no labels")
    n = images.shape[0]
    if n == 0:
        raise ValueError("flops_distribution: dataset is empty")
    input_hw = (images.shape[2], images.shape[3])
    all_flops = np.empty(n, dtype=np.int64)
    all_ce = np.empty(n, dtype=np.float64)
    all_correct = np.empty(n, dtype=bool)
    for start, stop in _batches(n, batch_size):
        batch_labels = labels[start:stop]
        logits, kept_sets = _skip_forward(net, images[start:stop], thresholds)
        _, profiles = _profiles_from(net, input_hw, logits, kept_sets, batch_labels)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        all_ce[start:stop] = -log_probs[np.arange(stop - start), batch_labels]
        for offset, profile in enumerate(profiles):
            all_flops[start + offset] = profile.flops
            all_correct[start + offset] = bool(profile.correct)
    counts, edges = np.histogram(all_flops, bins=bins)
    return FlopsDistribution(
        counts=counts, bin_edges=edges, flops=all_flops, ce=all_ce, correct=all_correct
    )


def save_flops_csv(dist: FlopsDistribution, path) -> None:
    """Write the per-instance (flops, ce, correct) triples as CSV."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["flops", "cross_entropy", "correct"])
        for flops, ce, correct in zip(dist.flops, dist.ce, dist.correct):
            writer.writerow([int(flops), f"{ce:.8f}", int(correct)])
