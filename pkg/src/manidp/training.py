"""Training loop: SGD with momentum, threshold warm-up, checkpoints, metrics.

Thresholds during training come from the current batch: each gated layer's
threshold is the ceil(eta_t * c)-th smallest batch-mean saliency, computed
inline during the same forward pass it gates (no separate statistics pass).
The pruning rate eta_t ramps linearly from 0 to the target over the warm-up
epochs, so epoch 0 trains the fully open network.

Checkpoints are a flat record container (magic "MDPK"): every parameter,
optimizer velocity, complexity scalar, and the architecture itself round-trip
bit-exactly, which is what makes seeded resume runs identical to
uninterrupted ones.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from manidp import autograd as ag
from manidp import losses as ls
from manidp import network as nw
from manidp.autograd import ShapeError, Tensor

CHECKPOINT_MAGIC = b"MDPK"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

METRICS_COLUMNS = ("epoch", "ce", "sparsity", "similarity", "active_fraction", "C", "eta_t")


class CheckpointError(ValueError):
    """Malformed checkpoint file; the message names the byte offset."""


@dataclass
class TrainConfig:
    """Hyperparameters for one training run.

    ``lr_milestones`` are fractions of the total epoch count at which the
    learning rate is multiplied by ``lr_decay``.
    """

    eta: float = 0.5
    warmup_epochs: int = 5
    epochs: int = 20
    learning_rate: float = 0.1
    lr_milestones: Tuple[float, ...] = (0.5, 0.75)
    lr_decay: float = 0.1
    lr_warmup_epochs: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    lambda_prime: float = 0.005
    gamma: float = 10.0
    seed: int = 0
    adaptive_lambda: bool = True

    def __post_init__(self):
        if not 0.0 <= self.eta < 1.0:
            raise ValueError(f"eta must lie in [0, 1), got {self.eta}")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ValueError(
                f"warmup_epochs must lie in [0, epochs={self.epochs}], got {self.warmup_epochs}"
            )
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.lambda_prime < 0 or self.gamma < 0:
            raise ValueError("lambda_prime and gamma must be >= 0")
        if self.lr_warmup_epochs < 0:
            raise ValueError(f"lr_warmup_epochs must be >= 0, got {self.lr_warmup_epochs}")


@dataclass
class OptimizerState:
    """Per-parameter velocity buffers, parallel to the parameter list."""

    velocities: List[np.ndarray]
    step_count: int = 0

    @classmethod
    def for_parameters(cls, params: Sequence[Tensor]) -> "OptimizerState":
        return cls(velocities=[np.zeros_like(p.data) for p in params])


@dataclass
class EpochMetrics:
    """One row of the training log. ``C`` is the threshold in effect
    during the epoch (the next epoch's C is this epoch's mean ``ce``)."""

    epoch: int
    ce: float
    sparsity: float
    similarity: float
    active_fraction: float
    C: float
    eta_t: float

    def as_row(self) -> List[str]:
        return [
            str(self.epoch),
            repr(self.ce),
            repr(self.sparsity),
            repr(self.similarity),
            repr(self.active_fraction),
            repr(self.C),
            repr(self.eta_t),
        ]


# -- schedules -------------------------------------------------------------------


def pruning_rate_at(config: TrainConfig, epoch: int) -> float:
    """Linear ramp from 0 to eta over the warm-up epochs."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch must lie in [0, {config.epochs}), got {epoch}")
    if epoch >= config.warmup_epochs:
        return config.eta
    return config.eta * epoch / config.warmup_epochs


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    """Step decay at the milestone epochs, with an optional linear ramp over
    the first ``lr_warmup_epochs`` to keep early momentum steps from
    overshooting saliencies through the gate's dead zone."""
    lr = config.learning_rate
    if epoch < config.lr_warmup_epochs:
        lr *= (epoch + 1) / (config.lr_warmup_epochs + 1)
    for fraction in config.lr_milestones:
        if epoch >= math.floor(fraction * config.epochs):
            lr *= config.lr_decay
    return lr


# -- thresholds -------------------------------------------------------------------


def threshold_from_mean(mean_saliencies: np.ndarray, rate: float) -> float:
    """The ceil(rate * c)-th smallest entry (1-indexed); 0 when rate is 0."""
    if rate <= 0.0:
        return 0.0
    values = np.sort(np.asarray(mean_saliencies, dtype=np.float64))
    c = values.shape[0]
    rank = min(max(math.ceil(rate * c), 1), c)
    return float(values[rank - 1])


def batch_thresholds(trace: nw.ForwardTrace, eta_t: float) -> List[float]:
    """Per-layer thresholds from the trace's batch-mean raw saliencies.

    Recomputes what the inline rule produced during the forward pass, so on
    a trace gated at the same eta_t this returns the trace's thresholds.
    """
    return [
        threshold_from_mean(saliency.data.mean(axis=0), eta_t)
        for saliency in trace.saliencies
    ]


def _inline_threshold_rule(eta_t: float):
    def rule(index: int, saliency: Tensor) -> float:
        return threshold_from_mean(saliency.data.mean(axis=0), eta_t)

    return rule


# -- optimizer ----------------------------------------------------------------------


def sgd_momentum_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v; grads zeroed."""
    if len(params) != len(grads) or len(params) != len(state.velocities):
        raise ShapeError(
            f"got {len(params)} params, {len(grads)} grads, "
            f"{len(state.velocities)} velocities"
        )
    for p, g, v in zip(params, grads, state.velocities):
        if v.shape != p.data.shape:
            raise ShapeError(f"velocity shape {v.shape} does not match param {p.data.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} does not match param {p.data.shape}")
        np.multiply(v, momentum, out=v)
        v += g
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v
        p.zero_grad()
    state.step_count += 1


# -- epoch loop ------------------------------------------------------------------------


def _as_arrays(data) -> Tuple[np.ndarray, np.ndarray]:
    if hasattr(data, "images") and hasattr(data, "labels"):
        return data.images, data.labels
    images, labels = data
    return np.asarray(images), np.asarray(labels)


def train_epoch(
    net: nw.Network,
    data,
    config: TrainConfig,
    state: ls.ComplexityState,
    optimizer: OptimizerState,
    epoch: int,
    augment: Optional[Callable] = None,
    penalty: Optional[Callable] = None,
) -> EpochMetrics:
    """One pass over the data: forward with inline thresholds, total loss,
    SGD step per batch, then refresh the complexity threshold.

    Batch order is fixed by (seed, epoch), so a resumed run replays the
    exact same batches; ``augment(images, rng)`` draws from the same epoch
    stream and stays replayable too. A trailing batch of fewer than 2
    instances is dropped (similarity matrices need pairs). ``penalty(net)``
    adds an extra differentiable term to every batch's objective — the
    static-baseline mode supplies a group-lasso there.
    """
    images, labels = _as_arrays(data)
    n = images.shape[0]
    if n == 0:
        raise ValueError("train_epoch: empty dataset")
    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(n)
    eta_t = pruning_rate_at(config, epoch)
    lr = learning_rate_at(config, epoch)
    rule = _inline_threshold_rule(eta_t)
    c_used = state.C

    ce_sum = 0.0
    ce_count = 0
    sparsity_sum = 0.0
    similarity_sum = 0.0
    active_entries = 0
    total_entries = 0
    batches = 0
    for start in range(0, n, config.batch_size):
        idx = order[start : start + config.batch_size]
        if idx.shape[0] < 2:
            break
        batch = images[idx]
        if augment is not None:
            batch = augment(batch, rng)
        x = Tensor(batch)
        y = labels[idx]
        net.zero_grads()
        _, trace = nw.network_forward(net, x, rule)
        breakdown = ls.total_loss(trace, state, labels=y)
        objective = breakdown.total
        if penalty is not None:
            objective = objective + penalty(net)
        ag.backward(objective)
        params = net.parameters()
        sgd_momentum_step(
            params, [p.grad for p in params], optimizer, lr, config.momentum, config.weight_decay
        )
        state.accumulate(trace.ce_per_instance.data)

        ce_sum += float(trace.ce_per_instance.data.sum())
        ce_count += idx.shape[0]
        sparsity_sum += breakdown.sparsity.item()
        similarity_sum += breakdown.similarity.item()
        for mask in trace.masks:
            active_entries += int(mask.sum())
            total_entries += mask.size
        batches += 1
    if batches == 0:
        raise ValueError("train_epoch: no batch had the required 2+ instances")
    ls.update_complexity_threshold(state)
    return EpochMetrics(
        epoch=epoch,
        ce=ce_sum / ce_count,
        sparsity=sparsity_sum / batches,
        similarity=similarity_sum / batches,
        active_fraction=active_entries / total_entries,
        C=c_used,
        eta_t=eta_t,
    )


def train_model(
    net: nw.Network,
    data,
    config: TrainConfig,
    state: Optional[ls.ComplexityState] = None,
    optimizer: Optional[OptimizerState] = None,
    start_epoch: int = 0,
    metrics_path: Optional[str] = None,
    checkpoint_path: Optional[str] = None,
    augment: Optional[Callable] = None,
) -> List[EpochMetrics]:
    """Run epochs ``start_epoch``..``epochs-1``, optionally logging/saving.

    When ``checkpoint_path`` is set the checkpoint is rewritten after every
    epoch, so interrupting and resuming from it replays the remaining
    epochs identically.
    """
    if state is None:
        state = ls.ComplexityState(
            C=ls.initial_complexity(net.num_classes),
            lambda_prime=config.lambda_prime,
            gamma=config.gamma,
            adaptive=config.adaptive_lambda,
        )
    if optimizer is None:
        optimizer = OptimizerState.for_parameters(net.parameters())
    history: List[EpochMetrics] = []
    for epoch in range(start_epoch, config.epochs):
        metrics = train_epoch(net, data, config, state, optimizer, epoch, augment=augment)
        history.append(metrics)
        if metrics_path is not None:
            append_metrics_csv(metrics_path, metrics, write_header=epoch == 0)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, net, optimizer, state, epoch)
    return history


# -- metrics CSV -----------------------------------------------------------------------


def append_metrics_csv(path: str, metrics: EpochMetrics, write_header: bool) -> None:
    mode = "w" if write_header else "a"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if write_header:
            writer.writerow(METRICS_COLUMNS)
        writer.writerow(metrics.as_row())


def read_metrics_csv(path: str) -> List[EpochMetrics]:
    rows: List[EpochMetrics] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ValueError(f"unexpected metrics columns: {reader.fieldnames}")
        try:
            for line, record in enumerate(reader, start=2):
                values = [record.get(column) for column in METRICS_COLUMNS]
                if any(value is None for value in values) or record.get(None):
                    raise ValueError(
                        f"line {line}: expected {len(METRICS_COLUMNS)} columns"
                    )
                rows.append(
                    EpochMetrics(
                        epoch=int(values[0]),
                        ce=float(values[1]),
                        sparsity=float(values[2]),
                        similarity=float(values[3]),
                        active_fraction=float(values[4]),
                        C=float(values[5]),
                        eta_t=float(values[6]),
                    )
                )
        except csv.Error as error:
            raise ValueError(f"malformed metrics csv: {error}") from error
    return rows


# -- checkpoint container ----------------------------------------------------------------


def write_records(path: str, records: Dict[str, np.ndarray]) -> None:
    """Write the flat record container: magic, version, then named arrays."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        for name, array in records.items():
            array = np.asarray(array)
            if array.dtype not in _CODE_FOR_KIND:
                raise ValueError(f"record {name!r} has unsupported dtype {array.dtype}")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            code = _CODE_FOR_KIND[array.dtype]
            fh.write(struct.pack("<BB", code, array.ndim))
            fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
            fh.write(array.astype(_DTYPE_CODES[code], copy=False).tobytes())


def read_records(path: str) -> Dict[str, np.ndarray]:
    """Parse the record container, raising CheckpointError with byte offsets."""
    with open(path, "rb") as fh:
        blob = fh.read()
    offset = 0

    def take(count: int, what: str) -> bytes:
        nonlocal offset
        if offset + count > len(blob):
            raise CheckpointError(
                f"checkpoint truncated at byte {offset}: need {count} bytes for {what}, "
                f"have {len(blob) - offset}"
            )
        piece = blob[offset : offset + count]
        offset += count
        return piece

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic at byte 0: not a checkpoint file")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at byte 4")
    records: Dict[str, np.ndarray] = {}
    while offset < len(blob):
        record_start = offset
        (name_len,) = struct.unpack("<I", take(4, "record name length"))
        if name_len == 0 or name_len > 4096:
            raise CheckpointError(
                f"implausible record name length {name_len} at byte {record_start}"
            )
        try:
            name = take(name_len, "record name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(
                f"record name at byte {record_start} is not valid UTF-8"
            ) from exc
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"unknown dtype code {code} in record {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of record {name!r}"))
        dtype = _DTYPE_CODES[code]
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(count * dtype.itemsize, f"payload of record {name!r}")
        records[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return records


@dataclass
class LoadedCheckpoint:
    net: nw.Network
    optimizer: OptimizerState
    state: ls.ComplexityState
    epoch: int
    extra: Dict[str, np.ndarray] = field(default_factory=dict)


def _spec_records(spec: nw.NetworkSpec) -> Dict[str, np.ndarray]:
    return {
        "arch/in_channels": np.float64(spec.in_channels),
        "arch/num_classes": np.float64(spec.num_classes),
        "arch/stem_channels": np.float64(spec.stem_channels),
        "arch/gated_channels": np.asarray(spec.gated_channels, dtype=np.float64),
        "arch/gated_strides": np.asarray(spec.gated_strides, dtype=np.float64),
        "arch/kernel_size": np.float64(spec.kernel_size),
        "arch/stem_stride": np.float64(spec.stem_stride),
        "arch/reduction_ratio": np.float64(spec.reduction_ratio),
    }


def _spec_from_records(records: Dict[str, np.ndarray]) -> nw.NetworkSpec:
    try:
        return nw.NetworkSpec(
            in_channels=int(records["arch/in_channels"]),
            num_classes=int(records["arch/num_classes"]),
            stem_channels=int(records["arch/stem_channels"]),
            gated_channels=tuple(int(c) for c in records["arch/gated_channels"]),
            gated_strides=tuple(int(s) for s in records["arch/gated_strides"]),
            kernel_size=int(records["arch/kernel_size"]),
            stem_stride=int(records["arch/stem_stride"]),
            reduction_ratio=int(records["arch/reduction_ratio"]),
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing architecture record {exc}") from exc


def save_checkpoint(
    path: str,
    net: nw.Network,
    optimizer: OptimizerState,
    state: ls.ComplexityState,
    epoch: int,
    extra: Optional[Dict[str, np.ndarray]] = None,
) -> None:
    records: Dict[str, np.ndarray] = dict(_spec_records(net.spec))
    named = net.named_parameters()
    for name, tensor in named:
        records[f"param/{name}"] = tensor.data
    if len(optimizer.velocities) != len(named):
        raise ShapeError(
            f"optimizer has {len(optimizer.velocities)} velocities for {len(named)} params"
        )
    for (name, _), velocity in zip(named, optimizer.velocities):
        records[f"velocity/{name}"] = velocity
    records["state/C"] = np.float64(state.C)
    records["state/lambda_prime"] = np.float64(state.lambda_prime)
    records["state/gamma"] = np.float64(state.gamma)
    records["state/epoch_ce_sum"] = np.float64(state.epoch_ce_sum)
    records["state/epoch_ce_count"] = np.float64(state.epoch_ce_count)
    records["state/adaptive"] = np.float64(1.0 if state.adaptive else 0.0)
    records["meta/epoch"] = np.float64(epoch)
    records["meta/step_count"] = np.float64(optimizer.step_count)
    if extra:
        records.update(extra)
    write_records(path, records)


def load_checkpoint(path: str) -> LoadedCheckpoint:
    records = read_records(path)
    spec = _spec_from_records(records)
    net = nw.build_network(spec, seed=0)
    velocities: List[np.ndarray] = []
    for name, tensor in net.named_parameters():
        key = f"param/{name}"
        if key not in records:
            raise CheckpointError(f"checkpoint is missing record {key!r}")
        stored = records[key]
        if stored.shape != tensor.data.shape:
            raise CheckpointError(
                f"record {key!r} has shape {stored.shape}, expected {tensor.data.shape}"
            )
        # keep the stored dtype: resume must be bit-exact
        tensor.data = stored
        vel_key = f"velocity/{name}"
        if vel_key not in records:
            raise CheckpointError(f"checkpoint is missing record {vel_key!r}")
        velocities.append(records[vel_key])
    for key in ("state/C", "state/lambda_prime", "state/gamma", "meta/epoch"):
        if key not in records:
            raise CheckpointError(f"checkpoint is missing record {key!r}")
    state = ls.ComplexityState(
        C=float(records["state/C"]),
        lambda_prime=float(records["state/lambda_prime"]),
        gamma=float(records["state/gamma"]),
        epoch_ce_sum=float(records.get("state/epoch_ce_sum", 0.0)),
        epoch_ce_count=int(float(records.get("state/epoch_ce_count", 0.0))),
        adaptive=bool(float(records.get("state/adaptive", 1.0))),
    )
    optimizer = OptimizerState(
        velocities=velocities, step_count=int(float(records.get("meta/step_count", 0.0)))
    )
    consumed = {"param/", "velocity/", "state/", "meta/", "arch/"}
    extra = {
        name: array
        for name, array in records.items()
        if not any(name.startswith(prefix) for prefix in consumed)
    }
    return LoadedCheckpoint(
        net=net, optimizer=optimizer, state=state, epoch=int(float(records["meta/epoch"])), extra=extra
    )
