"""Desk-scale federated training with per-device low-precision weights.

Each round broadcasts the global weights, runs H local mini-batch SGD steps on
every device (weights stochastically rounded to the device's bit-width after
each step), and averages the results at full precision with weights pi_i.
"""

import gzip
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from eefwq.errors import DimensionMismatchError, DivergenceError, InvalidInputError, PartitionError
from eefwq.models import FULL_PRECISION_BITS, DeviceProfile, NetworkConfig, comm_energy, comp_energy
from eefwq.quantizer import QuantScheme, make_scheme, quantize_vector
from eefwq.streams import device_substream, substream

TRACE_COLUMNS = ["round", "loss", "grad_norm_sq", "accuracy", "energy_j"]

_IDX_DTYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, index) -> "Dataset":
        return Dataset(x=self.x[index], y=self.y[index], n_classes=self.n_classes)


@dataclass(frozen=True)
class DataSpec:
    """Synthetic Gaussian mixture (kind="synthetic") or IDX files (kind="idx")."""
    kind: str = "synthetic"
    n_samples: int = 2000
    dim: int = 20
    n_classes: int = 10
    separation: float = 1.0
    images: Optional[str] = None
    labels: Optional[str] = None


@dataclass(frozen=True)
class SimConfig:
    n_devices: int = 4
    h_steps: int = 5
    rounds: int = 200
    batch: int = 32
    lr: float = 0.05
    q_per_device: tuple[int, ...] = (16, 16, 16, 16)
    seed: int = 0
    data: DataSpec = DataSpec()
    label_skew: int = 10
    model: str = "logistic"
    hidden: int = 32
    l2: float = 1e-4
    bypass_full_precision: bool = True
    test_fraction: float = 0.2
    divergence_factor: float = 1e3
    devices: Optional[tuple[DeviceProfile, ...]] = None
    net: Optional[NetworkConfig] = None
    b_ref: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        for name in ("n_devices", "h_steps", "batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"SimConfig.{name} must be >= 1")
        if self.rounds < 0:
            raise ValueError("SimConfig.rounds must be >= 0")
        if self.lr <= 0:
            raise ValueError("SimConfig.lr must be > 0")
        if len(self.q_per_device) != self.n_devices:
            raise ValueError(
                f"SimConfig.q_per_device has {len(self.q_per_device)} entries for {self.n_devices} devices")
        for q in self.q_per_device:
            make_scheme(q)
        if self.model not in ("logistic", "mlp"):
            raise ValueError(f"SimConfig.model must be 'logistic' or 'mlp', got {self.model!r}")
        if self.devices is not None and len(self.devices) != self.n_devices:
            raise ValueError("SimConfig.devices must have one profile per device")

    def scheme_for(self, device: int) -> Optional[QuantScheme]:
        """Quantization grid of a device, or None when training at full precision."""
        q = self.q_per_device[device]
        if q == FULL_PRECISION_BITS and self.bypass_full_precision:
            return None
        return make_scheme(q)


@dataclass
class TrainingTrace:
    """Per-round measurements of one run."""
    h_steps: int
    batch: int
    bits: list
    pi_weights: list[float]
    loss: list[float] = field(default_factory=list)
    grad_norm_sq: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    energy_j: list[float] = field(default_factory=list)
    final_weights: Optional[np.ndarray] = None

    @property
    def rounds(self) -> int:
        return len(self.loss)

    def floor(self, window: int = 20) -> float:
        """Mean squared gradient norm over the last window rounds."""
        if not self.grad_norm_sq:
            raise ValueError("Trace is empty")
        return float(np.mean(self.grad_norm_sq[-window:]))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "round": np.arange(1, self.rounds + 1, dtype=np.int64),
            "loss": self.loss,
            "grad_norm_sq": self.grad_norm_sq,
            "accuracy": self.accuracy,
            "energy_j": self.energy_j,
        }, columns=TRACE_COLUMNS)


# --- data ----------------------------------------------------------------------


def make_synthetic_dataset(n_samples: int = 2000, dim: int = 20, n_classes: int = 10, seed: int = 0,
                           separation: float = 1.0) -> Dataset:
    """Balanced Gaussian class-conditional mixture with unit noise."""
    if n_samples < n_classes or dim < 1 or n_classes < 2:
        raise ValueError("Need n_samples >= n_classes >= 2 and dim >= 1")
    rng = substream(seed, "data")
    means = rng.normal(0.0, separation, size=(n_classes, dim))
    y = rng.permutation(np.arange(n_samples) % n_classes)
    x = means[y] + rng.normal(size=(n_samples, dim))
    return Dataset(x=x, y=y.astype(np.int64), n_classes=n_classes)


def load_idx(path) -> np.ndarray:
    """
    Read an IDX file (optionally gzip-compressed).

    Raises:
        InvalidInputError: On a bad magic number or truncated payload.
    """
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] not in _IDX_DTYPES:
        raise InvalidInputError(f"{path}: not an IDX file")
    dtype = _IDX_DTYPES[data[2]]
    ndim = data[3]
    header = 4 + 4 * ndim
    dims = tuple(int(d) for d in np.frombuffer(data[4:header], dtype=">u4"))
    count = int(np.prod(dims)) if dims else 0
    if len(data) - header < count * dtype.itemsize:
        raise InvalidInputError(f"{path}: payload shorter than header dimensions {dims}")
    return np.frombuffer(data, dtype=dtype, count=count, offset=header).reshape(dims)


def load_idx_dataset(images, labels, n_classes: Optional[int] = None) -> Dataset:
    """Image/label IDX pair as a flattened dataset with pixels scaled to [0, 1]."""
    x = load_idx(images)
    y = load_idx(labels).astype(np.int64)
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatchError(f"{x.shape[0]} images but {y.shape[0]} labels")
    x = x.reshape(x.shape[0], -1).astype(np.float64)
    if x.size and x.max() > 1.0:
        x /= 255.0
    return Dataset(x=x, y=y, n_classes=n_classes or int(y.max()) + 1)


def load_dataset(spec: DataSpec, seed: int) -> Dataset:
    if spec.kind == "synthetic":
        return make_synthetic_dataset(spec.n_samples, spec.dim, spec.n_classes, seed, spec.separation)
    if spec.kind == "idx":
        if not spec.images or not spec.labels:
            raise ValueError("IDX data needs both 'images' and 'labels' paths")
        return load_idx_dataset(spec.images, spec.labels)
    raise ValueError(f"Unknown data kind {spec.kind!r}")


def train_test_split(dataset: Dataset, test_fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    if not 0 <= test_fraction < 1:
        raise ValueError(f"test_fraction must be in [0, 1), got {test_fraction}")
    order = rng.permutation(len(dataset))
    n_test = int(round(test_fraction * len(dataset)))
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))


def partition_data(dataset: Dataset, n: int, label_skew: int, seed: int) -> tuple[list[Dataset], list[float]]:
    """
    Split a dataset into n equal shards, each holding label_skew classes.

    Device i takes the label_skew classes following position i*label_skew in a
    seeded class order (wrapping around), and an equal number of samples from
    each of them.

    Returns:
        Tuple (shards, pi) with pi_i = |shard_i| / sum |shard_j|.

    Raises:
        PartitionError: If label_skew exceeds the class count or some class
            cannot supply one sample per requesting device.
    """
    if n < 1:
        raise PartitionError(f"Need at least one device, got {n}")
    if not 1 <= label_skew <= dataset.n_classes:
        raise PartitionError(f"label_skew {label_skew} must be in [1, {dataset.n_classes}]")
    rng = substream(seed, "partition")
    class_order = rng.permutation(dataset.n_classes)
    assigned = [[int(class_order[(i * label_skew + j) % dataset.n_classes]) for j in range(label_skew)]
                for i in range(n)]

    pools = {c: list(rng.permutation(np.nonzero(dataset.y == c)[0])) for c in range(dataset.n_classes)}
    demand = {c: sum(c in classes for classes in assigned) for c in pools}
    per_class = min(len(pools[c]) // demand[c] for c in pools if demand[c] > 0)
    per_class = min(per_class, len(dataset) // (n * label_skew))
    if per_class < 1:
        raise PartitionError(f"Dataset of {len(dataset)} samples is too small for {n} shards")

    shards = []
    for classes in assigned:
        index = []
        for c in classes:
            index.extend(pools[c][:per_class])
            del pools[c][:per_class]
        shards.append(dataset.subset(np.sort(np.asarray(index, dtype=np.int64))))
    total = sum(len(s) for s in shards)
    return shards, [len(s) / total for s in shards]


# --- models --------------------------------------------------------------------


class SoftmaxModel(ABC):
    """Flat parameter vector split into named tensors; cross-entropy loss with L2."""
    kind = "base"

    def __init__(self, dim: int, n_classes: int):
        self.dim = dim
        self.n_classes = n_classes
        self.slices: list[slice] = []
        self.shapes: list[tuple[int, ...]] = []
        offset = 0
        for shape in self.tensor_shapes():
            size = int(np.prod(shape))
            self.slices.append(slice(offset, offset + size))
            self.shapes.append(shape)
            offset += size
        self.size = offset

    @abstractmethod
    def tensor_shapes(self) -> list[tuple[int, ...]]:
        ...

    def init_weights(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(self.size)

    def unpack(self, w: np.ndarray) -> list[np.ndarray]:
        return [w[s].reshape(shape) for s, shape in zip(self.slices, self.shapes)]

    @abstractmethod
    def forward(self, w: np.ndarray, x: np.ndarray):
        ...

    @abstractmethod
    def backward(self, w: np.ndarray, x: np.ndarray, cache, dlogits: np.ndarray) -> np.ndarray:
        ...

    def loss_and_grad(self, w: np.ndarray, x: np.ndarray, y: np.ndarray, l2: float = 0.0) -> tuple[float, np.ndarray]:
        logits, cache = self.forward(w, x)
        logits = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(logits).sum(axis=1))
        n = len(y)
        loss = float(np.mean(log_norm - logits[np.arange(n), y])) + 0.5 * l2 * float(w @ w)
        probs = np.exp(logits - log_norm[:, None])
        probs[np.arange(n), y] -= 1.0
        grad = self.backward(w, x, cache, probs / n) + l2 * w
        return loss, grad

    def accuracy(self, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
        if len(y) == 0:
            return math.nan
        logits, _ = self.forward(w, x)
        return float(np.mean(np.argmax(logits, axis=1) == y))


class LogisticModel(SoftmaxModel):
    kind = "logistic"

    def tensor_shapes(self):
        return [(self.dim, self.n_classes), (self.n_classes,)]

    def forward(self, w, x):
        weight, bias = self.unpack(w)
        return x @ weight + bias, None

    def backward(self, w, x, cache, dlogits):
        return np.concatenate([(x.T @ dlogits).ravel(), dlogits.sum(axis=0)])


class MlpModel(SoftmaxModel):
    """One hidden tanh layer."""
    kind = "mlp"

    def __init__(self, dim: int, n_classes: int, hidden: int = 32):
        self.hidden = hidden
        super().__init__(dim, n_classes)

    def tensor_shapes(self):
        return [(self.dim, self.hidden), (self.hidden,), (self.hidden, self.n_classes), (self.n_classes,)]

    def init_weights(self, rng):
        w = np.zeros(self.size)
        w[self.slices[0]] = rng.normal(0.0, 1.0 / math.sqrt(self.dim), self.dim * self.hidden)
        w[self.slices[2]] = rng.normal(0.0, 1.0 / math.sqrt(self.hidden), self.hidden * self.n_classes)
        return w

    def forward(self, w, x):
        w1, b1, w2, b2 = self.unpack(w)
        hidden = np.tanh(x @ w1 + b1)
        return hidden @ w2 + b2, hidden

    def backward(self, w, x, hidden, dlogits):
        _, _, w2, _ = self.unpack(w)
        dhidden = (dlogits @ w2.T) * (1.0 - hidden ** 2)
        return np.concatenate([
            (x.T @ dhidden).ravel(), dhidden.sum(axis=0), (hidden.T @ dlogits).ravel(), dlogits.sum(axis=0),
        ])


def make_model(kind: str, dim: int, n_classes: int, hidden: int = 32) -> SoftmaxModel:
    if kind == "logistic":
        return LogisticModel(dim, n_classes)
    if kind == "mlp":
        return MlpModel(dim, n_classes, hidden)
    raise ValueError(f"Unknown model kind {kind!r}")


# --- training ------------------------------------------------------------------


def quantize_weights(w: np.ndarray, model: SoftmaxModel, scheme: QuantScheme, rng: np.random.Generator) -> np.ndarray:
    """Stochastic rounding of each tensor with its own infinity-norm scale."""
    out = np.empty_like(w)
    for s in model.slices:
        out[s] = quantize_vector(w[s], scheme, rng).values
    return out


def sample_batch(rng: np.random.Generator, n: int, batch: int) -> np.ndarray:
    return rng.choice(n, size=min(batch, n), replace=False)


def sgd_step(model: SoftmaxModel, w: np.ndarray, x: np.ndarray, y: np.ndarray, lr: float,
             l2: float = 0.0) -> tuple[np.ndarray, float]:
    loss, grad = model.loss_and_grad(w, x, y, l2)
    return w - lr * grad, loss


def local_round(model: SoftmaxModel, w: np.ndarray, shard: Dataset, h_steps: int, batch: int, lr: float,
                scheme: Optional[QuantScheme], batch_rng: np.random.Generator,
                quant_rng: Optional[np.random.Generator] = None, l2: float = 0.0,
                round_index: int = 0) -> np.ndarray:
    """
    Run h_steps of mini-batch SGD from w, quantizing after every step.

    scheme=None trains at full precision.

    Raises:
        DivergenceError: If a local loss becomes non-finite.
    """
    w = np.array(w, dtype=np.float64, copy=True)
    for _ in range(h_steps):
        index = sample_batch(batch_rng, len(shard), batch)
        w, loss = sgd_step(model, w, shard.x[index], shard.y[index], lr, l2)
        if not math.isfinite(loss) or not np.all(np.isfinite(w)):
            raise DivergenceError("Local training diverged (non-finite loss)", round_index)
        if scheme is not None:
            w = quantize_weights(w, model, scheme, quant_rng)
    return w


def aggregate(weights: Sequence, pi: Sequence[float]) -> np.ndarray:
    """
    Full-precision weighted average sum_i pi_i w_i, summed in device order.

    Raises:
        DimensionMismatchError: On differing shapes or a weight count mismatch.
    """
    if len(weights) != len(pi) or not weights:
        raise DimensionMismatchError(f"{len(weights)} weight vectors for {len(pi)} weights")
    arrays = [np.asarray(w, dtype=np.float64) for w in weights]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise DimensionMismatchError("Weight vectors differ in shape")
    if min(pi) < 0 or abs(sum(pi) - 1.0) > 1e-9:
        raise ValueError("Aggregation weights must be non-negative and sum to 1")
    result = np.zeros(shape)
    for p, a in zip(pi, arrays):
        result += p * a
    return result


def round_energy(config: SimConfig) -> float:
    """Modelled energy of one round for the configured devices, or 0 without profiles."""
    if config.devices is None or config.net is None:
        return 0.0
    b_ref = config.b_ref or tuple(config.net.b_max / config.n_devices for _ in config.devices)
    return float(sum(
        comm_energy(b, d.radio, config.net) + comp_energy(d.gpu, q, config.h_steps)
        for d, q, b in zip(config.devices, config.q_per_device, b_ref)
    ))


def run_fwq_fl(config: SimConfig, dataset: Optional[Dataset] = None) -> TrainingTrace:
    """
    Federated training with per-device weight quantization.

    Deterministic per seed: data, partition, initial weights, mini-batches and
    rounding draws each come from their own named sub-stream, so runs that
    differ only in bit-widths see the same mini-batches.

    Raises:
        DivergenceError: When the global loss exceeds divergence_factor times
            its initial value or becomes non-finite; carries the round index.
    """
    if dataset is None:
        dataset = load_dataset(config.data, config.seed)
    train, test = train_test_split(dataset, config.test_fraction, substream(config.seed, "split"))
    shards, pi = partition_data(train, config.n_devices, config.label_skew, config.seed)
    union = Dataset(x=np.concatenate([s.x for s in shards]), y=np.concatenate([s.y for s in shards]),
                    n_classes=train.n_classes)
    eval_set = test if len(test) else union

    model = make_model(config.model, union.x.shape[1], union.n_classes, config.hidden)
    w = model.init_weights(substream(config.seed, "init"))
    schemes = [config.scheme_for(i) for i in range(config.n_devices)]
    batch_rngs = [device_substream(config.seed, "batches", i) for i in range(config.n_devices)]
    quant_rngs = [device_substream(config.seed, "quantizer", i) for i in range(config.n_devices)]
    per_round_energy = round_energy(config)

    trace = TrainingTrace(h_steps=config.h_steps, batch=config.batch,
                          bits=[None if s is None else s.bits for s in schemes], pi_weights=list(pi))
    initial_loss, _ = model.loss_and_grad(w, union.x, union.y, config.l2)
    energy = 0.0
    for k in range(1, config.rounds + 1):
        local = [
            local_round(model, w, shard, config.h_steps, config.batch, config.lr, scheme, batch_rng, quant_rng,
                        config.l2, round_index=k)
            for shard, scheme, batch_rng, quant_rng in zip(shards, schemes, batch_rngs, quant_rngs)
        ]
        w = aggregate(local, pi)
        loss, grad = model.loss_and_grad(w, union.x, union.y, config.l2)
        if not math.isfinite(loss) or loss > config.divergence_factor * max(initial_loss, 1e-12):
            raise DivergenceError(f"Training diverged at round {k} (loss {loss:.4g})", k)
        energy += per_round_energy
        trace.loss.append(loss)
        trace.grad_norm_sq.append(float(grad @ grad))
        trace.accuracy.append(model.accuracy(w, eval_set.x, eval_set.y))
        trace.energy_j.append(energy)

    trace.final_weights = w
    return trace
