"""Dense feed-forward networks with exact reverse-mode gradients.

Everything is 64-bit and deterministic given seeds. Parameters live in a
single flat vector laid out layer by layer (weights row-major, then bias),
with the last layer's index range tracked separately so posterior code can
treat final-layer parameters on their own.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .util import gaussian_log_pdf, log_softmax, sigmoid, softmax, softplus

VAR_FLOOR = 1e-6

ACTIVATIONS = {
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(np.float64)),
}


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture: layer widths (input width first), activation, output head."""
    layer_widths: tuple
    activation: str = "tanh"
    head: str = "classifier"     # "classifier" | "heteroscedastic"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ValueError("need at least input and output widths")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head == "classifier":
            if self.layer_widths[-1] < 2:
                raise ValueError("classifier needs at least 2 output classes")
        elif self.head == "heteroscedastic":
            if self.layer_widths[-1] != 2:
                raise ValueError("heteroscedastic head needs output width 2 (mean, raw variance)")
        else:
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def n_outputs(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_classes(self) -> int:
        if self.head != "classifier":
            raise ValueError("n_classes only defined for classifier head")
        return self.layer_widths[-1]

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activation": self.activation, "head": self.head}

    @classmethod
    def from_dict(cls, d) -> "NetworkSpec":
        return cls(tuple(d["layer_widths"]), d["activation"], d["head"])


def layer_shapes(spec: NetworkSpec):
    w = spec.layer_widths
    return [(w[i + 1], w[i]) for i in range(len(w) - 1)]


def param_count(spec: NetworkSpec) -> int:
    return sum(o * i + o for o, i in layer_shapes(spec))


def last_layer_partition(spec: NetworkSpec) -> tuple[int, int]:
    """(start, stop) of the final affine map's weights + bias in the flat vector."""
    total = param_count(spec)
    o, i = layer_shapes(spec)[-1]
    return total - (o * i + o), total


@dataclass
class ParamVector:
    """Flat parameter vector plus the last-layer index range."""
    values: np.ndarray
    partition: tuple[int, int]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        start, stop = self.partition
        if not (0 <= start < stop <= len(self.values)):
            raise ValueError(f"partition {self.partition} out of bounds for length {len(self.values)}")
        self.partition = (int(start), int(stop))

    @classmethod
    def for_spec(cls, values, spec: NetworkSpec) -> "ParamVector":
        values = np.asarray(values, dtype=np.float64)
        if len(values) != param_count(spec):
            raise ValueError(f"expected {param_count(spec)} parameters, got {len(values)}")
        return cls(values, last_layer_partition(spec))

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.partition)

    @property
    def last_layer(self) -> np.ndarray:
        return self.values[self.partition[0]:self.partition[1]]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_schedule: str = "cosine"      # "cosine" | "constant"
    early_stop_patience: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
            "momentum": self.momentum, "weight_decay": self.weight_decay,
            "lr_schedule": self.lr_schedule, "early_stop_patience": self.early_stop_patience,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return cls(**d)


@dataclass
class LossValue:
    nll: float
    grad: np.ndarray


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: ParamVector
    config: TrainConfig
    trace: list
    member_id: str = ""


def _unpack(spec: NetworkSpec, values: np.ndarray):
    """Views of (W, b) per layer into the flat vector (no copies)."""
    layers = []
    off = 0
    for o, i in layer_shapes(spec):
        w = values[off:off + o * i].reshape(o, i)
        off += o * i
        b = values[off:off + o]
        off += o
        layers.append((w, b))
    return layers


def init_params(spec: NetworkSpec, seed) -> ParamVector:
    """Scaled uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    values = np.empty(param_count(spec))
    off = 0
    for o, i in layer_shapes(spec):
        bound = 1.0 / np.sqrt(i)
        values[off:off + o * i] = rng.uniform(-bound, bound, size=o * i)
        off += o * i
        values[off:off + o] = rng.uniform(-bound, bound, size=o)
        off += o
    return ParamVector(values, last_layer_partition(spec))


def _check_inputs(spec: NetworkSpec, theta: ParamVector, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.layer_widths[0]:
        raise ValueError(f"expected inputs of shape (N, {spec.layer_widths[0]}), got {x.shape}")
    if len(theta.values) != param_count(spec):
        raise ValueError("parameter vector does not match spec")
    return x


def _forward_pass(spec: NetworkSpec, values: np.ndarray, x: np.ndarray):
    """Returns (output, pre-activations per layer, layer inputs per layer)."""
    act, _ = ACTIVATIONS[spec.activation]
    layers = _unpack(spec, values)
    inputs, preacts = [], []
    h = x
    for li, (w, b) in enumerate(layers):
        inputs.append(h)
        z = h @ w.T + b
        preacts.append(z)
        h = act(z) if li < len(layers) - 1 else z
    return h, preacts, inputs


def forward(spec: NetworkSpec, theta: ParamVector, x) -> np.ndarray:
    """Raw network outputs: logits for the classifier, (mean, raw variance)
    columns for the heteroscedastic head. Softmax / softplus happen downstream."""
    x = _check_inputs(spec, theta, x)
    out, _, _ = _forward_pass(spec, theta.values, x)
    return out


def forward_many(spec: NetworkSpec, thetas: np.ndarray, x) -> np.ndarray:
    """Raw outputs for a batch of parameter vectors at once, (S, N, out).

    Equivalent to stacking forward() over rows of `thetas`; one einsum per
    layer instead of a Python loop over samples.
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.layer_widths[0]:
        raise ValueError(f"expected inputs of shape (N, {spec.layer_widths[0]}), got {x.shape}")
    if thetas.ndim != 2 or thetas.shape[1] != param_count(spec):
        raise ValueError("parameter matrix does not match spec")
    act, _ = ACTIVATIONS[spec.activation]
    shapes = layer_shapes(spec)
    s = thetas.shape[0]
    h = np.broadcast_to(x, (s,) + x.shape)
    off = 0
    for li, (o, i) in enumerate(shapes):
        w = thetas[:, off:off + o * i].reshape(s, o, i)
        off += o * i
        b = thetas[:, off:off + o]
        off += o
        z = np.einsum("snd,sod->sno", h, w, optimize=True) + b[:, None, :]
        h = act(z) if li < len(shapes) - 1 else z
    return h


def last_layer_features(spec: NetworkSpec, theta: ParamVector, x) -> np.ndarray:
    """Activations entering the final affine layer (the inputs themselves for
    a single-layer network)."""
    x = _check_inputs(spec, theta, x)
    act, _ = ACTIVATIONS[spec.activation]
    layers = _unpack(spec, theta.values)
    h = x
    for w, b in layers[:-1]:
        h = act(h @ w.T + b)
    return h


def hetero_moments(raw_out: np.ndarray):
    """(mean, variance) from raw heteroscedastic outputs; softplus + floor."""
    mean = raw_out[:, 0]
    var = softplus(raw_out[:, 1]) + VAR_FLOOR
    return mean, var


def _class_output_grad(logits, y):
    n, c = logits.shape
    y = np.asarray(y)
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"class labels must lie in [0, {c})")
    ls = log_softmax(logits)
    nll = -ls[np.arange(n), y].mean()
    dout = np.exp(ls)
    dout[np.arange(n), y] -= 1.0
    return nll, dout / n


def _hetero_output_grad(raw_out, y):
    n = raw_out.shape[0]
    mean, var = hetero_moments(raw_out)
    err = y - mean
    nll = 0.5 * np.mean(np.log(2.0 * np.pi * var) + err ** 2 / var)
    dmean = -err / var
    draw = (0.5 / var - err ** 2 / (2.0 * var ** 2)) * sigmoid(raw_out[:, 1])
    return nll, np.column_stack([dmean, draw]) / n


def nll_and_grad(spec: NetworkSpec, theta: ParamVector, x, y, weight_decay: float = 0.0) -> LossValue:
    """Mean NLL over the batch plus (weight_decay/2)*||theta||^2 / N, with its
    exact reverse-mode gradient."""
    x = _check_inputs(spec, theta, x)
    n = x.shape[0]
    if n == 0:
        raise ValueError("batch must be nonempty")
    values = theta.values
    out, preacts, inputs = _forward_pass(spec, values, x)
    if spec.head == "classifier":
        nll, dout = _class_output_grad(out, y)
    else:
        nll, dout = _hetero_output_grad(out, np.asarray(y, dtype=np.float64))

    _, dact = ACTIVATIONS[spec.activation]
    layers = _unpack(spec, values)
    grad = np.empty_like(values)
    off = len(values)
    dz = dout
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        o, i = w.shape
        db = dz.sum(axis=0)
        dw = dz.T @ inputs[li]
        grad[off - o:off] = db
        grad[off - o - o * i:off - o] = dw.ravel()
        off -= o * i + o
        if li > 0:
            dz = (dz @ w) * dact(preacts[li - 1])

    loss = nll
    if weight_decay > 0.0:
        loss = loss + 0.5 * weight_decay * float(values @ values) / n
        grad += (weight_decay / n) * values
    return LossValue(float(loss), grad)


def log_likelihood(spec: NetworkSpec, theta: ParamVector, x, y) -> np.ndarray:
    """Per-point log p(y | x, theta), no prior term."""
    out = forward(spec, theta, x)
    if spec.head == "classifier":
        ls = log_softmax(out)
        return ls[np.arange(out.shape[0]), np.asarray(y)]
    mean, var = hetero_moments(out)
    return gaussian_log_pdf(np.asarray(y, dtype=np.float64), mean, var)


def point_elpd(spec: NetworkSpec, theta: ParamVector, x, y) -> float:
    return float(log_likelihood(spec, theta, x, y).mean())


def _epoch_lr(config: TrainConfig, epoch: int) -> float:
    if config.lr_schedule == "constant" or config.epochs <= 1:
        return config.lr
    return config.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / config.epochs))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def sgd_iterates(grad_fn, theta0: np.ndarray, lr: float, epochs: int, batches_for_epoch,
                 momentum: float = 0.0) -> np.ndarray:
    """Generic SGD loop recording the parameter vector after each epoch.

    grad_fn(theta, batch) -> gradient; batches_for_epoch(epoch) -> iterable of
    batches. Returns an (epochs, P) array.
    """
    theta = np.array(theta0, dtype=np.float64)
    vel = np.zeros_like(theta)
    out = np.empty((epochs, len(theta)))
    for e in range(epochs):
        for batch in batches_for_epoch(e):
            g = grad_fn(theta, batch)
            if momentum > 0.0:
                vel = momentum * vel + g
                theta = theta - lr * vel
            else:
                theta = theta - lr * g
        out[e] = theta
    return out


def train_map(spec: NetworkSpec, dataset: Dataset, config: TrainConfig) -> Checkpoint:
    """Mini-batch SGD with momentum on mean NLL + weight-decay penalty.

    With early stopping enabled, returns the epoch snapshot with the best
    validation ELPD of the point estimate; otherwise the final parameters.
    """
    rng = np.random.default_rng(config.seed)
    theta = init_params(spec, rng)
    x_train, y_train = dataset.split("train")
    x_val, y_val = dataset.split("val")
    n_total = len(x_train)
    vel = np.zeros_like(theta.values)
    trace = []
    best_val = -np.inf
    best_values = theta.values.copy()
    best_epoch = -1

    for epoch in range(config.epochs):
        lr = _epoch_lr(config, epoch)
        batch_losses = []
        for idx in _batches(n_total, config.batch_size, rng):
            # weight decay rescaled so each step penalizes ||theta||^2 / (2 N_total)
            wd_batch = config.weight_decay * len(idx) / n_total
            lv = nll_and_grad(spec, theta, x_train[idx], y_train[idx], wd_batch)
            if not np.isfinite(lv.nll):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} (lr={lr:g})")
            vel = config.momentum * vel + lv.grad
            theta.values -= lr * vel
            batch_losses.append(lv.nll)
        val_elpd = point_elpd(spec, theta, x_val, y_val)
        if not np.isfinite(val_elpd):
            raise TrainingDivergedError(f"non-finite validation ELPD at epoch {epoch} (lr={lr:g})")
        trace.append({"epoch": epoch, "train_nll": float(np.mean(batch_losses)),
                      "val_elpd": val_elpd, "lr": lr})
        if val_elpd > best_val:
            best_val = val_elpd
            best_values = theta.values.copy()
            best_epoch = epoch
        if config.early_stop_patience is not None and epoch - best_epoch >= config.early_stop_patience:
            break

    if config.early_stop_patience is not None and config.epochs > 0:
        final = ParamVector(best_values, theta.partition)
    else:
        final = theta
    return Checkpoint(spec=spec, params=final, config=config, trace=trace)


def constant_sgd_iterates(spec: NetworkSpec, dataset: Dataset, theta_start: ParamVector,
                          lr: float, epochs: int, *, weight_decay: float = 0.0,
                          batch_size: int = 64, seed: int = 0,
                          momentum: float = 0.0) -> np.ndarray:
    """Constant-learning-rate SGD from theta_start, one parameter snapshot per
    epoch. Returns an (epochs, P) array of iterates."""
    if epochs < 1:
        raise ValueError("need at least one epoch")
    x_train, y_train = dataset.split("train")
    n_total = len(x_train)
    rng = np.random.default_rng(seed)
    schedules = [_batches(n_total, batch_size, rng) for _ in range(epochs)]

    def grad_fn(values, idx):
        wd_batch = weight_decay * len(idx) / n_total
        lv = nll_and_grad(spec, ParamVector(values, theta_start.partition),
                          x_train[idx], y_train[idx], wd_batch)
        return lv.grad

    iterates = sgd_iterates(grad_fn, theta_start.values, lr, epochs,
                            lambda e: schedules[e], momentum=momentum)
    if not np.all(np.isfinite(iterates)):
        raise TrainingDivergedError(f"constant-lr SGD diverged at lr={lr:g}")
    return iterates
