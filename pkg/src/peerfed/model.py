"""Self-contained per-pixel MLP classifier trained with Adam.

Weights live in a single flat float64 vector so that federation-side
averaging is a plain convex combination. All operations here are pure
functions of their arguments: same inputs, bitwise-same outputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# One image per optimizer step: small shards then still get a useful
# number of steps per pass, which the halving learning-rate schedule
# would otherwise starve.
DEFAULT_BATCH_SIZE = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a fully-connected per-pixel classifier."""

    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    num_classes: int = 4
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if any(d < 1 for d in self.hidden_dims):
            raise ValueError(f"hidden dims must all be >= 1, got {self.hidden_dims}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def param_count(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_dims())

    def fingerprint(self) -> str:
        text = (
            f"mlp;in={self.input_dim};hidden={','.join(map(str, self.hidden_dims))};"
            f"classes={self.num_classes};act={self.activation}"
        )
        return hashlib.sha256(text.encode("ascii")).hexdigest()[:16]


@dataclass
class ModelWeights:
    """Flat parameter vector bound to the hash of the spec that shaped it."""

    spec_fingerprint: str
    params: np.ndarray

    def __post_init__(self) -> None:
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.ndim != 1:
            raise ValueError(f"params must be a flat vector, got shape {self.params.shape}")

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.spec_fingerprint, self.params.copy())


@dataclass
class OptimizerState:
    """Adam moment estimates plus the number of steps applied so far."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @staticmethod
    def zeros(n_params: int) -> "OptimizerState":
        return OptimizerState(
            first_moment=np.zeros(n_params, dtype=np.float64),
            second_moment=np.zeros(n_params, dtype=np.float64),
            step_count=0,
        )


@dataclass
class Batch:
    """One mini-batch of pixels with integer class labels."""

    pixels: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 2:
            raise ValueError(f"pixels must be 2-D, got shape {self.pixels.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.pixels.shape[0]:
            raise ValueError(
                f"labels length {self.labels.shape} does not match pixels rows {self.pixels.shape[0]}"
            )


def _check_spec_match(spec: ModelSpec, weights: ModelWeights) -> None:
    if weights.spec_fingerprint != spec.fingerprint():
        raise ValueError(
            f"weights fingerprint {weights.spec_fingerprint} does not match spec "
            f"fingerprint {spec.fingerprint()}"
        )
    if weights.params.shape[0] != spec.param_count():
        raise ValueError(
            f"params length {weights.params.shape[0]} does not match spec "
            f"parameter count {spec.param_count()}"
        )


def unflatten(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split the flat vector into per-layer (W, b) views, W row-major (fan_in, fan_out)."""
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_dims():
        w = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    if offset != params.shape[0]:
        raise ValueError(f"params length {params.shape[0]} does not match spec layout {offset}")
    return layers


def init_model(spec: ModelSpec, seed: int) -> ModelWeights:
    """Glorot-uniform weight init (biases zero), deterministic in (spec, seed)."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in spec.layer_dims():
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out, dtype=np.float64))
    return ModelWeights(spec.fingerprint(), np.concatenate(chunks))


def forward(spec: ModelSpec, weights: ModelWeights, pixels: np.ndarray) -> np.ndarray:
    """Logits for each pixel row; shape (n_pixels, num_classes)."""
    _check_spec_match(spec, weights)
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(
            f"pixels must have shape (n, {spec.input_dim}), got {x.shape}"
        )
    layers = unflatten(spec, weights.params)
    for w, b in layers[:-1]:
        x = np.maximum(x @ w + b, 0.0)
    w, b = layers[-1]
    return x @ w + b


def predict(spec: ModelSpec, weights: ModelWeights, pixels: np.ndarray) -> np.ndarray:
    """Argmax class per pixel (ties resolved to the lowest class index)."""
    return np.argmax(forward(spec, weights, pixels), axis=1)


def loss_and_grad(spec: ModelSpec, weights: ModelWeights, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient (flat, params-aligned)."""
    _check_spec_match(spec, weights)
    if batch.pixels.shape[0] == 0:
        raise ValueError("batch is empty")
    if batch.pixels.shape[1] != spec.input_dim:
        raise ValueError(
            f"batch pixels must have {spec.input_dim} features, got {batch.pixels.shape[1]}"
        )
    if np.any(batch.labels < 0) or np.any(batch.labels >= spec.num_classes):
        raise ValueError("labels out of range for spec num_classes")

    layers = unflatten(spec, weights.params)
    n = batch.pixels.shape[0]

    activations = [batch.pixels]
    pre_acts = []
    x = batch.pixels
    for w, b in layers[:-1]:
        z = x @ w + b
        pre_acts.append(z)
        x = np.maximum(z, 0.0)
        activations.append(x)
    w, b = layers[-1]
    logits = x @ w + b

    shift = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shift).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shift[rows, batch.labels]))

    probs = np.exp(shift)
    probs /= probs.sum(axis=1, keepdims=True)
    delta = probs
    delta[rows, batch.labels] -= 1.0
    delta /= n

    grad_chunks: list[np.ndarray] = []
    for i in range(len(layers) - 1, -1, -1):
        w_i, _ = layers[i]
        grad_w = activations[i].T @ delta
        grad_b = delta.sum(axis=0)
        grad_chunks.append(grad_b)
        grad_chunks.append(grad_w.ravel())
        if i > 0:
            delta = (delta @ w_i.T) * (pre_acts[i - 1] > 0.0)
    grad = np.concatenate(grad_chunks[::-1])

    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise ValueError("non-finite loss or gradient")
    return loss, grad


def adam_step(
    weights: ModelWeights,
    grad: np.ndarray,
    state: OptimizerState,
    lr: float,
) -> tuple[ModelWeights, OptimizerState]:
    """One bias-corrected Adam update; returns new weights and state."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != weights.params.shape:
        raise ValueError(f"grad shape {grad.shape} does not match params {weights.params.shape}")
    if lr <= 0.0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient")

    step = state.step_count + 1
    m = ADAM_BETA1 * state.first_moment + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * state.second_moment + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1**step)
    v_hat = v / (1.0 - ADAM_BETA2**step)
    new_params = weights.params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    if not np.all(np.isfinite(new_params)):
        raise ValueError("non-finite weights after update")
    return (
        ModelWeights(weights.spec_fingerprint, new_params),
        OptimizerState(m, v, step),
    )


def fine_tune(
    spec: ModelSpec,
    weights: ModelWeights,
    shard,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> tuple[ModelWeights, OptimizerState]:
    """Train for full passes over a shard in seeded-shuffled image mini-batches.

    Optimizer state starts fresh each call: merged-in weights would make
    stale moments meaningless. One adam step per mini-batch; a trailing
    partial batch still counts as a step.
    """
    _check_spec_match(spec, weights)
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    images = shard.images
    if len(images) == 0:
        raise ValueError("shard is empty")

    rng = np.random.default_rng(seed)
    w = weights
    state = OptimizerState.zeros(spec.param_count())
    for _ in range(epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(images), batch_size):
            chosen = order[start : start + batch_size]
            batch = Batch(
                pixels=np.concatenate([images[i].features for i in chosen], axis=0),
                labels=np.concatenate([images[i].labels for i in chosen], axis=0),
            )
            _, grad = loss_and_grad(spec, w, batch)
            w, state = adam_step(w, grad, state, lr)
    return w, state


def lr_schedule(update_round: int, base_lr: float) -> float:
    """Learning rate for a client's own update round: halved every 4 rounds."""
    if update_round < 0:
        raise ValueError(f"update_round must be >= 0, got {update_round}")
    if base_lr <= 0.0:
        raise ValueError(f"base_lr must be > 0, got {base_lr}")
    return base_lr * 0.5 ** (update_round // 4)


def dice_score(
    pred: np.ndarray,
    truth: np.ndarray,
    num_classes: int,
) -> tuple[np.ndarray, float]:
    """Per-class Dice overlap and its mean over classes present in pred or truth.

    Classes absent from both maps get NaN and are excluded from the mean,
    so small images missing a class are not penalized.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    pred = pred.ravel()
    truth = truth.ravel()
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} labels out of range [0, {num_classes})")

    per_class = np.full(num_classes, np.nan, dtype=np.float64)
    for c in range(num_classes):
        p = pred == c
        t = truth == c
        denom = int(p.sum()) + int(t.sum())
        if denom == 0:
            continue
        per_class[c] = 2.0 * int(np.sum(p & t)) / denom
    present = ~np.isnan(per_class)
    mean = float(per_class[present].mean()) if present.any() else float("nan")
    return per_class, mean
