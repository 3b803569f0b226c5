"""Minimal dense-network engine in float64 numpy.

Hand-derived backprop for stacks of fully-connected layers with relu or
linear activations, mean-squared-error and softmax cross-entropy losses,
an Adam optimizer with decoupled L2 shrinkage, a reduce-on-plateau learning
rate schedule, and the gradient-reversal pseudo-layer (identity forward,
gradient scaled by a negative constant backward). Every gradient path is
checkable against central finite differences.
"""

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Dense networks
# ---------------------------------------------------------------------------

@dataclass
class DenseNet:
    """Fully-connected stack. ``widths`` includes input and output sizes;
    ``activations`` has one tag per weight layer ("relu" or "linear")."""
    widths: tuple
    activations: tuple
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    @classmethod
    def create(cls, widths, rng: np.random.Generator, hidden_activation: str = "relu",
               output_activation: str = "linear") -> "DenseNet":
        """He-style uniform fan-in init for relu layers, LeCun-style for linear."""
        widths = tuple(int(w) for w in widths)
        n_layers = len(widths) - 1
        if n_layers < 1:
            raise ValueError("need at least one layer")
        activations = tuple([hidden_activation] * (n_layers - 1) + [output_activation])
        weights, biases = [], []
        for layer, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            gain = 6.0 if activations[layer] == "relu" else 3.0
            limit = np.sqrt(gain / fan_in)
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(widths=widths, activations=activations, weights=weights, biases=biases)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "DenseNet":
        return DenseNet(self.widths, self.activations,
                        [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray) -> list:
        """All layer activations, index 0 being the input batch."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ValueError(f"batch width {x.shape} incompatible with input width {self.widths[0]}")
        acts = [x]
        for w, b, tag in zip(self.weights, self.biases, self.activations):
            z = acts[-1] @ w + b
            acts.append(np.maximum(z, 0.0) if tag == "relu" else z)
        return acts

    def output(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[-1]

    def backward(self, acts: list, grad_out: np.ndarray):
        """Backprop ``grad_out`` (d loss / d output) through cached activations.

        Returns ``(grads, grad_in)`` where grads is a list of (dW, db) per
        layer and grad_in is the gradient with respect to the input batch.
        """
        if len(acts) != self.n_layers + 1:
            raise ValueError("activation cache does not match network depth")
        grads = [None] * self.n_layers
        g = np.asarray(grad_out, dtype=np.float64)
        for layer in range(self.n_layers - 1, -1, -1):
            out = acts[layer + 1]
            if self.activations[layer] == "relu":
                g = g * (out > 0.0)
            grads[layer] = (acts[layer].T @ g, g.sum(axis=0))
            g = g @ self.weights[layer].T
        return grads, g

    def param_blocks(self):
        """Named references to every parameter array, in a stable order."""
        for i in range(self.n_layers):
            yield f"w{i}", self.weights[i]
            yield f"b{i}", self.biases[i]

    def set_param(self, name: str, value: np.ndarray) -> None:
        kind, i = name[0], int(name[1:])
        target = self.weights if kind == "w" else self.biases
        target[i] = np.asarray(value, dtype=np.float64).reshape(target[i].shape)


def grad_reversal_backward(grad: np.ndarray, strength: float) -> np.ndarray:
    """Backward rule of the reversal pseudo-layer: forward is the identity,
    the gradient is flipped and scaled by ``strength``."""
    return -float(strength) * np.asarray(grad)


@dataclass(frozen=True)
class GradReversal:
    strength: float = 1.0

    def __post_init__(self):
        if self.strength < 0:
            raise ValueError("reversal strength must be >= 0")

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad_reversal_backward(grad, self.strength)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def mse(pred: np.ndarray, target: np.ndarray):
    """Mean over all entries; returns (loss, d loss / d pred)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("shape mismatch")
    diff = pred - target
    loss = float(np.mean(diff**2))
    return loss, 2.0 * diff / diff.size


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean natural-log cross entropy over the batch; returns (loss, dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("labels must be one id per row")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"label out of range [0, {c})")
    p = softmax(logits)
    loss = float(-np.mean(np.log(p[np.arange(n), labels])))
    grad = p
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam with decoupled L2 shrinkage applied at every step."""
    lr: float
    l2: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        """In-place update; ``params`` and ``grads`` map block name -> array."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in block {name!r}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.l2:
                update = update + self.l2 * p
            p -= self.lr * update


@dataclass
class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs
    without the validation loss improving by more than ``threshold``."""
    lr: float
    patience: int = 10
    factor: float = 0.5
    min_lr: float = 1e-5
    threshold: float = 1e-6
    best: float = np.inf
    bad_epochs: int = 0

    def __post_init__(self):
        if not (0.0 < self.factor < 1.0):
            raise ValueError("factor must lie in (0, 1)")

    def update(self, val_loss: float) -> float:
        """Record an epoch's validation loss; returns the lr to use next."""
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


# ---------------------------------------------------------------------------
# Finite differences (shared by tests and self-checks)
# ---------------------------------------------------------------------------

def finite_difference_grads(loss_fn, net: DenseNet, h: float = 1e-6) -> dict:
    """Central finite differences of ``loss_fn()`` w.r.t. every parameter of
    ``net``; the loss function must read the network's current parameters."""
    out = {}
    for name, p in net.param_blocks():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        out[name] = g
    return out
