"""A small dense-network stack in numpy with hand-written backprop."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numerics import SeededRng

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "sigmoid", "identity")


class TrainingError(RuntimeError):
    pass


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return sigmoid(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray, da: np.ndarray) -> np.ndarray:
    if name == "relu":
        return da * (z > 0)
    if name == "sigmoid":
        return da * a * (1.0 - a)
    return da


@dataclass(eq=False)
class Dense:
    W: np.ndarray  # (in, out)
    b: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class DenseStack:
    def __init__(self, layers: list[Dense]):
        for prev, nxt in zip(layers, layers[1:]):
            if prev.W.shape[1] != nxt.W.shape[0]:
                raise ValueError("layer dimensions do not chain")
        self.layers = layers

    @classmethod
    def init(cls, sizes: list[int], activations: list[str], seed: int = 0, stream: int = 0) -> "DenseStack":
        """He-initialised stack; ``sizes`` lists every width from input to output."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        gen = SeededRng(seed, stream).generator()
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            W = gen.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            layers.append(Dense(W, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[1]

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in (layer.W, layer.b)]

    def copy(self) -> "DenseStack":
        return DenseStack([Dense(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"input has {x.shape[-1]} features, model expects {self.input_dim}")
        return x

    def __call__(self, x) -> np.ndarray:
        a = self._check(x)
        for layer in self.layers:
            a = _act(layer.activation, a @ layer.W + layer.b)
        return a

    def forward_cache(self, x):
        a = self._check(x)
        cache = []
        for layer in self.layers:
            z = a @ layer.W + layer.b
            out = _act(layer.activation, z)
            cache.append((a, z, out))
            a = out
        return a, cache

    def backward(self, cache, dout: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients (same order as ``params``) and the input gradient."""
        grads: list[np.ndarray] = []
        d = dout
        for layer, (a_in, z, a_out) in zip(reversed(self.layers), reversed(cache)):
            dz = _act_grad(layer.activation, z, a_out, d)
            grads.append(dz.sum(axis=0))
            grads.append(a_in.T @ dz)
            d = dz @ layer.W.T
        grads.reverse()
        return grads, d


def encoder(input_dim: int, n_out: int, hidden: int = 64, seed: int = 0, stream: int = 0) -> DenseStack:
    """flatten -> dense(hidden, relu) -> dense(n_out)."""
    return DenseStack.init([input_dim, hidden, n_out], ["relu", "identity"], seed, stream)


def forward(model: DenseStack, image) -> np.ndarray:
    """Logits of one image (sample or array), or of a batch of images."""
    x = np.asarray(getattr(image, "grids", image), dtype=np.float64)
    if x.size == model.input_dim:
        return model(x.reshape(1, -1))[0]
    return model(x.reshape(x.shape[0], -1))


def truth_logit(model: DenseStack, image, label: int) -> float:
    if not 0 <= label < model.output_dim:
        raise ValueError(f"label {label} outside 0..{model.output_dim - 1}")
    x = np.asarray(getattr(image, "grids", image), dtype=np.float64).reshape(1, -1)
    return float(model(x)[0, label])


def logit_scorer(model: DenseStack, label: int):
    """Batched scorer: the pre-softmax logit of ``label`` for each image."""
    if not 0 <= label < model.output_dim:
        raise ValueError(f"label {label} outside 0..{model.output_dim - 1}")

    def score(images: np.ndarray) -> np.ndarray:
        return model(images.reshape(images.shape[0], -1))[:, label]

    score.concurrent_safe = True
    return score


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if n == 0:
        raise ValueError("empty batch")
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must be {n} integers in 0..{c - 1}")
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def loss_and_grad(model: DenseStack, batch, labels) -> tuple[float, list[np.ndarray]]:
    logits, cache = model.forward_cache(np.asarray(batch, dtype=np.float64).reshape(len(labels), -1))
    loss, dlogits = softmax_ce(logits, labels)
    grads, _ = model.backward(cache, dlogits)
    return loss, grads


def grad_check_params(params: list[np.ndarray], loss_fn, grads: list[np.ndarray], eps: float = 1e-5,
                      fraction: float = 0.05, seed: int = 0) -> float:
    """Max relative error between analytic ``grads`` and central differences of
    ``loss_fn()`` over a random ``fraction`` of the entries of ``params``
    (which are perturbed in place and restored)."""
    gen = SeededRng(seed, 9001).generator()
    worst = 0.0
    for p, g in zip(params, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        k = max(1, int(round(fraction * flat.size)))
        for idx in gen.choice(flat.size, size=k, replace=False):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss_fn()
            flat[idx] = orig - eps
            down = loss_fn()
            flat[idx] = orig
            fd = (up - down) / (2 * eps)
            err = abs(gflat[idx] - fd) / max(1e-8, abs(gflat[idx]) + abs(fd))
            worst = max(worst, err)
    return worst


def jitter_biases(stacks, scale: float = 0.1, seed: int = 0) -> None:
    """Add small random biases in place.  Freshly initialised stacks have zero
    biases, which puts ReLUs fed an all-zero input exactly on their kink,
    where central differences are meaningless."""
    gen = SeededRng(seed, 9002).generator()
    for stack in stacks:
        for layer in stack.layers:
            layer.b += scale * gen.standard_normal(layer.b.shape)


def grad_check(model: DenseStack, batch, labels, eps: float = 1e-5, fraction: float = 0.05, seed: int = 0) -> float:
    _, grads = loss_and_grad(model, batch, labels)
    return grad_check_params(model.params, lambda: loss_and_grad(model, batch, labels)[0], grads,
                             eps, fraction, seed)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"  # "adam" | "sgd"
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("training hyperparameters must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.wd:
                g = g + self.wd * p
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params, lr=1e-2, weight_decay=0.0):
        self.params, self.lr, self.wd = params, lr, weight_decay

    def step(self, grads) -> None:
        for p, g in zip(self.params, grads):
            p -= self.lr * (g + self.wd * p)


def make_optimizer(params, config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(params, config.learning_rate, weight_decay=config.weight_decay)
    return SGD(params, config.learning_rate, config.weight_decay)


def minibatches(n: int, config: TrainConfig, epoch: int):
    order = SeededRng(config.seed, 5001).generator(epoch).permutation(n)
    for lo in range(0, n, config.batch_size):
        yield order[lo:lo + config.batch_size]


def accuracy(model: DenseStack, X, y) -> float:
    return float(np.mean(np.argmax(model(X), axis=1) == np.asarray(y)))


def train(model: DenseStack, X, y, config: TrainConfig) -> tuple[DenseStack, list[dict]]:
    """Minibatch training on softmax cross-entropy; returns a trained copy."""
    config.validate()
    X = np.asarray(X, dtype=np.float64).reshape(len(y), -1)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty dataset")
    model = model.copy()
    opt = make_optimizer(model.params, config)
    history = []
    for epoch in range(config.epochs):
        total = 0.0
        for idx in minibatches(len(y), config, epoch):
            loss, grads = loss_and_grad(model, X[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            opt.step(grads)
            total += loss * len(idx)
        history.append({"epoch": epoch, "loss": total / len(y), "acc": accuracy(model, X, y)})
    return model, history


# --- checkpoints --------------------------------------------------------------------

def _stack_manifest(model: DenseStack) -> list[dict]:
    return [{"in": l.W.shape[0], "out": l.W.shape[1], "activation": l.activation} for l in model.layers]


def _stack_from(manifest: list[dict], flat: np.ndarray, offset: int = 0) -> tuple[DenseStack, int]:
    layers = []
    for spec in manifest:
        n_w = spec["in"] * spec["out"]
        W = flat[offset:offset + n_w].reshape(spec["in"], spec["out"]).copy()
        offset += n_w
        b = flat[offset:offset + spec["out"]].copy()
        offset += spec["out"]
        layers.append(Dense(W, b, spec["activation"]))
    return DenseStack(layers), offset


def flatten_params(params) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params]) if params else np.zeros(0)


def save_networks(nets: dict[str, DenseStack], path, fmt: str = "npz", kind: str = "dense") -> Path:
    """Write named stacks as one ``.npz`` or as ``<path>.csv`` + ``<path>.json``."""
    path = Path(path)
    manifest = {"version": CHECKPOINT_VERSION, "kind": kind, "order": list(nets),
                "networks": {name: _stack_manifest(n) for name, n in nets.items()}}
    flat = flatten_params([p for n in nets.values() for p in n.params])
    if fmt == "npz":
        path = path.with_suffix(".npz")
        np.savez(path, manifest=np.array(json.dumps(manifest, sort_keys=True)), params=flat)
    elif fmt == "csv":
        path = path.with_suffix(".csv")
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("index", "value"))
            for i, v in enumerate(flat):
                w.writerow((i, repr(float(v))))
    else:
        raise ValueError(f"unknown checkpoint format {fmt!r}")
    return path


def load_networks(path) -> tuple[dict[str, DenseStack], dict]:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as data:
            manifest = json.loads(str(data["manifest"]))
            flat = data["params"].copy()
    elif path.suffix == ".csv":
        manifest = json.loads(path.with_suffix(".json").read_text())
        with open(path, newline="") as fh:
            flat = np.array([float(r["value"]) for r in csv.DictReader(fh)])
    else:
        raise ValueError(f"unrecognised checkpoint {path}")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    nets, offset = {}, 0
    for name in manifest["order"]:
        nets[name], offset = _stack_from(manifest["networks"][name], flat, offset)
    if offset != flat.size:
        raise ValueError("checkpoint parameter count does not match its manifest")
    return nets, manifest


def save_model(model: DenseStack, path, fmt: str = "npz") -> Path:
    return save_networks({"model": model}, path, fmt)


def load_model(path) -> DenseStack:
    nets, _ = load_networks(path)
    return nets["model"]


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
