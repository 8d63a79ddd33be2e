"""Dense networks with hand-written gradients, Adam/AdamW, and JSON checkpoints.

Everything here is plain numpy in float64. Gradients are computed by explicit
reverse-mode passes (no autograd), which keeps the arithmetic auditable and
lets finite-difference oracles check every trainable module in the package.

Randomness: all seeded streams use numpy's PCG64 generator (a counter-based
generator whose output stream is pinned by the numpy random API and identical
across platforms for a given seed). Child streams are derived through
``SeedSequence`` so per-record / per-run seeds never collide.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import GradientError, ShapeError, ValidationError

ACTIVATIONS = ("relu", "tanh", "identity")

CHECKPOINT_FORMAT_VERSION = 1


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 stream. Same seed gives the same stream everywhere."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def spawn_rng(seed: int, *keys: int) -> np.random.Generator:
    """Derived stream for (seed, key...) so sub-tasks get independent noise."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *keys])))


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    # relu derivative at exactly 0 is taken as 0
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


@dataclass
class DenseLayer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.ndim != 1 or self.w.shape[0] != self.b.shape[0]:
            raise ShapeError(
                f"layer wants w (out,in) and b (out,), got {self.w.shape} and {self.b.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.b))):
            raise ValidationError("layer parameters must be finite")


class DenseNet:
    """A fixed stack of affine layers with {relu, tanh, identity} activations.

    Accepts single vectors ``(in,)`` or batches ``(n, in)``; output shape
    mirrors the input. ``backward`` returns the exact reverse-mode gradient of
    the forward map (summed over the batch for parameters).
    """

    def __init__(self, layers: list[DenseLayer]):
        if not layers:
            raise ValidationError("a DenseNet needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.w.shape[1] != prev.w.shape[0]:
                raise ShapeError(
                    f"layer dims do not chain: {prev.w.shape[0]} -> {nxt.w.shape[1]}"
                )
        self.layers = layers

    @classmethod
    def create(
        cls,
        dims: list[int],
        activations: list[str] | str,
        rng: np.random.Generator,
    ) -> "DenseNet":
        """Seeded init: weights uniform in ±1/sqrt(fan_in), biases zero.

        ``dims`` is [in, hidden..., out]; ``activations`` is one name per
        layer, or a single name meaning "that for every hidden layer and
        identity for the last".
        """
        n_layers = len(dims) - 1
        if n_layers < 1:
            raise ValidationError("dims must list at least input and output size")
        if isinstance(activations, str):
            activations = [activations] * (n_layers - 1) + ["identity"]
        if len(activations) != n_layers:
            raise ValidationError(
                f"need {n_layers} activations, got {len(activations)}"
            )
        layers = []
        for i in range(n_layers):
            fan_in = dims[i]
            w = rng.uniform(-1.0, 1.0, size=(dims[i + 1], fan_in)) / np.sqrt(fan_in)
            layers.append(DenseLayer(w, np.zeros(dims[i + 1]), activations[i]))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].w.shape[0]

    @property
    def param_count(self) -> int:
        return sum(l.w.size + l.b.size for l in self.layers)

    def parameters(self) -> list[np.ndarray]:
        """Flat list of parameter arrays (views; in-place updates stick)."""
        out = []
        for l in self.layers:
            out.append(l.w)
            out.append(l.b)
        return out

    def parameter_names(self, prefix: str = "") -> list[str]:
        names = []
        for i in range(len(self.layers)):
            names.append(f"{prefix}w{i}")
            names.append(f"{prefix}b{i}")
        return names

    def copy(self) -> "DenseNet":
        return DenseNet(
            [DenseLayer(l.w.copy(), l.b.copy(), l.activation) for l in self.layers]
        )

    def _check_input(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"input has shape {np.asarray(x).shape}, net expects (*, {self.in_dim})"
            )
        return x, single

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping per-layer inputs and pre-activations."""
        a, single = self._check_input(x)
        inputs, preacts = [], []
        for l in self.layers:
            inputs.append(a)
            z = a @ l.w.T + l.b
            preacts.append(z)
            a = _act(l.activation, z)
        cache = (inputs, preacts, single)
        return (a[0] if single else a), cache

    def backward_cached(self, cache, upstream: np.ndarray):
        """Gradients from a cached forward.

        Returns ``(grads, input_grad)`` where grads is a flat list matching
        ``parameters()`` order. Parameter gradients are summed over the batch.
        """
        inputs, preacts, single = cache
        g = np.asarray(upstream, dtype=np.float64)
        if single:
            g = g[None, :]
        if g.shape != (inputs[0].shape[0], self.out_dim):
            raise ShapeError(
                f"upstream grad has shape {np.asarray(upstream).shape}, "
                f"expected (*, {self.out_dim})"
            )
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            l = self.layers[i]
            dz = g * _act_grad(l.activation, preacts[i])
            grads[2 * i] = dz.T @ inputs[i]
            grads[2 * i + 1] = dz.sum(axis=0)
            g = dz @ l.w
        return grads, (g[0] if single else g)

    def backward(self, x: np.ndarray, upstream: np.ndarray):
        """One-shot forward + reverse pass; see ``backward_cached``."""
        _, cache = self.forward_cached(x)
        return self.backward_cached(cache, upstream)


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def backward(net: DenseNet, x: np.ndarray, upstream_grad: np.ndarray):
    return net.backward(x, upstream_grad)


@dataclass
class Optimizer:
    """Adam / AdamW over a fixed list of parameter arrays.

    ``adam`` folds weight decay into the gradient (classic L2); ``adamw``
    applies it as a decoupled multiplicative decay. Moment buffers are lazily
    shaped on the first step and must shape-match thereafter.
    """

    kind: str = "adam"
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    eps: float = 1e-8
    step_count: int = 0
    _m: list[np.ndarray] = field(default_factory=list, repr=False)
    _v: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValidationError(f"unknown optimizer kind {self.kind!r}")
        if not (0.0 < self.learning_rate or self.learning_rate == 0.0):
            raise ValidationError("learning_rate must be >= 0")

    def step(
        self,
        params: list[np.ndarray],
        grads: list[np.ndarray],
        names: list[str] | None = None,
    ) -> None:
        """Apply one bias-corrected update in place. Rejects non-finite grads."""
        if names is None:
            names = [f"param[{i}]" for i in range(len(params))]
        if len(params) != len(grads):
            raise ShapeError(
                f"{len(params)} parameters but {len(grads)} gradients"
            )
        for p, g, name in zip(params, grads, names):
            if p.shape != np.asarray(g).shape:
                raise ShapeError(
                    f"gradient shape {np.asarray(g).shape} != parameter shape "
                    f"{p.shape} for {name}"
                )
            if not np.all(np.isfinite(g)):
                raise GradientError("non-finite gradient, update rejected", name)
        if not self._m:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        elif len(self._m) != len(params):
            raise ShapeError("parameter list changed size under the optimizer")

        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(params, grads, self._m, self._v):
            g = np.asarray(g, dtype=np.float64)
            if self.kind == "adam" and self.weight_decay != 0.0:
                g = g + self.weight_decay * p
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.kind == "adamw" and self.weight_decay != 0.0:
                p -= self.learning_rate * self.weight_decay * p
            p -= self.learning_rate * update


def step(opt: Optimizer, net: DenseNet, grads: list[np.ndarray]) -> DenseNet:
    """Spec-level convenience: one optimizer step on a net's parameters."""
    opt.step(net.parameters(), grads, net.parameter_names())
    return net


# --- checkpoint I/O -----------------------------------------------------
#
# Checkpoints are JSON documents: named arrays encoded as base64 of
# little-endian float32, plus a format_version and free-form meta. Values are
# quantized to float32 on save, so a load -> save round trip is byte-exact.


def _encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(a.astype("<f4").tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return a.reshape(d["shape"])


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "meta": meta or {},
        "arrays": {k: _encode_array(v) for k, v in sorted(arrays.items())},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValidationError(
            f"checkpoint format_version {version!r} not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    arrays = {k: _decode_array(v) for k, v in doc["arrays"].items()}
    return arrays, doc.get("meta", {})


def net_state(net: DenseNet, prefix: str = "") -> tuple[dict[str, np.ndarray], dict]:
    """(arrays, meta) pair describing a net, for embedding in a checkpoint."""
    arrays = {}
    for i, l in enumerate(net.layers):
        arrays[f"{prefix}w{i}"] = l.w
        arrays[f"{prefix}b{i}"] = l.b
    meta = {"activations": [l.activation for l in net.layers]}
    return arrays, meta


def net_from_state(arrays: dict[str, np.ndarray], meta: dict, prefix: str = "") -> DenseNet:
    activations = meta["activations"]
    layers = []
    for i, act in enumerate(activations):
        try:
            w = arrays[f"{prefix}w{i}"]
            b = arrays[f"{prefix}b{i}"]
        except KeyError as e:
            raise ValidationError(f"checkpoint missing array {e.args[0]!r}") from e
        layers.append(DenseLayer(w.copy(), b.copy(), act))
    return DenseNet(layers)
