"""Reference classifiers (linear, 2-layer MLP, 4-layer CNN) with hand-written
backprop, plus the probability/gradient primitives everything else builds on.

All math runs in float64 on plain numpy arrays.  A batch of inputs has shape
``(n,) + input_shape`` with values in [0, 1]; logits and probability matrices
are ``(n, n_classes)``.  Reductions use a fixed order, so results are
run-to-run deterministic for a given seed.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ConfigError, NumericError

# Floor applied to the right-hand side of every KL log; prevents log(0)
# without measurable bias at desk scale.
PROB_FLOOR = 1e-12

# Loss selectors for input gradients and iterative attacks.
CE_LABELS = "ce_labels"
KL_FIXED_TARGET = "kl_fixed_target"
KL_STUDENT_TEACHER = "kl_student_teacher"
LOSS_SELECTORS = (CE_LABELS, KL_FIXED_TARGET, KL_STUDENT_TEACHER)

ROLES = ("teacher", "student", "surrogate")
ARCH_NAMES = ("linear", "mlp", "cnn")


# ---------------------------------------------------------------------------
# architectures


@dataclass(frozen=True)
class ArchSpec:
    """Architecture identity: enough to rebuild a model from a checkpoint.

    ``linear``  flatten -> dense(C)
    ``mlp``     flatten -> dense(hidden) -> relu -> dense(C)
    ``cnn``     conv3x3(c1) -> relu -> avgpool2 -> conv3x3(c2) -> relu
                -> avgpool2 -> flatten -> dense(hidden) -> relu -> dense(C)
    """

    name: str
    input_shape: tuple
    n_classes: int
    hidden: int = 64
    channels: tuple = (8, 16)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.name not in ARCH_NAMES:
            raise ConfigError(f"unknown architecture {self.name!r} (expected one of {ARCH_NAMES})")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if self.hidden < 1:
            raise ConfigError("hidden width must be positive")
        if not self.input_shape or any(d < 1 for d in self.input_shape):
            raise ConfigError(f"bad input shape {self.input_shape}")
        if self.name == "cnn":
            if len(self.input_shape) != 3:
                raise ConfigError("cnn expects HxWxC inputs")
            h, w, _ = self.input_shape
            if h % 4 or w % 4:
                raise ConfigError("cnn needs height and width divisible by 4 (two 2x2 pools)")
            if len(self.channels) != 2 or any(c < 1 for c in self.channels):
                raise ConfigError(f"bad cnn channels {self.channels}")

    @property
    def arch_id(self) -> str:
        dims = "x".join(str(d) for d in self.input_shape)
        if self.name == "linear":
            return f"linear[{dims}->{self.n_classes}]"
        if self.name == "mlp":
            return f"mlp[{dims}->{self.n_classes},h{self.hidden}]"
        return (
            f"cnn[{dims}->{self.n_classes},c{self.channels[0]}-{self.channels[1]},h{self.hidden}]"
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "hidden": self.hidden,
            "channels": list(self.channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            n_classes=int(d["n_classes"]),
            hidden=int(d.get("hidden", 64)),
            channels=tuple(d.get("channels", (8, 16))),
        )


# ---------------------------------------------------------------------------
# layers

# Each layer exposes params (dict of arrays), forward(x) -> (y, cache) and
# backward(dy, cache, need_dx, need_dparams) -> (dx | None, grads dict).


class _Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.params = {
            "w": rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_in, n_out)),
            "b": np.zeros(n_out),
        }

    def forward(self, x):
        return x @ self.params["w"] + self.params["b"], x

    def backward(self, dy, x, need_dx, need_dparams):
        grads = {}
        if need_dparams:
            grads = {"w": x.T @ dy, "b": dy.sum(axis=0)}
        dx = dy @ self.params["w"].T if need_dx else None
        return dx, grads


class _ReLU:
    params: dict = {}

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0.0

    def backward(self, dy, mask, need_dx, need_dparams):
        return (dy * mask if need_dx else None), {}


class _Flatten:
    params: dict = {}

    def forward(self, x):
        return x.reshape(len(x), -1), x.shape

    def backward(self, dy, shape, need_dx, need_dparams):
        return (dy.reshape(shape) if need_dx else None), {}


class _Conv3x3:
    """3x3 same-padding convolution over NHWC batches, stride 1."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.params = {
            "w": rng.normal(0.0, math.sqrt(2.0 / (9 * c_in)), size=(3, 3, c_in, c_out)),
            "b": np.zeros(c_out),
        }

    def forward(self, x):
        n, h, w, _ = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        out = np.zeros((n, h, w, self.params["w"].shape[3]))
        for di in range(3):
            for dj in range(3):
                out += xp[:, di : di + h, dj : dj + w, :] @ self.params["w"][di, dj]
        out += self.params["b"]
        return out, xp

    def backward(self, dy, xp, need_dx, need_dparams):
        n, h, w, _ = dy.shape
        grads = {}
        if need_dparams:
            dw = np.empty_like(self.params["w"])
            for di in range(3):
                for dj in range(3):
                    patch = xp[:, di : di + h, dj : dj + w, :]
                    dw[di, dj] = np.tensordot(patch, dy, axes=([0, 1, 2], [0, 1, 2]))
            grads = {"w": dw, "b": dy.sum(axis=(0, 1, 2))}
        dx = None
        if need_dx:
            dxp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    dxp[:, di : di + h, dj : dj + w, :] += dy @ self.params["w"][di, dj].T
            dx = dxp[:, 1:-1, 1:-1, :]
        return dx, grads


class _AvgPool2:
    params: dict = {}

    def forward(self, x):
        n, h, w, c = x.shape
        return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4)), None

    def backward(self, dy, cache, need_dx, need_dparams):
        if not need_dx:
            return None, {}
        return np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2) / 4.0, {}


def _build_layers(spec: ArchSpec, rng: np.random.Generator) -> list:
    flat = int(np.prod(spec.input_shape))
    if spec.name == "linear":
        return [_Flatten(), _Dense(flat, spec.n_classes, rng)]
    if spec.name == "mlp":
        return [
            _Flatten(),
            _Dense(flat, spec.hidden, rng),
            _ReLU(),
            _Dense(spec.hidden, spec.n_classes, rng),
        ]
    h, w, c = spec.input_shape
    c1, c2 = spec.channels
    pooled = (h // 4) * (w // 4) * c2
    return [
        _Conv3x3(c, c1, rng),
        _ReLU(),
        _AvgPool2(),
        _Conv3x3(c1, c2, rng),
        _ReLU(),
        _AvgPool2(),
        _Flatten(),
        _Dense(pooled, spec.hidden, rng),
        _ReLU(),
        _Dense(spec.hidden, spec.n_classes, rng),
    ]


# ---------------------------------------------------------------------------
# model handle


class Model:
    """A classifier with explicit float64 parameters and manual backprop.

    The parameter store is a flat dict keyed ``"<layer index>.<name>"`` in a
    fixed order; gradients use the same keys.  A model is mutated only by the
    training loop that owns it; forward passes never change state.
    """

    def __init__(self, spec: ArchSpec, role: str = "student", init_seed: int = 0):
        if role not in ROLES:
            raise ConfigError(f"unknown model role {role!r}")
        self.spec = spec
        self.role = role
        self._layers = _build_layers(spec, np.random.default_rng(init_seed))

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    @property
    def input_shape(self) -> tuple:
        return self.spec.input_shape

    @property
    def params(self) -> dict:
        """Live references to the parameter arrays, fixed key order."""
        out = {}
        for i, layer in enumerate(self._layers):
            for name, arr in layer.params.items():
                out[f"{i}.{name}"] = arr
        return out

    def set_params(self, params: dict) -> None:
        own = self.params
        if set(params) != set(own):
            missing = sorted(set(own) - set(params)) + sorted(set(params) - set(own))
            raise CheckpointError(f"parameter keys do not match architecture: {missing}")
        for i, layer in enumerate(self._layers):
            for name in layer.params:
                new = np.asarray(params[f"{i}.{name}"], dtype=np.float64)
                if new.shape != layer.params[name].shape:
                    raise CheckpointError(
                        f"parameter {i}.{name}: shape {new.shape} does not match "
                        f"{layer.params[name].shape} for {self.spec.arch_id}"
                    )
                layer.params[name] = new.copy()

    def copy(self, role: str | None = None) -> "Model":
        clone = Model(self.spec, role or self.role, init_seed=0)
        clone.set_params(self.params)
        return clone

    def digest(self) -> str:
        """SHA-256 over the architecture id and every parameter array."""
        h = hashlib.sha256(self.spec.arch_id.encode())
        for key, arr in self.params.items():
            h.update(key.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def _check_inputs(self, inputs) -> np.ndarray:
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 1 + len(self.spec.input_shape) or x.shape[1:] != self.spec.input_shape:
            raise ValueError(
                f"input shape {x.shape} does not match {self.spec.arch_id} "
                f"(expected (n,) + {self.spec.input_shape})"
            )
        return x

    def forward_cache(self, inputs) -> tuple[np.ndarray, list]:
        x = self._check_inputs(inputs)
        caches = []
        for layer in self._layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        if not np.isfinite(x).all():
            bad = int(np.flatnonzero(~np.isfinite(x).all(axis=1))[0])
            raise NumericError(f"non-finite logits at example index {bad}")
        return x, caches

    def logits(self, inputs) -> np.ndarray:
        return self.forward_cache(inputs)[0]

    def backward(self, dlogits, caches, need_dx: bool = False, need_dparams: bool = True):
        """Backpropagate logits-gradients; returns (param grads | None, dx | None)."""
        dy = np.asarray(dlogits, dtype=np.float64)
        grads = {} if need_dparams else None
        for i in range(len(self._layers) - 1, -1, -1):
            want_dx = need_dx or i > 0
            dy, layer_grads = self._layers[i].backward(dy, caches[i], want_dx, need_dparams)
            if need_dparams:
                for name, g in layer_grads.items():
                    grads[f"{i}.{name}"] = g
        return grads, (dy if need_dx else None)


# ---------------------------------------------------------------------------
# probability / objective primitives


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of logits / temperature, stabilized by max-subtraction."""
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward_probs(model: Model, inputs, temperature: float = 1.0) -> np.ndarray:
    """Class probabilities of a model on a batch; rows sum to 1."""
    return softmax(model.logits(inputs), temperature)


def check_prob_rows(probs, atol: float = 1e-6) -> np.ndarray:
    """Validate an (n, C) probability matrix: entries in [0,1], rows sum to 1."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"expected a 2-D probability matrix, got shape {p.shape}")
    if p.min() < -atol or p.max() > 1 + atol:
        raise ValueError("probabilities must lie in [0, 1]")
    if np.abs(p.sum(axis=1) - 1.0).max() > atol:
        raise ValueError("probability rows must sum to 1")
    return p


def predict_argmax(probs) -> np.ndarray:
    """Per-row index of the max probability; ties break to the lowest index."""
    p = check_prob_rows(probs)
    return np.argmax(p, axis=1)


def one_hot(labels, n_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(y), n_classes))
    out[np.arange(len(y)), y] = 1.0
    return out


def _log_floored(q: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(q, PROB_FLOOR))


def ce_objective(logits, labels) -> tuple[np.ndarray, np.ndarray]:
    """Cross-entropy vs. hard labels.

    Returns (per-example loss, d/dlogits of the summed loss).
    """
    p = softmax(logits)
    y = np.asarray(labels, dtype=np.int64)
    per_ex = -_log_floored(p[np.arange(len(y)), y])
    dlogits = p - one_hot(y, p.shape[1])
    return per_ex, dlogits


def kl_objective(logits, target_probs) -> tuple[np.ndarray, np.ndarray]:
    """KL(target || softmax(logits)) with the target held constant.

    The target-covering direction used throughout the distillation
    literature: its logits-gradient is softmax(logits) - target, which never
    vanishes for classes the model currently ignores.  Returns (per-example
    KL, d/dlogits of the summed KL).
    """
    s = softmax(logits)
    t = np.asarray(target_probs, dtype=np.float64)
    logs = _log_floored(s)
    logt = _log_floored(t)
    per_ex = np.where(t > 0, t * (logt - logs), 0.0).sum(axis=1)
    dlogits = s - t
    return per_ex, dlogits


def kl_pair_objective(primary_logits, reference_logits):
    """KL(softmax(reference) || softmax(primary)) with both sides live.

    The reference (teacher) plays the target role.  Returns (per-example KL,
    d/dprimary_logits, d/dreference_logits) for the summed KL; used when the
    perturbation input feeds both models.
    """
    s = softmax(primary_logits)
    t = softmax(reference_logits)
    logs = _log_floored(s)
    logt = _log_floored(t)
    per_ex = np.where(t > 0, t * (logt - logs), 0.0).sum(axis=1)
    d_primary = s - t
    d_reference = t * ((logt - logs) - per_ex[:, None])
    return per_ex, d_primary, d_reference


def softmax_vjp(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Pull a gradient on softmax outputs back to the logits."""
    return probs * (dprobs - (probs * dprobs).sum(axis=1, keepdims=True))


def input_gradient(model: Model, batch, loss: str, target_probs=None, reference: Model | None = None) -> np.ndarray:
    """Gradient of the batch-mean loss with respect to the inputs.

    ``loss`` selects the objective: CE_LABELS uses batch.labels,
    KL_FIXED_TARGET needs ``target_probs`` rows, KL_STUDENT_TEACHER evaluates
    ``reference`` at the same inputs and differentiates through both models.
    """
    if loss not in LOSS_SELECTORS:
        raise ConfigError(f"unknown loss selector {loss!r} (expected one of {LOSS_SELECTORS})")
    x = batch.inputs
    n = len(x)
    logits, caches = model.forward_cache(x)
    if loss == CE_LABELS:
        _, dlogits = ce_objective(logits, batch.labels)
        _, dx = model.backward(dlogits / n, caches, need_dx=True, need_dparams=False)
    elif loss == KL_FIXED_TARGET:
        if target_probs is None:
            raise ConfigError("loss kl_fixed_target requires target_probs")
        _, dlogits = kl_objective(logits, target_probs)
        _, dx = model.backward(dlogits / n, caches, need_dx=True, need_dparams=False)
    else:
        if reference is None:
            raise ConfigError("loss kl_student_teacher requires a reference model")
        ref_logits, ref_caches = reference.forward_cache(x)
        _, d_primary, d_reference = kl_pair_objective(logits, ref_logits)
        _, dx = model.backward(d_primary / n, caches, need_dx=True, need_dparams=False)
        _, dx_ref = reference.backward(d_reference / n, ref_caches, need_dx=True, need_dparams=False)
        dx = dx + dx_ref
    if not np.isfinite(dx).all():
        flat_bad = ~np.isfinite(dx.reshape(n, -1)).all(axis=1)
        raise NumericError(f"non-finite input gradient at example index {int(np.flatnonzero(flat_bad)[0])}")
    return dx
