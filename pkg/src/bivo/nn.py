"""Minimal neural toolkit: reverse-mode tensors, MLPs, Adam, samplers, KLs, checkpoints."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

LOG_VAR_MIN, LOG_VAR_MAX = -20.0, 5.0
ACTIVATIONS = ("relu", "tanh", "identity")


class Tensor:
    """numpy array with a reverse-mode tape.

    Every op records its parents and a closure mapping the output gradient
    to parent gradients; :meth:`backward` walks the tape in reverse
    topological order.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _grad_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._grad_fn = _grad_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ----------------------------------------------------

    @staticmethod
    def _make(data, parents, grad_fn) -> "Tensor":
        parents = tuple(parents)
        if any(p.requires_grad for p in parents):
            return Tensor(data, True, parents, grad_fn)
        return Tensor(data)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar loss")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        return Tensor._make(self.data - other.data, (self, other),
                            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a * b, (self, other),
                            lambda g: (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a / b, (self, other),
                            lambda g: (_unbroadcast(g / b, self.shape),
                                       _unbroadcast(-g * a / (b * b), other.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def __getitem__(self, idx):
        shape = self.shape

        def grad_fn(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)
        return Tensor._make(self.data[idx], (self,), grad_fn)

    # -- reductions and shape ----------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), grad_fn)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis, keepdims) / float(n)

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    # -- elementwise -------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self):
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,))

    def square(self):
        x = self.data
        return Tensor._make(x * x, (self,), lambda g: (2.0 * g * x,))

    def clip(self, lo: float, hi: float):
        mask = (self.data >= lo) & (self.data <= hi)
        return Tensor._make(np.clip(self.data, lo, hi), (self,), lambda g: (g * mask,))

    def wrap_angle(self):
        """Wrap into [-pi, pi); the shift is piecewise constant so the gradient passes through."""
        out = np.mod(self.data + np.pi, 2 * np.pi) - np.pi
        return Tensor._make(out, (self,), lambda g: (g,))


TensorLike = Union[Tensor, np.ndarray, float]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                        lambda g: tuple(np.split(g, splits, axis=axis)))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    sm = np.exp(out)
    return Tensor._make(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor._make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise Bernoulli negative log-likelihood of ``targets`` under ``sigmoid(logits)``."""
    l = logits.data
    t = np.asarray(targets, dtype=np.float64)
    out = np.maximum(l, 0.0) - l * t + np.log1p(np.exp(-np.abs(l)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * l))
    return Tensor._make(out, (logits,), lambda g: (g * (sig - t),))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# --- layers ----------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer")
        if any(w <= 0 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError("one activation per layer")
        if any(a not in ACTIVATIONS for a in self.activations):
            raise ValueError(f"activations must be among {ACTIVATIONS}")

    @classmethod
    def uniform(cls, widths: Sequence[int], hidden: str = "tanh", output: str = "identity") -> "MlpSpec":
        n = len(widths) - 1
        return cls(tuple(widths), tuple([hidden] * (n - 1) + [output]))

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activations": list(self.activations)}


def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str, out_scale: float = 1.0) -> dict:
    params = {}
    for i, (n_in, n_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        scale = 1.0 / np.sqrt(n_in)
        if i == spec.n_layers - 1:
            scale *= out_scale
        params[f"{prefix}.{i}.w"] = rng.normal(0.0, scale, size=(n_in, n_out))
        params[f"{prefix}.{i}.b"] = np.zeros(n_out)
    return params


def _activate(x, name):
    if name == "identity":
        return x
    if isinstance(x, Tensor):
        return x.relu() if name == "relu" else x.tanh()
    return np.maximum(x, 0.0) if name == "relu" else np.tanh(x)


def mlp_forward(spec: MlpSpec, params: Mapping, x, prefix: str = "mlp"):
    """Affine + activation per layer. Works on Tensors (recorded) or plain arrays (inference)."""
    width = x.shape[-1]
    if width != spec.widths[0]:
        raise ValueError(f"input width {width} does not match first layer {spec.widths[0]}")
    h = x
    for i, act in enumerate(spec.activations):
        w, b = params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"]
        h = _activate(h @ w + b, act)
    return h


# --- distributions -----------------------------------------------------------


def kl_gaussian_standard(mean: TensorLike, log_var: TensorLike):
    """KL(N(mean, exp(log_var)) || N(0, I)) summed over all elements."""
    if isinstance(mean, Tensor) or isinstance(log_var, Tensor):
        m, lv = as_tensor(mean), as_tensor(log_var).clip(LOG_VAR_MIN, LOG_VAR_MAX)
        return 0.5 * (m.square() + lv.exp() - 1.0 - lv).sum()
    m = np.asarray(mean, float)
    lv = np.clip(np.asarray(log_var, float), LOG_VAR_MIN, LOG_VAR_MAX)
    return float(0.5 * np.sum(m * m + np.exp(lv) - 1.0 - lv))


def kl_gaussian(q_mean: Tensor, q_log_var: Tensor, p_mean: Tensor, p_log_var: Tensor) -> Tensor:
    """KL between diagonal Gaussians, summed over the last axis (one value per row)."""
    qlv = as_tensor(q_log_var).clip(LOG_VAR_MIN, LOG_VAR_MAX)
    plv = as_tensor(p_log_var).clip(LOG_VAR_MIN, LOG_VAR_MAX)
    diff = as_tensor(q_mean) - as_tensor(p_mean)
    return 0.5 * ((plv - qlv) + (qlv.exp() + diff.square()) / plv.exp() - 1.0).sum(axis=-1)


def kl_categorical(q, p, tol: float = 1e-6) -> float:
    """sum q log(q / p) with 0 log 0 = 0."""
    q = np.asarray(q, float)
    p = np.asarray(p, float)
    if q.shape != p.shape:
        raise ValueError("q and p must have matching shapes")
    if abs(q.sum() - 1.0) > tol or abs(p.sum() - 1.0) > tol:
        raise ValueError("q and p must each sum to 1")
    support = q > 0
    if np.any(p[support] <= 0):
        raise ValueError("KL is infinite: p has zero mass where q is positive")
    return float(np.sum(q[support] * (np.log(q[support]) - np.log(p[support]))))


def kl_categorical_logits(q_logits: Tensor, p_logits: Tensor) -> Tensor:
    """Differentiable per-row KL(softmax(q) || softmax(p))."""
    lq = log_softmax(q_logits)
    lp = log_softmax(p_logits)
    return (softmax(q_logits) * (lq - lp)).sum(axis=-1)


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-12, 1.0 - 1e-12)))


def gumbel_softmax_sample(logits, temperature: float, rng: np.random.Generator):
    """Relaxed one-hot sample softmax((logits + g) / temperature)."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if isinstance(logits, Tensor):
        g = gumbel_noise(logits.shape, rng)
        return softmax((logits + g) / temperature)
    logits = np.asarray(logits, float)
    return _softmax_np((logits + gumbel_noise(logits.shape, rng)) / temperature)


def gaussian_reparam(mean, log_var, rng: np.random.Generator):
    """mean + exp(log_var / 2) * eps, with log_var clamped to [-20, 5]."""
    if isinstance(mean, Tensor) or isinstance(log_var, Tensor):
        m, lv = as_tensor(mean), as_tensor(log_var)
        eps = rng.standard_normal(m.shape)
        return m + (lv.clip(LOG_VAR_MIN, LOG_VAR_MAX) * 0.5).exp() * eps
    m = np.asarray(mean, float)
    lv = np.clip(np.nan_to_num(np.asarray(log_var, float), neginf=LOG_VAR_MIN), LOG_VAR_MIN, LOG_VAR_MAX)
    return m + np.exp(0.5 * lv) * rng.standard_normal(m.shape)


# --- optimisation --------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **kw) -> "AdamState":
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()}, **kw)


def adam_step(state: AdamState, params: dict, grads: Mapping[str, np.ndarray]) -> dict:
    """One bias-corrected Adam update, applied in place; returns ``params``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        if m.shape != p.shape:
            raise ValueError(f"optimizer state shape mismatch for {k}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def value_and_grad(loss_fn: Callable[[dict], Tensor], params: Mapping[str, np.ndarray]):
    """Evaluate ``loss_fn`` on leaf tensors wrapping ``params``; return (loss, aux, grads).

    ``loss_fn`` may return either a scalar Tensor or ``(Tensor, aux)``.
    """
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    out = loss_fn(leaves)
    loss, aux = out if isinstance(out, tuple) else (out, None)
    if loss.data.size != 1:
        raise ValueError("loss must be a scalar")
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(loss.data), aux, grads


def finite_difference_grad(loss_fn: Callable[[dict], float], params: Mapping[str, np.ndarray],
                           step: float = 1e-5, keys: Optional[Sequence[str]] = None,
                           max_per_param: Optional[int] = None,
                           rng: Optional[np.random.Generator] = None) -> dict:
    """Central differences of a scalar function of ``params``.

    With ``max_per_param`` only a random subset of entries of each array is
    probed; the returned arrays hold NaN for entries that were skipped.
    """
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    out = {}
    for k in keys or list(params):
        p = params[k]
        g = np.full(p.shape, np.nan)
        flat_idx = np.arange(p.size)
        if max_per_param is not None and p.size > max_per_param:
            flat_idx = (rng or np.random.default_rng(0)).choice(p.size, max_per_param, replace=False)
        for i in flat_idx:
            idx = np.unravel_index(i, p.shape)
            orig = p[idx]
            p[idx] = orig + step
            hi = loss_fn(params)
            p[idx] = orig - step
            lo = loss_fn(params)
            p[idx] = orig
            g[idx] = (hi - lo) / (2.0 * step)
        out[k] = g
    return out


def relative_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray]) -> float:
    """||a - n|| / max(||a||, ||n||) over the entries that were probed numerically."""
    a_parts, n_parts = [], []
    for k, n in numeric.items():
        mask = ~np.isnan(n)
        a_parts.append(np.asarray(analytic[k])[mask])
        n_parts.append(n[mask])
    a = np.concatenate(a_parts)
    n = np.concatenate(n_parts)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)
    return float(np.linalg.norm(a - n) / denom)


# --- checkpoints -----------------------------------------------------------------

MAGIC = b"BIVOCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, descriptor: dict, arrays: Mapping[str, np.ndarray]) -> Path:
    """magic | u32 version | u64 len + JSON descriptor | u64 len + f64 LE blob | u32 crc32."""
    names = list(arrays)
    desc = dict(descriptor)
    desc["arrays"] = [[k, list(np.shape(arrays[k]))] for k in names]
    head = json.dumps(desc, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes() for k in names)
    body = (MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<Q", len(head)) + head
            + struct.pack("<Q", len(blob)) + blob)
    path = Path(path)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    body, crc = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, off)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off += 4
    (n_head,) = struct.unpack_from("<Q", body, off)
    off += 8
    desc = json.loads(body[off:off + n_head].decode("utf-8"))
    off += n_head
    (n_blob,) = struct.unpack_from("<Q", body, off)
    off += 8
    flat = np.frombuffer(body[off:off + n_blob], dtype="<f8")
    arrays, pos = {}, 0
    for name, shape in desc.pop("arrays"):
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = flat[pos:pos + n].reshape(shape).astype(np.float64)
        pos += n
    if pos != flat.size:
        raise CheckpointError(f"{path}: blob size does not match descriptor")
    return desc, arrays
