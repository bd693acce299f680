"""A small reverse-mode autodiff kernel on numpy arrays, with layers and Adam.

Every op records its parents and a backward closure; calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order. Graphs are rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import json
import math
import zipfile
from typing import Callable, Iterator

import numpy as np
from scipy.special import expit

DTYPE = np.float64


_GRAD_ENABLED = True


class TrainingAbort(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording the graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.name = name
        if not _GRAD_ENABLED:
            parents, backward_fn = (), None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:  # leaf
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- ops --------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def dense(x, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x W^T + b`` for a batch of row vectors (``W`` is ``(out, in)``)."""
    x = as_tensor(x)
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"dense: input width {x.shape[-1]} != weight fan-in {W.shape[1]}")
    if b is not None and b.shape != (W.shape[0],):
        raise ValueError(f"dense: bias shape {b.shape} != ({W.shape[0]},)")
    y = x.data @ W.data.T
    if b is not None:
        y = y + b.data

    def back(g):
        gx = g @ W.data
        g2 = g.reshape(-1, g.shape[-1])
        gW = g2.T @ x.data.reshape(-1, x.shape[-1])
        out = [gx, gW]
        if b is not None:
            out.append(g2.sum(axis=0))
        return out

    return Tensor(y, (x, W) if b is None else (x, W, b), back)


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return Tensor(x.data * s, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return Tensor(y, (x,), lambda g: (g * (1.0 - y * y),))


def layer_norm(x, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def back(g):
        gh = g * gamma.data
        n = x.shape[-1]
        gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return Tensor(y, (x, gamma, beta), back)


def embedding(table: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    n = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ValueError(f"embedding index out of range [0, {n})")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        return (gt,)

    return Tensor(table.data[index], (table,), back)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                  lambda g: tuple(np.split(g, cuts, axis=axis)))


def cols(x, start: int, stop: int) -> Tensor:
    """Slice ``x[..., start:stop]``."""
    x = as_tensor(x)

    def back(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return Tensor(x.data[..., start:stop], (x,), back)


def total(x) -> Tensor:
    x = as_tensor(x)
    return Tensor(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return Tensor(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return Tensor(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


# --- modules ----------------------------------------------------------------

class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=DTYPE)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


class Dense(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        self.W = Parameter(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        self.b = Parameter(np.zeros(fan_out)) if bias else None

    def __call__(self, x):
        return dense(x, self.W, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator):
        self.table = Parameter(rng.normal(0.0, 0.02, size=(n, dim)))

    def __call__(self, index):
        return embedding(self.table, index)


# --- optimization -----------------------------------------------------------

class Adam:
    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params}

    def step(self):
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingAbort(f"non-finite gradient in parameter {name}")
        self.step_count += 1
        b1, b2, t = self.beta1, self.beta2, self.step_count
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def state_dict(self) -> dict:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_dict(self, state: dict, step_count: int):
        for k in self.m:
            self.m[k] = np.array(state[f"adam.m.{k}"], dtype=DTYPE)
            self.v[k] = np.array(state[f"adam.v.{k}"], dtype=DTYPE)
        self.step_count = step_count


class PlateauScheduler:
    """Halve the learning rate after ``patience`` evaluations without improvement."""

    def __init__(self, optimizer: Adam, factor: float = 0.5, patience: int = 200,
                 threshold: float = 1e-6, min_lr: float = 1e-7):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = math.inf
        self.num_bad = 0

    def step(self, loss: float) -> float:
        if loss < self.best - self.threshold:
            self.best = loss
            self.num_bad = 0
        else:
            self.num_bad += 1
            if self.num_bad >= self.patience:
                self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
                self.num_bad = 0
        return self.optimizer.lr


class EarlyStopping:
    def __init__(self, patience: int = 5000, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_step = 0

    def update(self, loss: float, step: int) -> bool:
        """Record ``loss`` at ``step``; True when training should stop."""
        if loss < self.best - self.min_delta:
            self.best = loss
            self.best_step = step
            return False
        return step - self.best_step >= self.patience


def gradient_check(loss_fn: Callable[[], Tensor], params, h: float = 1e-5,
                   max_entries: int | None = 16, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the graph and return a scalar :class:`Tensor`.
    ``params`` is an iterable of parameters (or ``(name, param)`` pairs); at
    most ``max_entries`` randomly chosen entries are probed per parameter.
    """
    rng = rng or np.random.default_rng(0)
    params = [p[1] if isinstance(p, tuple) else p for p in params]
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, g_an in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn().data)
            flat[i] = old - h
            down = float(loss_fn().data)
            flat[i] = old
            g_fd = (up - down) / (2 * h)
            a = float(g_an.reshape(-1)[i])
            err = abs(g_fd - a) / max(1e-8, abs(g_fd) + abs(a))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


# --- checkpoints ------------------------------------------------------------

FORMAT_VERSION = 1


def architecture_hash(arch: dict, shapes: dict[str, tuple]) -> str:
    payload = json.dumps({"arch": arch, "shapes": {k: list(v) for k, v in sorted(shapes.items())}},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write an ``.npz`` whose ``__header__`` entry is a JSON document."""
    header = {"format_version": FORMAT_VERSION, **header}
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, __header__=blob, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, expect_hash: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as z:
            if "__header__" not in z:
                raise CheckpointError(f"{path}: no checkpoint header")
            header = json.loads(bytes(z["__header__"]).decode())
            arrays = {k: z[k] for k in z.files if k != "__header__"}
    except CheckpointError:
        raise
    except (ValueError, KeyError, zipfile.BadZipFile, EOFError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
    if expect_hash is not None and header.get("architecture_hash") != expect_hash:
        raise CheckpointError(f"{path}: architecture hash mismatch "
                              f"({header.get('architecture_hash')} != {expect_hash})")
    return header, arrays
