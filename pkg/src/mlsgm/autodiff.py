"""Dense tensors, a reverse-mode tape, MLP blocks, and SGD with momentum.

Tensors are C-contiguous float64 numpy arrays; every differentiable
operation below returns a `Var` wrapping its result. While gradients are
enabled each op also records its tracked inputs and a vector-Jacobian
closure, so `backward` can push an adjoint from a scalar loss into every
`Param` it depends on. Untracked inputs (plain ndarrays, python floats)
are treated as constants and receive no gradient.

Numerical guards (fixed across the package):
  * logistic inputs are clamped to +-30 before exponentiation,
  * log arguments are clamped to >= 1e-12,
so no documented operation produces NaN/Inf from finite inputs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .rng import SplitMix64

SIGMOID_CLIP = 30.0
LOG_FLOOR = 1e-12

Tensor = np.ndarray


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class StateError(RuntimeError):
    """Tape misuse: backward without a recorded forward, or run twice."""


def tensor(data, shape=None) -> Tensor:
    """Materialize `data` as a C-contiguous float64 array."""
    out = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        if int(np.prod(shape)) != out.size:
            raise ShapeError(f"cannot view {out.size} values as shape {shape}")
        out = out.reshape(shape)
    return out


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that disables tape recording (values still computed)."""

    def __enter__(self):
        self._saved = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._saved
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


class Var:
    """A value node. Interior nodes carry (parents, vjp) until backward."""

    __slots__ = ("value", "parents", "vjp", "consumed")

    def __init__(self, value, parents=None, vjp=None):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.consumed = False

    @property
    def shape(self):
        return self.value.shape


class Param(Var):
    """Leaf tensor with persistent gradient and momentum slots.

    `frozen` is an optional boolean mask; masked entries are skipped entirely
    by `sgd_step` (no momentum update, no weight decay).
    """

    __slots__ = ("name", "grad", "momentum", "frozen")

    def __init__(self, value, name: str = ""):
        super().__init__(tensor(value))
        self.name = name
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)
        self.frozen = None


class ParamStore:
    """Named parameters with gradient and momentum slots; names are unique."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        p = Param(value, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def params(self) -> list[Param]:
        return list(self._params.values())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad.fill(0.0)

    def param_count(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in self._params.items():
            a = tensor(arrays[name])
            if a.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name!r}: {a.shape} vs {p.value.shape}")
            p.value[...] = a


def _value(x):
    return x.value if isinstance(x, Var) else x


def value_of(x):
    """Raw ndarray behind an op result (Var while recording, else ndarray)."""
    return x.value if isinstance(x, Var) else x


def _make(value, parents, vjp):
    if _GRAD_ENABLED[0] and parents:
        return Var(value, parents=tuple(parents), vjp=vjp)
    return value


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient `g` back to `shape` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise / structural ops
# --------------------------------------------------------------------------

def constant(x) -> Var:
    return Var(tensor(x))


def add(a, b) -> Var:
    va, vb = _value(a), _value(b)
    out = va + vb
    if not _GRAD_ENABLED[0]:
        return out
    parents, grads = [], []
    if isinstance(a, Var):
        parents.append(a)
        grads.append(np.shape(va))
    if isinstance(b, Var):
        parents.append(b)
        grads.append(np.shape(vb))

    def vjp(g):
        return tuple(_unbroadcast(g, s) for s in grads)

    return _make(out, parents, vjp)


def sub(a, b) -> Var:
    va, vb = _value(a), _value(b)
    out = va - vb
    if not _GRAD_ENABLED[0]:
        return out
    parents, signs, shapes = [], [], []
    if isinstance(a, Var):
        parents.append(a); signs.append(1.0); shapes.append(np.shape(va))
    if isinstance(b, Var):
        parents.append(b); signs.append(-1.0); shapes.append(np.shape(vb))

    def vjp(g):
        return tuple(_unbroadcast(s * g, sh) for s, sh in zip(signs, shapes))

    return _make(out, parents, vjp)


def mul(a, b) -> Var:
    va, vb = _value(a), _value(b)
    out = va * vb
    if not _GRAD_ENABLED[0]:
        return out
    parents, others, shapes = [], [], []
    if isinstance(a, Var):
        parents.append(a); others.append(vb); shapes.append(np.shape(va))
    if isinstance(b, Var):
        parents.append(b); others.append(va); shapes.append(np.shape(vb))

    def vjp(g):
        return tuple(_unbroadcast(g * o, sh) for o, sh in zip(others, shapes))

    return _make(out, parents, vjp)


def neg(a):
    va = _value(a)
    out = -va
    if _GRAD_ENABLED[0] and isinstance(a, Var):
        return _make(out, [a], lambda g: (-g,))
    return out


def relu(a) -> Var:
    va = _value(a)
    out = np.maximum(va, 0.0)
    if _GRAD_ENABLED[0] and isinstance(a, Var):
        mask = va > 0.0
        return _make(out, [a], lambda g: (g * mask,))
    return out


def sigmoid(a) -> Var:
    """Logistic with inputs clamped to +-SIGMOID_CLIP; derivative is zero
    outside the clamp (the clamped function is constant there)."""
    va = _value(a)
    z = np.clip(va, -SIGMOID_CLIP, SIGMOID_CLIP)
    out = 1.0 / (1.0 + np.exp(-z))
    if _GRAD_ENABLED[0] and isinstance(a, Var):
        d = out * (1.0 - out) * (np.abs(va) < SIGMOID_CLIP)
        return _make(out, [a], lambda g: (g * d,))
    return out


def log(a) -> Var:
    """Natural log with the argument clamped to >= LOG_FLOOR."""
    va = _value(a)
    safe = np.maximum(va, LOG_FLOOR)
    out = np.log(safe)
    if _GRAD_ENABLED[0] and isinstance(a, Var):
        d = (va > LOG_FLOOR) / safe
        return _make(out, [a], lambda g: (g * d,))
    return out


def clamp01(a, eps: float = LOG_FLOOR) -> Var:
    """Clip to [eps, 1-eps]; gradient passes only strictly inside."""
    va = _value(a)
    out = np.clip(va, eps, 1.0 - eps)
    if _GRAD_ENABLED[0] and isinstance(a, Var):
        mask = (va > eps) & (va < 1.0 - eps)
        return _make(out, [a], lambda g: (g * mask,))
    return out


def pow_const(a, k: float) -> Var:
    """x**k for a constant exponent k >= 0, defined on x >= 0."""
    if k < 0:
        raise ValueError("pow_const requires k >= 0")
    va = _value(a)
    out = np.power(va, k)
    if not (_GRAD_ENABLED[0] and isinstance(a, Var)):
        return out
    if k == 0:
        d = np.zeros_like(va)
    elif k == 1:
        d = np.ones_like(va)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(va > 0.0, k * np.power(va, k - 1.0), 0.0)
    return _make(out, [a], lambda g: (g * d,))


def matmul(a, b) -> Var:
    va, vb = _value(a), _value(b)
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
        raise ShapeError(f"matmul shapes {va.shape} x {vb.shape}")
    out = va @ vb
    if not _GRAD_ENABLED[0]:
        return out
    parents, sides = [], []
    if isinstance(a, Var):
        parents.append(a); sides.append("a")
    if isinstance(b, Var):
        parents.append(b); sides.append("b")

    def vjp(g):
        res = []
        for side in sides:
            res.append(g @ vb.T if side == "a" else va.T @ g)
        return tuple(res)

    return _make(out, parents, vjp)


def affine(x, w, b) -> Var:
    """x @ w.T + b for x (n, din), w (dout, din), b (dout,)."""
    vx, vw, vb = _value(x), _value(w), _value(b)
    if vx.ndim != 2 or vw.ndim != 2 or vx.shape[1] != vw.shape[1] or vb.shape != (vw.shape[0],):
        raise ShapeError(f"affine shapes x{vx.shape} w{vw.shape} b{vb.shape}")
    out = vx @ vw.T + vb
    if not _GRAD_ENABLED[0]:
        return out
    parents, sides = [], []
    for v, side in ((x, "x"), (w, "w"), (b, "b")):
        if isinstance(v, Var):
            parents.append(v); sides.append(side)

    def vjp(g):
        res = []
        for side in sides:
            if side == "x":
                res.append(g @ vw)
            elif side == "w":
                res.append(g.T @ vx)
            else:
                res.append(g.sum(axis=0))
        return tuple(res)

    return _make(out, parents, vjp)


def concat_cols(parts: Sequence) -> Var:
    vals = [_value(p) for p in parts]
    out = np.concatenate(vals, axis=1)
    if not _GRAD_ENABLED[0]:
        return out
    tracked = [(i, p) for i, p in enumerate(parts) if isinstance(p, Var)]
    if not tracked:
        return out
    offsets = np.cumsum([0] + [v.shape[1] for v in vals])

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i, _ in tracked)

    return _make(out, [p for _, p in tracked], vjp)


def concat_rows(parts: Sequence) -> Var:
    vals = [_value(p) for p in parts]
    out = np.concatenate(vals, axis=0)
    if not _GRAD_ENABLED[0]:
        return out
    tracked = [(i, p) for i, p in enumerate(parts) if isinstance(p, Var)]
    if not tracked:
        return out
    offsets = np.cumsum([0] + [v.shape[0] for v in vals])

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i, _ in tracked)

    return _make(out, [p for _, p in tracked], vjp)


def gather_rows(x, idx) -> Var:
    """Rows (axis 0) of x at integer indices; duplicates allowed."""
    vx = _value(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = vx[idx]
    if not (_GRAD_ENABLED[0] and isinstance(x, Var)):
        return out

    def vjp(g):
        dx = np.zeros_like(vx)
        np.add.at(dx, idx, g)
        return (dx,)

    return _make(out, [x], vjp)


def reshape(x, shape) -> Var:
    vx = _value(x)
    out = vx.reshape(shape)
    if _GRAD_ENABLED[0] and isinstance(x, Var):
        return _make(out, [x], lambda g: (g.reshape(vx.shape),))
    return out


def transpose(x) -> Var:
    vx = _value(x)
    out = np.ascontiguousarray(vx.T)
    if _GRAD_ENABLED[0] and isinstance(x, Var):
        return _make(out, [x], lambda g: (np.ascontiguousarray(g.T),))
    return out


def sum_all(x) -> Var:
    vx = _value(x)
    out = np.asarray(vx.sum())
    if _GRAD_ENABLED[0] and isinstance(x, Var):
        return _make(out, [x], lambda g: (np.broadcast_to(g, vx.shape),))
    return out


def mean_all(x) -> Var:
    vx = _value(x)
    out = np.asarray(vx.mean())
    if _GRAD_ENABLED[0] and isinstance(x, Var):
        n = vx.size
        return _make(out, [x], lambda g: (np.broadcast_to(g / n, vx.shape),))
    return out


def mean_axis1(x) -> Var:
    vx = _value(x)
    out = vx.mean(axis=1)
    if _GRAD_ENABLED[0] and isinstance(x, Var):
        n = vx.shape[1]
        return _make(out, [x], lambda g: (np.broadcast_to(g[:, None] / n, vx.shape),))
    return out


def max_axis1(x) -> Var:
    """Row-wise max; gradient routes to the first argmax in each row."""
    vx = _value(x)
    idx = np.argmax(vx, axis=1)
    out = vx[np.arange(vx.shape[0]), idx]
    if _GRAD_ENABLED[0] and isinstance(x, Var):
        def vjp(g):
            dx = np.zeros_like(vx)
            dx[np.arange(vx.shape[0]), idx] = g
            return (dx,)
        return _make(out, [x], vjp)
    return out


def max_axis0(x) -> Var:
    """Column-wise max; gradient routes to the first argmax in each column."""
    vx = _value(x)
    idx = np.argmax(vx, axis=0)
    out = vx[idx, np.arange(vx.shape[1])]
    if _GRAD_ENABLED[0] and isinstance(x, Var):
        def vjp(g):
            dx = np.zeros_like(vx)
            dx[idx, np.arange(vx.shape[1])] = g
            return (dx,)
        return _make(out, [x], vjp)
    return out


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------

class Mlp:
    """Affine layer stack: rectifier between layers, optional terminal logistic.

    `layers` is a list of (weight, bias) pairs with chained dimensions;
    weights are (out, in). Entries may be Params (trainable) or ndarrays.
    """

    __slots__ = ("layers", "sigmoid_out", "in_dim", "out_dim")

    def __init__(self, layers, sigmoid_out: bool = False):
        if not layers:
            raise ShapeError("Mlp needs at least one layer")
        prev = None
        for w, b in layers:
            wv, bv = _value(w), _value(b)
            if wv.ndim != 2 or bv.shape != (wv.shape[0],):
                raise ShapeError(f"bad layer shapes w{wv.shape} b{bv.shape}")
            if prev is not None and wv.shape[1] != prev:
                raise ShapeError(f"layer dims do not chain: {wv.shape[1]} after {prev}")
            prev = wv.shape[0]
        self.layers = list(layers)
        self.sigmoid_out = sigmoid_out
        self.in_dim = _value(layers[0][0]).shape[1]
        self.out_dim = prev

    def param_count(self) -> int:
        return sum(_value(w).size + _value(b).size for w, b in self.layers)


def build_mlp(store: ParamStore, name: str, dims: Sequence[int], rng: SplitMix64,
              sigmoid_out: bool = False) -> Mlp:
    """Register an MLP with the given layer widths (e.g. [in, hidden, out]).

    Weights draw uniform +-sqrt(6/(fan_in+fan_out)) in row-major order from
    `rng`, layer by layer; biases start at zero. Registration (and hence
    draw) order is the layer order.
    """
    layers = []
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        limit = math.sqrt(6.0 / (din + dout))
        w = store.add(f"{name}.l{i}.w", rng.fill_uniform((dout, din), -limit, limit))
        b = store.add(f"{name}.l{i}.b", np.zeros(dout))
        layers.append((w, b))
    return Mlp(layers, sigmoid_out=sigmoid_out)


def mlp_forward(net: Mlp, x):
    """Apply the layer chain to x (batch, in) -> (batch, out).

    Records pre-activations while gradients are enabled so the backward
    sweep can produce weight, bias and input gradients in one pass.
    """
    vx = x.value if isinstance(x, Var) else x
    if vx.ndim != 2 or vx.shape[1] != net.in_dim:
        raise ShapeError(f"mlp input {vx.shape} does not match in_dim {net.in_dim}")
    layers = net.layers
    n_layers = len(layers)

    if not _GRAD_ENABLED[0]:
        h = vx
        last = n_layers - 1
        for i in range(n_layers):
            w, b = layers[i]
            z = np.dot(h, (w.value if isinstance(w, Var) else w).T)
            z += b.value if isinstance(b, Var) else b
            if i != last:
                h = np.maximum(z, 0.0, out=z)
            elif net.sigmoid_out:
                np.clip(z, -SIGMOID_CLIP, SIGMOID_CLIP, out=z)
                np.exp(-z, out=z)
                z += 1.0
                h = np.divide(1.0, z, out=z)
            else:
                h = z
        return h

    inputs, preacts = [], []
    h = vx
    for i, (w, b) in enumerate(layers):
        z = h @ _value(w).T + _value(b)
        inputs.append(h)
        preacts.append(z)
        last = i == n_layers - 1
        if not last:
            h = np.maximum(z, 0.0)
        elif net.sigmoid_out:
            zc = np.clip(z, -SIGMOID_CLIP, SIGMOID_CLIP)
            h = 1.0 / (1.0 + np.exp(-zc))
        else:
            h = z

    parents = []
    track_x = isinstance(x, Var)
    if track_x:
        parents.append(x)
    tracked_layers = []
    for w, b in net.layers:
        tw = isinstance(w, Var)
        tb = isinstance(b, Var)
        tracked_layers.append((tw, tb))
        if tw:
            parents.append(w)
        if tb:
            parents.append(b)
    out_value = h

    def vjp(g):
        grads = []
        da = g
        for i in range(n_layers - 1, -1, -1):
            z = preacts[i]
            if i == n_layers - 1:
                if net.sigmoid_out:
                    zc = np.clip(z, -SIGMOID_CLIP, SIGMOID_CLIP)
                    s = 1.0 / (1.0 + np.exp(-zc))
                    dz = da * s * (1.0 - s) * (np.abs(z) < SIGMOID_CLIP)
                else:
                    dz = da
            else:
                dz = da * (z > 0.0)
            tw, tb = tracked_layers[i]
            lw = _value(net.layers[i][0])
            pair = []
            if tw:
                pair.append(dz.T @ inputs[i])
            if tb:
                pair.append(dz.sum(axis=0))
            grads.append(pair)
            da = dz @ lw
        res = []
        if track_x:
            res.append(da)
        for pair in reversed(grads):
            res.extend(pair)
        return tuple(res)

    return _make(out_value, parents, vjp)


# --------------------------------------------------------------------------
# backward / optimizer / gradient check
# --------------------------------------------------------------------------

def _topo_order(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.parents:
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(store: ParamStore, loss: Var) -> None:
    """Push d(loss)/d(param) into every reachable Param's gradient slot.

    The loss must be a scalar produced by a recorded forward pass. Gradients
    from successive backward calls (distinct tapes) accumulate; re-running
    backward on an already-consumed loss raises StateError. Interior tape
    references are dropped afterwards to free memory.
    """
    if not isinstance(store, ParamStore):
        raise TypeError("backward expects a ParamStore")
    if not isinstance(loss, Var):
        raise StateError("backward target is not a recorded value")
    if loss.consumed:
        raise StateError("backward already ran on this loss; re-run the forward pass")
    if loss.parents is None:
        raise StateError("no recorded computation ends in this value (forward missing or tape disabled)")
    if loss.value.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Param):
            node.grad += g
            continue
        if node.parents:
            for p, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
    loss.consumed = True
    for node in order:
        if not isinstance(node, Param):
            node.parents = None
            node.vjp = None


def sgd_step(store: ParamStore, lr: float, momentum: float = 0.9,
             weight_decay: float = 1e-4) -> None:
    """v <- momentum*v + (g + weight_decay*theta); theta <- theta - lr*v.

    Gradients are zeroed afterwards. Entries under a Param's frozen mask are
    left bit-identical (no momentum, decay or value update).
    """
    for p in store.params():
        if p.frozen is None:
            p.momentum *= momentum
            p.momentum += p.grad + weight_decay * p.value
            p.value -= lr * p.momentum
        else:
            live = ~p.frozen
            g = p.grad[live] + weight_decay * p.value[live]
            p.momentum[live] = momentum * p.momentum[live] + g
            p.value[live] -= lr * p.momentum[live]
        p.grad.fill(0.0)


def finite_diff_check(store: ParamStore, loss_fn: Callable[[], Var],
                      step: float = 1e-4) -> float:
    """Max relative disagreement between the tape gradient and central
    finite differences of `loss_fn`, over every entry of every parameter.

    relative error = |analytic - fd| / max(1, |fd|). `loss_fn` must be
    deterministic and is re-evaluated (without recording) twice per entry.
    Returns 0.0 for an empty store. Gradients are left zeroed.
    """
    if len(store) == 0:
        return 0.0
    store.zero_grads()
    loss = loss_fn()
    backward(store, loss)
    analytic = {p.name: p.grad.copy() for p in store.params()}
    store.zero_grads()

    worst = 0.0
    with no_grad():
        for p in store.params():
            flat = p.value.reshape(-1)
            ga = analytic[p.name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = float(value_of(loss_fn()))
                flat[i] = orig - step
                f_minus = float(value_of(loss_fn()))
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * step)
                rel = abs(ga[i] - fd) / max(1.0, abs(fd))
                if rel > worst:
                    worst = rel
    return worst
