"""Small reverse-mode autodiff kernel on float64 numpy arrays.

Only the operations the three classifier families need are provided:
dense layers, 2D convolution, multi-head self-attention, patch merging,
pooling, layer norm and a fused softmax cross-entropy. Optimizers (SGD,
Adam) and a JSON checkpoint format live here as well.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numba
import numpy as np

DTYPE = np.float64


class ShapeMismatch(ValueError):
    pass


class GraphCycle(RuntimeError):
    pass


class Tensor:
    """A node in the computation graph.

    ``backward_fn`` maps the gradient of this node to a tuple of gradients,
    one per parent (``None`` for parents that need none).
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"cannot add {a.shape} and {b.shape}") from exc
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"cannot multiply {a.shape} and {b.shape}") from exc
    return _node(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    return _node(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    out = a.data @ b.data

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _node(out, (a, b), fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}") from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def mean(a: Tensor, axis=None) -> Tensor:
    out = a.data.mean(axis=axis)
    axes = tuple(range(a.data.ndim)) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([a.shape[i] for i in axes]))

    def fn(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, tuple(int(i) % a.data.ndim for i in axes))
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _node(out, (a,), fn)


def total(a: Tensor) -> Tensor:
    return _node(a.data.sum(), (a,), lambda g: (np.full(a.shape, g, dtype=DTYPE),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), fn)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * scale.data + shift.data

    def fn(g):
        gxhat = g * scale.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        gscale = _unbroadcast(g * xhat, scale.shape)
        gshift = _unbroadcast(g, shift.shape)
        return gx, gscale, gshift

    return _node(out, (x, scale, shift), fn)


# ---------------------------------------------------------------------------
# layers


def dense_forward(x, W, b=None) -> Tensor:
    """y = x W + b over the trailing axis of x."""
    x, W = as_tensor(x), as_tensor(W)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeMismatch(f"dense: input {x.shape} vs weights {W.shape}")
    y = matmul(x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeMismatch(f"dense: bias {b.shape} vs weights {W.shape}")
        y = add(y, b)
    return y


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d_forward(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[B, C, H, W] with kernels[O, C, k, k]."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4D input and kernels, got {x.shape}, {kernels.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernels.shape
    if Ck != C or kh != kw:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs kernels {kernels.shape}")
    k = kh
    if H + 2 * padding < k or W + 2 * padding < k:
        raise ShapeMismatch(f"kernel {k} does not fit padded input {H}x{W} (padding {padding})")
    ho = conv_output_size(H, k, stride, padding)
    wo = conv_output_size(W, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    # columns laid out as [C, k, k, B, ho, wo] so every slice copy is block-contiguous
    cols = np.empty((C, k, k, B, ho, wo), dtype=DTYPE)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + hspan:stride, j:j + wspan:stride]
    cols = cols.reshape(C * k * k, B * ho * wo)
    wmat = kernels.data.reshape(O, C * k * k)
    out = wmat @ cols
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ShapeMismatch(f"conv2d: bias {bias.shape} for {O} kernels")
        out += bias.data[:, None]
        parents.append(bias)
    out = out.reshape(O, B, ho, wo).transpose(1, 0, 2, 3)

    def fn(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, B * ho * wo)
        gk = (gm @ cols.T).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(C, k, k, B, ho, wo)
            gxt = np.zeros((C, B) + xp.shape[2:], dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    gxt[:, :, i:i + hspan:stride, j:j + wspan:stride] += gcols[:, i, j]
            gxp = gxt.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
            gx = np.ascontiguousarray(gx)
        grads = [gx, gk]
        if bias is not None:
            grads.append(gm.sum(axis=1))
        return tuple(grads)

    return _node(np.ascontiguousarray(out), parents, fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C]."""
    return mean(x, axis=(2, 3))


def attention_forward(x, Wq, Wk, Wv, Wo, heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention over x[B, T, d]."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeMismatch(f"attention expects [batch, tokens, d], got {x.shape}")
    B, T, d = x.shape
    if d % heads:
        raise ShapeMismatch(f"width {d} not divisible by {heads} heads")
    for W in (Wq, Wk, Wv, Wo):
        if as_tensor(W).shape != (d, d):
            raise ShapeMismatch(f"attention projection {as_tensor(W).shape}, expected {(d, d)}")
    dh = d // heads

    def split(t):
        return transpose(reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(matmul(x, Wq))
    k = split(matmul(x, Wk))
    v = split(matmul(x, Wv))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    weights = softmax(scores, axis=-1)
    ctx = transpose(matmul(weights, v), (0, 2, 1, 3))
    return matmul(reshape(ctx, (B, T, d)), Wo)


def patch_merge(x: Tensor, grid: int, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Concatenate each 2x2 group of neighbouring tokens and project linearly.

    x is [B, grid*grid, d] in row-major token order; output is
    [B, (grid/2)**2, W.shape[1]].
    """
    B, T, d = x.shape
    if T != grid * grid or grid % 2:
        raise ShapeMismatch(f"cannot merge {T} tokens on a {grid}x{grid} grid")
    half = grid // 2
    t = reshape(x, (B, half, 2, half, 2, d))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    t = reshape(t, (B, half * half, 4 * d))
    return dense_forward(t, W, b)


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of one-hot ``targets`` under softmax(logits).

    Returns the loss and its gradient with respect to ``logits``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    targets = np.asarray(targets, dtype=DTYPE)
    if logits.shape != targets.shape or logits.ndim != 2:
        raise ShapeMismatch(f"logits {logits.shape} vs targets {targets.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    batch = logits.shape[0]
    loss = float(-(targets * logp).sum() / batch)
    grad = (np.exp(logp) - targets) / batch
    return loss, grad


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    loss, grad = softmax_cross_entropy(logits.data, targets)
    return _node(loss, (logits,), lambda g: (g * grad,))


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# reverse pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if state.get(id(node)) == 2:
                continue
            state[id(node)] = 1
        if i < len(node.parents):
            stack.append((node, i + 1))
            parent = node.parents[i]
            if not parent.requires_grad:
                continue
            mark = state.get(id(parent))
            if mark == 1:
                raise GraphCycle(f"cycle through {parent!r}")
            if mark is None:
                stack.append((parent, 0))
        else:
            state[id(node)] = 2
            order.append(node)
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray] | list:
    """Accumulate d(loss)/d(node) into ``.grad`` of every leaf requiring grad.

    If ``params`` is given, returns their gradients in order; parameters the
    loss does not depend on get exact zeros.
    """
    if loss.size != 1:
        raise ShapeMismatch("backward needs a scalar loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return grads
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# ---------------------------------------------------------------------------
# parameters and optimizers

ROLES = ("weight", "bias", "scale", "embedding")


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    role: str = "weight"
    fan_in: int | None = None


class ParameterSet:
    """Named, ordered collection of leaf tensors with roles."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.roles: dict[str, str] = {}

    def add(self, name: str, data: np.ndarray, role: str) -> Tensor:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name!r}")
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.tensors[name] = t
        self.roles[name] = role
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def total_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self.tensors.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for n, t in self.tensors.items():
            out.add(n, t.data.copy(), self.roles[n])
        return out


def init_params(specs: Sequence[ParamSpec], seed: int) -> ParameterSet:
    """Weights ~ N(0, 2/fan_in), biases 0, norm scales 1, embeddings ~ N(0, 0.02^2)."""
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    for spec in specs:
        if spec.role == "weight":
            fan_in = spec.fan_in or int(np.prod(spec.shape[:-1]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.shape)
        elif spec.role == "embedding":
            data = rng.normal(0.0, 0.02, size=spec.shape)
        elif spec.role == "scale":
            data = np.ones(spec.shape)
        else:
            data = np.zeros(spec.shape)
        params.add(spec.name, data, spec.role)
    return params


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def _decayed(params: ParameterSet, name: str, g: np.ndarray, lam: float) -> np.ndarray:
    p = params[name]
    if p.shape != g.shape:
        raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
    if lam and params.roles[name] == "weight":
        return g + lam * p.data
    return g


def sgd_step(params: ParameterSet, grads: dict[str, np.ndarray], state: OptimizerState) -> ParameterSet:
    """p <- p - lr * (g + lambda * p), decay on weights only."""
    state.step += 1
    for name in params:
        g = _decayed(params, name, grads[name], state.weight_decay)
        params[name].data = params[name].data - state.learning_rate * g
    return params


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, lam, b1, b2, c1, c2, lr, eps):  # pragma: no cover - compiled
    for i in range(p.size):
        gi = g[i] + lam * p[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


def adam_step(params: ParameterSet, grads: dict[str, np.ndarray], state: OptimizerState) -> ParameterSet:
    """Adam with bias correction; L2 term lambda * p is added to the raw gradient.

    The element loop runs in a compiled kernel and updates parameters and
    moments in place; ``adam_reference_step`` is the plain array version.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in params:
        p = params[name]
        g = np.ascontiguousarray(grads[name], dtype=DTYPE)
        if p.shape != g.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        data = p.data if p.data.flags.writeable and p.data.flags.c_contiguous else p.data.copy()
        lam = state.weight_decay if params.roles[name] == "weight" else 0.0
        _adam_kernel(data.reshape(-1), g.reshape(-1), state.m[name].reshape(-1),
                     state.v[name].reshape(-1), lam, b1, b2, c1, c2, state.learning_rate, state.eps)
        p.data = data
    return params


def adam_reference_step(params: ParameterSet, grads: dict[str, np.ndarray],
                        state: OptimizerState) -> ParameterSet:
    """Array-expression Adam, same arithmetic as ``adam_step``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in params:
        g = _decayed(params, name, grads[name], state.weight_decay)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        params[name].data = params[name].data - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def optimizer_step(params: ParameterSet, grads: dict[str, np.ndarray], state: OptimizerState) -> ParameterSet:
    if state.kind == "sgd":
        return sgd_step(params, grads, state)
    return adam_step(params, grads, state)


# ---------------------------------------------------------------------------
# checkpoints


def _encode(a: np.ndarray) -> dict:
    payload = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"shape": list(a.shape), "data": base64.b64encode(payload).decode("ascii")}


def _decode(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(doc["shape"]).astype(DTYPE)


def checkpoint_dict(params: ParameterSet, state: OptimizerState | None = None, extra: dict | None = None) -> dict:
    doc = {
        "format": "numbisect-checkpoint/1",
        "params": {n: {"role": params.roles[n], **_encode(t.data)} for n, t in params.items()},
    }
    if state is not None:
        doc["optimizer"] = {
            "kind": state.kind, "learning_rate": state.learning_rate,
            "weight_decay": state.weight_decay, "beta1": state.beta1, "beta2": state.beta2,
            "eps": state.eps, "step": state.step,
            "m": {n: _encode(a) for n, a in state.m.items()},
            "v": {n: _encode(a) for n, a in state.v.items()},
        }
    if extra:
        doc["extra"] = extra
    return doc


def save_checkpoint(path, params: ParameterSet, state: OptimizerState | None = None,
                    extra: dict | None = None) -> None:
    text = json.dumps(checkpoint_dict(params, state, extra), sort_keys=True)
    Path(path).write_text(text, encoding="utf-8")


def load_checkpoint(path) -> tuple[ParameterSet, OptimizerState | None, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return checkpoint_from_dict(doc)


def checkpoint_from_dict(doc: dict) -> tuple[ParameterSet, OptimizerState | None, dict]:
    params = ParameterSet()
    for name, entry in doc["params"].items():
        params.add(name, _decode(entry), entry["role"])
    state = None
    if "optimizer" in doc:
        o = doc["optimizer"]
        state = OptimizerState(kind=o["kind"], learning_rate=o["learning_rate"],
                               weight_decay=o["weight_decay"], beta1=o["beta1"],
                               beta2=o["beta2"], eps=o["eps"], step=o["step"],
                               m={n: _decode(a) for n, a in o["m"].items()},
                               v={n: _decode(a) for n, a in o["v"].items()})
    return params, state, doc.get("extra", {})
