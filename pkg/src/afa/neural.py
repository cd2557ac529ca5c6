"""Small numpy neural-network toolkit with hand-written backward passes.

Forward passes accept an optional leading axis on *parameter* values: if a
parameter holds a stack of shape ``(P, *shape)`` and the input carries the
same leading ``P``, each slice ``p`` is evaluated with its own parameter copy.
``grad_check`` uses this to evaluate many finite-difference perturbations in
one vectorised call. Backward passes assume ordinary (unstacked) parameters.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

MASK_NEG = -1e9
GELU_C = float(np.sqrt(2.0 / np.pi))


class CheckpointError(ValueError):
    pass


class Param:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


def _bcast(v: np.ndarray, core_ndim: int, target_ndim: int) -> np.ndarray:
    # stacked (P, *core) parameter -> (P, 1, ..., 1, *core) aligned with a target of target_ndim
    if v.ndim == core_ndim:
        return v
    pad = target_ndim - 1 - core_ndim
    return v.reshape((v.shape[0],) + (1,) * pad + v.shape[1:])


class Module:
    """Container of :class:`Param` objects and child modules."""

    def __init__(self):
        self._params: list[Param] = []
        self._children: list[Module] = []

    def _param(self, name: str, value: np.ndarray) -> Param:
        p = Param(name, value)
        self._params.append(p)
        return p

    def _child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def params(self) -> list[Param]:
        out = list(self._params)
        for c in self._children:
            out.extend(c.params())
        return out

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params())

    @property
    def dtype(self):
        return self.params()[0].value.dtype

    def astype(self, dtype) -> "Module":
        clone = copy.deepcopy(self)
        for p in clone.params():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return clone

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.params()
        names = {p.name for p in params}
        missing = names - set(state)
        extra = set(state) - names
        if missing or extra:
            raise CheckpointError(
                f"parameter names differ: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}"
            )
        for p in params:
            v = np.asarray(state[p.name])
            if v.shape != p.value.shape:
                raise CheckpointError(f"{p.name}: checkpoint shape {v.shape} != model shape {p.value.shape}")
            p.value = v.astype(p.value.dtype, copy=True)

    def copy_from(self, other: "Module"):
        for dst, src in zip(self.params(), other.params()):
            dst.value = src.value.copy()


# ---------------------------------------------------------------------------
# Dense


def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != W.shape[-2]:
        raise ValueError(f"dense: input dim {x.shape[-1]} != weight rows {W.shape[-2]}")
    return x @ _bcast(W, 2, x.ndim) + _bcast(b, 1, x.ndim)


def dense_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Returns ``(dx, dW, db)`` for ``y = x @ W + b``."""
    n_in, n_out = W.shape
    x2 = x.reshape(-1, n_in)
    dy2 = dy.reshape(-1, n_out)
    return dy @ W.T, x2.T @ dy2, dy2.sum(axis=0)


class Dense(Module):
    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                 dtype=np.float32, scale: float | None = None):
        super().__init__()
        std = np.sqrt(1.0 / n_in) if scale is None else scale
        self.W = self._param(f"{name}.W", (rng.standard_normal((n_in, n_out)) * std).astype(dtype))
        self.b = self._param(f"{name}.b", np.zeros(n_out, dtype=dtype))

    def forward(self, x):
        return dense_forward(x, self.W.value, self.b.value), x

    def backward(self, dy, cache):
        dx, dW, db = dense_backward(dy, cache, self.W.value)
        self.W.grad += dW
        self.b.grad += db
        return dx


# ---------------------------------------------------------------------------
# Elementwise / normalisation


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dy, cache):
    return dy * (cache > 0)


def gelu_forward(x):
    inner = GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * d


class LayerNorm(Module):
    def __init__(self, name: str, dim: int, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self._param(f"{name}.gamma", np.ones(dim, dtype=dtype))
        self.beta = self._param(f"{name}.beta", np.zeros(dim, dtype=dtype))

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
        xhat = xc * inv
        y = xhat * _bcast(self.gamma.value, 1, x.ndim) + _bcast(self.beta.value, 1, x.ndim)
        return y, (xhat, inv)

    def backward(self, dy, cache):
        xhat, inv = cache
        dim = xhat.shape[-1]
        self.gamma.grad += (dy * xhat).reshape(-1, dim).sum(axis=0)
        self.beta.grad += dy.reshape(-1, dim).sum(axis=0)
        dxhat = dy * self.gamma.value
        return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# Softmax and losses


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    z = v - np.max(v, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


CE_EPS = 1e-12


def cross_entropy(probs: np.ndarray, label: int):
    """Single-example loss ``-log probs[label]`` and its gradient w.r.t. the logits.

    Returns ``(loss, dlogits, clamped)``; ``clamped`` flags a zero probability
    that was floored at ``CE_EPS``.
    """
    probs = np.asarray(probs, dtype=float)
    p = probs[label]
    clamped = bool(p < CE_EPS)
    loss = -np.log(max(p, CE_EPS))
    grad = probs.copy()
    grad[label] -= 1.0
    return float(loss), grad, clamped


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch axis (-2) and its logit gradient.

    Any axes before the batch axis are kept in the returned loss.
    """
    B = labels.shape[0]
    logp = log_softmax(logits)
    picked = logp[..., np.arange(B), labels]
    loss = -picked.mean(axis=-1)
    dlogits = np.exp(logp)
    dlogits[..., np.arange(B), labels] -= 1.0
    return loss, dlogits / B


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over the last axis; returns ``(loss, dpred)``."""
    diff = pred - target
    n = diff.shape[-1]
    return (diff * diff).mean(axis=-1), 2.0 * diff / n


# ---------------------------------------------------------------------------
# Attention


class MultiHeadAttention(Module):
    """Multi-head attention with a boolean key mask (True = attendable)."""

    def __init__(self, name: str, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.wq = self._child(Dense(f"{name}.wq", dim, dim, rng, dtype))
        self.wk = self._child(Dense(f"{name}.wk", dim, dim, rng, dtype))
        self.wv = self._child(Dense(f"{name}.wv", dim, dim, rng, dtype))
        self.wo = self._child(Dense(f"{name}.wo", dim, dim, rng, dtype))

    def _split(self, x):
        *lead, t, _ = x.shape
        return np.swapaxes(x.reshape(*lead, t, self.heads, self.dim // self.heads), -2, -3)

    def _merge(self, x):
        x = np.swapaxes(x, -2, -3)
        return x.reshape(*x.shape[:-2], self.dim)

    def forward(self, xq, xk, xv, key_mask):
        key_mask = np.asarray(key_mask, dtype=bool)
        if not key_mask.any(axis=-1).all():
            raise ValueError("attention: every key is masked for some query")
        q_, cq = self.wq.forward(xq)
        k_, ck = self.wk.forward(xk)
        v_, cv = self.wv.forward(xv)
        q, k, v = self._split(q_), self._split(k_), self._split(v_)
        scale = 1.0 / np.sqrt(self.dim // self.heads)
        km = key_mask[..., None, None, :]
        scores = (q @ np.swapaxes(k, -1, -2)) * scale + np.where(km, 0.0, MASK_NEG).astype(q.dtype)
        weights = np.where(km, softmax(scores), 0.0).astype(q.dtype)
        ctx = self._merge(weights @ v)
        out, co = self.wo.forward(ctx)
        return out, (cq, ck, cv, co, q, k, v, weights, scale)

    def backward(self, dout, cache):
        cq, ck, cv, co, q, k, v, weights, scale = cache
        dctx = self._split(self.wo.backward(dout, co))
        dweights = dctx @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(weights, -1, -2) @ dctx
        dscores = weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True)) * scale
        dq = dscores @ k
        dk = np.swapaxes(dscores, -1, -2) @ q
        dxq = self.wq.backward(self._merge(dq), cq)
        dxk = self.wk.backward(self._merge(dk), ck)
        dxv = self.wv.backward(self._merge(dv), cv)
        return dxq, dxk, dxv

    @staticmethod
    def weights_from_cache(cache) -> np.ndarray:
        return cache[7]


def multi_head_attention(q, k, v, key_mask, heads: int, mha: MultiHeadAttention):
    """Functional wrapper returning ``(output, attention_weights)``."""
    if mha.heads != heads:
        raise ValueError(f"module has {mha.heads} heads, asked for {heads}")
    out, cache = mha.forward(q, k, v, key_mask)
    return out, MultiHeadAttention.weights_from_cache(cache)


class EncoderBlock(Module):
    """Pre-norm transformer encoder block: x + MHA(LN(x)), then h + FF(LN(h))."""

    def __init__(self, name: str, dim: int, heads: int, ff_dim: int, rng, dtype=np.float32):
        super().__init__()
        self.ln1 = self._child(LayerNorm(f"{name}.ln1", dim, dtype))
        self.attn = self._child(MultiHeadAttention(f"{name}.attn", dim, heads, rng, dtype))
        self.ln2 = self._child(LayerNorm(f"{name}.ln2", dim, dtype))
        self.ff1 = self._child(Dense(f"{name}.ff1", dim, ff_dim, rng, dtype))
        self.ff2 = self._child(Dense(f"{name}.ff2", ff_dim, dim, rng, dtype))

    def forward(self, x, key_mask):
        a, c1 = self.ln1.forward(x)
        m, c2 = self.attn.forward(a, a, a, key_mask)
        h = x + m
        b, c3 = self.ln2.forward(h)
        f, c4 = self.ff1.forward(b)
        g, c5 = gelu_forward(f)
        f2, c6 = self.ff2.forward(g)
        return h + f2, (c1, c2, c3, c4, c5, c6)

    def backward(self, dout, cache):
        c1, c2, c3, c4, c5, c6 = cache
        dg = self.ff2.backward(dout, c6)
        db = self.ff1.backward(gelu_backward(dg, c5), c4)
        dh = dout + self.ln2.backward(db, c3)
        dq, dk, dv = self.attn.backward(dh, c2)
        return dh + self.ln1.backward(dq + dk + dv, c1)


# ---------------------------------------------------------------------------
# Optimiser


@numba.njit(cache=True, fastmath=True)
def _adam_update(value, grad, m, v, b1, b2, step_size, eps_hat, decay):
    for i in range(value.size):
        if decay:
            # flush instead of decaying into float32 subnormals
            value[i] = 0.0 if abs(value[i]) < 1e-30 else value[i] - decay * value[i]
        g = float(grad[i])
        mi = b1 * m[i] + (1.0 - b1) * g
        vi = b2 * v[i] + (1.0 - b2) * g * g
        m[i] = mi
        v[i] = vi
        value[i] -= step_size * mi / (np.sqrt(vi) + eps_hat)


@dataclass
class Adam:
    """Adam with bias correction and optional decoupled weight decay.

    Moments are float64: float32 moments of dead units decay into subnormals,
    which are very slow on x86.
    """

    params: list[Param]
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.m:
            self.m = [np.zeros(p.value.size) for p in self.params]
            self.v = [np.zeros(p.value.size) for p in self.params]

    def step(self):
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient in parameter {p.name}")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        # lr * (m/c1) / (sqrt(v/c2) + eps) rewritten with the corrections folded into scalars
        step_size = self.lr * np.sqrt(c2) / c1
        eps_hat = self.eps * np.sqrt(c2)
        decay = self.lr * self.weight_decay
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.value.flags.c_contiguous:
                p.value = np.ascontiguousarray(p.value)
            _adam_update(p.value.reshape(-1), p.grad.reshape(-1), m, v, b1, b2, step_size, eps_hat, decay)


def adam_step(params: list[Param], state: Adam) -> list[Param]:
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("optimizer state was built for a different parameter list")
    state.step()
    return params


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + little-endian float32 blob

CKPT_FORMAT = "afa-checkpoint-1"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    entries, offset, chunks = [], 0, []
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "byte_offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": CKPT_FORMAT, "blob": blob_path.name, "meta": meta or {}, "tensors": entries}
    with open(blob_path, "wb") as fh:
        fh.write(b"".join(chunks))
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Returns ``(tensors, meta)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint manifest")
    blob = (path.parent / manifest["blob"]).read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = e["byte_offset"]
        if start + 4 * count > len(blob):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past the end of the blob")
        tensors[e["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape).copy()
    return tensors, manifest.get("meta", {})


# ---------------------------------------------------------------------------
# Finite-difference gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    failures: list[str]
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(model, batch, tolerance: float = 1e-4, step: float = 1e-5,
               floor: float = 1e-6, chunk: int = 64, max_entries: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Central differences against analytic gradients for every parameter entry.

    ``model`` must expose ``params()``, ``zero_grad()``, ``loss_and_backward(batch)``
    and ``loss(batch, lead)``. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``. ``max_entries`` optionally subsamples
    large tensors (all entries are checked by default).
    """
    params = model.params()
    bad_dtype = [p.name for p in params if p.value.dtype != np.float64]
    if bad_dtype:
        raise ValueError(f"grad_check needs float64 parameters; got other dtypes for {bad_dtype[:3]}")
    model.zero_grad()
    model.loss_and_backward(batch)
    rng = np.random.default_rng(seed)
    per_param, failures, n_checked = {}, [], 0
    for p in params:
        analytic = p.grad.reshape(-1).copy()
        base = p.value
        size = base.size
        entries = np.arange(size)
        if max_entries is not None and size > max_entries:
            entries = np.sort(rng.choice(size, max_entries, replace=False))
        numeric = np.empty(entries.size)
        try:
            for start in range(0, entries.size, chunk):
                idx = entries[start:start + chunk]
                k = idx.size
                stack = np.repeat(base.reshape(1, -1), 2 * k, axis=0)
                stack[np.arange(k), idx] += step
                stack[k + np.arange(k), idx] -= step
                p.value = stack.reshape((2 * k,) + base.shape)
                losses = np.asarray(model.loss(batch, lead=2 * k))
                numeric[start:start + k] = (losses[:k] - losses[k:]) / (2 * step)
        finally:
            p.value = base
        a = analytic[entries]
        rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        err = float(rel.max()) if rel.size else 0.0
        per_param[p.name] = err
        n_checked += entries.size
        if not err < tolerance:
            failures.append(p.name)
    return GradCheckReport(
        max_rel_error=max(per_param.values(), default=0.0),
        per_param=per_param,
        failures=failures,
        tolerance=tolerance,
        n_checked=n_checked,
    )
