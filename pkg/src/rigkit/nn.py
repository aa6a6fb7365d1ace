"""Minimal differentiable-array core.

Dense arrays are plain C-contiguous numpy arrays (float32 in production;
the gradient-check harness may run everything in float64). Every primitive
ships a closed-form backward; composite blocks chain those backwards in
reverse order explicitly — there is no general autodiff tape.

Reductions over more than 4096 elements accumulate in 64-bit to bound drift.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InputError, StateError

_BIG_REDUCTION = 4096
CHECKPOINT_MAGIC = "RIGKIT-CKPT-1"


def _sum_stable(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    """Sum, accumulating in float64 when the reduced extent is large."""
    n = x.size if axis is None else x.shape[axis]
    if x.dtype == np.float32 and n > _BIG_REDUCTION:
        return np.sum(x, axis=axis, keepdims=keepdims,
                      dtype=np.float64).astype(np.float32)
    return np.sum(x, axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: Optional[np.ndarray] = None
    m: Optional[np.ndarray] = None   # Adam first moment
    v: Optional[np.ndarray] = None   # Adam second moment

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g.astype(self.value.dtype, copy=False).reshape(self.value.shape)


class ParamStore:
    """Named parameters with matching gradient buffers and Adam state.

    Iteration is by sorted name, so updates and checkpoints are
    order-deterministic regardless of construction order.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self._params: dict[str, Param] = {}
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.step_count = 0
        self.frozen: set[str] = set()

    def add(self, name: str, shape, init: str = "linear",
            fan_in: Optional[int] = None) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            value = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            value = np.ones(shape, dtype=self.dtype)
        elif init == "linear":
            fan = fan_in if fan_in is not None else shape[0]
            bound = 1.0 / np.sqrt(max(fan, 1))
            value = self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        elif init == "gauss":
            value = (self.rng.standard_normal(shape) * 0.02).astype(self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Param(name=name, value=value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def params(self) -> list[Param]:
        return [self._params[n] for n in self.names()]

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = np.zeros_like(p.value)

    def freeze(self, prefixes) -> None:
        """Exclude every parameter whose name starts with any prefix from updates."""
        for name in self.names():
            if any(name.startswith(pre) for pre in prefixes):
                self.frozen.add(name)

    def unfreeze_all(self) -> None:
        self.frozen.clear()

    def trainable_names(self) -> list[str]:
        return [n for n in self.names() if n not in self.frozen]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: self._params[n].value.copy() for n in self.names()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        missing = set(self.names()) - set(tensors)
        extra = set(tensors) - set(self.names())
        if missing or extra:
            raise InputError(f"checkpoint mismatch: missing={sorted(missing)} "
                             f"unexpected={sorted(extra)}")
        for name, arr in tensors.items():
            p = self._params[name]
            if tuple(arr.shape) != p.value.shape:
                raise InputError(f"shape mismatch for {name}: "
                                 f"{arr.shape} vs {p.value.shape}")
            p.value = arr.astype(self.dtype).copy()


def adam_step(store: ParamStore, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Standard Adam update over all trainable parameters."""
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p in store.params():
        if p.grad is None:
            raise StateError(f"parameter {p.name} has no gradient")
        if p.name in store.frozen:
            continue
        if p.m is None:
            p.m = np.zeros_like(p.value)
            p.v = np.zeros_like(p.value)
        g = p.grad
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        mhat = p.m / bc1
        vhat = p.v / bc2
        p.value = p.value - (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.dtype)


def lr_schedule(step: int, total_steps: int,
                peak: float = 1e-4, floor: float = 1e-5) -> float:
    """Linear warm-up to the peak over the first 1% of steps, then cosine
    decay down to the floor at the final step."""
    if not (0 <= step <= total_steps):
        raise ValueError("step outside [0, total_steps]")
    warm = 0.01 * total_steps
    if warm > 0 and step <= warm:
        return peak * step / warm
    denom = max(total_steps - warm, 1e-12)
    progress = (step - warm) / denom
    return floor + 0.5 * (peak - floor) * (1.0 + np.cos(np.pi * progress))


# ---------------------------------------------------------------------------
# Functional primitives (forward + closed-form backward)
# ---------------------------------------------------------------------------

def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    return x @ w + b


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = (dy2 @ w.T).reshape(x.shape)
    return dx, dw, db


def softmax_forward(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.subtract(x, m)
    np.exp(e, out=e)
    e /= _sum_stable(e, axis=axis, keepdims=True)
    return e


def softmax_backward(dy: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    out = dy - _sum_stable(dy * y, axis=axis, keepdims=True)
    out *= y
    return out


def layer_norm_forward(x: np.ndarray, g: Optional[np.ndarray] = None,
                       b: Optional[np.ndarray] = None, eps: float = 1e-6):
    """Normalize the last axis to zero mean / unit variance, then optional affine.

    Returns (y, cache); the variance is floored through eps so constant rows
    normalize to zeros instead of dividing by zero.
    """
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    s = np.sqrt(var + eps)
    xhat = xc / s
    y = xhat if g is None else xhat * g + b
    return y, (xhat, s)


def layer_norm_backward(dy: np.ndarray, cache, g: Optional[np.ndarray] = None):
    xhat, s = cache
    if g is None:
        dxhat = dy
        dg = db = None
    else:
        dxhat = dy * g
        axes = tuple(range(dy.ndim - 1))
        dg = np.sum(dy * xhat, axis=axes)
        db = np.sum(dy, axis=axes)
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) / s
    return dx, dg, db


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu_forward(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    u = _GELU_C * (x + _GELU_A * x * x2)
    np.tanh(u, out=u)
    return 0.5 * x * (1.0 + u)


def gelu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    x2 = x * x
    u = _GELU_C * (x + _GELU_A * x * x2)
    t = np.tanh(u, out=u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def attention_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                      mask: Optional[np.ndarray], heads: int):
    """Scaled dot-product multi-head attention on already-projected inputs.

    q: (Nq, C), k/v: (Nk, C), mask: optional (Nq, Nk) booleans (True = may
    attend). Masked keys receive exactly zero weight. Returns (out, cache).
    """
    nq, c = q.shape
    nk = k.shape[0]
    if c % heads != 0:
        raise ValueError(f"C={c} not divisible by heads={heads}")
    if k.shape != (nk, c) or v.shape != (nk, c):
        raise ValueError("k and v must share shape (Nk, C)")
    dh = c // heads
    scale = 1.0 / np.sqrt(dh)
    # fold the score scale into the small query side before the big matmul
    qs = np.ascontiguousarray((q * scale).reshape(nq, heads, dh).transpose(1, 0, 2))
    kh = np.ascontiguousarray(k.reshape(nk, heads, dh).transpose(1, 0, 2))
    vh = np.ascontiguousarray(v.reshape(nk, heads, dh).transpose(1, 0, 2))
    scores = qs @ kh.transpose(0, 2, 1)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (nq, nk):
            raise ValueError(f"mask shape {mask.shape} != ({nq}, {nk})")
        if not mask.any(axis=1).all():
            raise ValueError("attention mask has a fully-masked query row")
        scores = np.where(mask[None], scores, -np.inf)
    probs = softmax_forward(scores, axis=-1)
    out = (probs @ vh).transpose(1, 0, 2).reshape(nq, c)
    return out, (qs, kh, vh, probs, dh)


def attention_backward(dout: np.ndarray, cache):
    qs, kh, vh, probs, dh = cache
    heads, nq, _ = qs.shape
    nk = kh.shape[1]
    c = heads * dh
    scale = 1.0 / np.sqrt(dh)
    do = np.ascontiguousarray(dout.reshape(nq, heads, dh).transpose(1, 0, 2))
    dp = do @ vh.transpose(0, 2, 1)
    dv = probs.transpose(0, 2, 1) @ do
    ds = softmax_backward(dp, probs, axis=-1)
    dq = (ds @ kh) * scale            # scale on the small query side only
    dk = ds.transpose(0, 2, 1) @ qs   # qs already carries the scale
    to_flat = lambda a, n: a.transpose(1, 0, 2).reshape(n, c)
    return to_flat(dq, nq), to_flat(dk, nk), to_flat(dv, nk)


def positional_encoding(p: np.ndarray, c: int) -> np.ndarray:
    """Sinusoidal code of 3-D positions: per axis, sin/cos at frequencies
    2^0 .. 2^(C/6 - 1), interleaved. Requires C divisible by 6."""
    if c % 6 != 0:
        raise ValueError(f"encoding width {c} not divisible by 6")
    p = np.asarray(p)
    if p.shape[-1] != 3:
        raise ValueError("positions must have a trailing axis of 3")
    nf = c // 6
    freqs = (2.0 ** np.arange(nf)).astype(p.dtype)
    ang = p[..., :, None] * freqs            # (..., 3, nf)
    out = np.empty(p.shape[:-1] + (c,), dtype=p.dtype)
    inter = out.reshape(p.shape[:-1] + (3, nf, 2))
    inter[..., 0] = np.sin(ang)
    inter[..., 1] = np.cos(ang)
    return out


# ---------------------------------------------------------------------------
# Layer objects (bind parameters from a store; caches passed explicitly)
# ---------------------------------------------------------------------------

class Linear:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int,
                 init: str = "linear"):
        self.w = store.add(f"{name}.W", (cin, cout), init=init, fan_in=cin)
        self.b = store.add(f"{name}.b", (cout,),
                           init="zeros" if init in ("zeros", "gauss") else "linear",
                           fan_in=cin)

    def forward(self, x):
        return linear_forward(x, self.w.value, self.b.value), x

    def backward(self, dy, cache):
        dx, dw, db = linear_backward(dy, cache, self.w.value)
        self.w.add_grad(dw)
        self.b.add_grad(db)
        return dx


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, c: int):
        self.g = store.add(f"{name}.g", (c,), init="ones")
        self.b = store.add(f"{name}.b", (c,), init="zeros")

    def forward(self, x):
        return layer_norm_forward(x, self.g.value, self.b.value)

    def backward(self, dy, cache):
        dx, dg, db = layer_norm_backward(dy, cache, self.g.value)
        self.g.add_grad(dg)
        self.b.add_grad(db)
        return dx


class MultiHeadAttention:
    """In-projections + scaled dot-product attention + out-projection."""

    def __init__(self, store: ParamStore, name: str, c: int, heads: int):
        self.heads = heads
        self.wq = Linear(store, f"{name}.wq", c, c)
        self.wk = Linear(store, f"{name}.wk", c, c)
        self.wv = Linear(store, f"{name}.wv", c, c)
        self.wo = Linear(store, f"{name}.wo", c, c)

    def forward(self, q_in, kv_in, mask=None):
        q, cq = self.wq.forward(q_in)
        k, ck = self.wk.forward(kv_in)
        v, cv = self.wv.forward(kv_in)
        att, ca = attention_forward(q, k, v, mask, self.heads)
        out, co = self.wo.forward(att)
        return out, (cq, ck, cv, ca, co)

    def backward(self, dout, cache):
        cq, ck, cv, ca, co = cache
        datt = self.wo.backward(dout, co)
        dq, dk, dv = attention_backward(datt, ca)
        dq_in = self.wq.backward(dq, cq)
        dkv = self.wk.backward(dk, ck) + self.wv.backward(dv, cv)
        return dq_in, dkv


class FeedForward:
    def __init__(self, store: ParamStore, name: str, c: int, hidden: int):
        self.lin1 = Linear(store, f"{name}.lin1", c, hidden)
        self.lin2 = Linear(store, f"{name}.lin2", hidden, c)

    def forward(self, x):
        h, c1 = self.lin1.forward(x)
        a = gelu_forward(h)
        y, c2 = self.lin2.forward(a)
        return y, (c1, h, c2)

    def backward(self, dy, cache):
        c1, h, c2 = cache
        da = self.lin2.backward(dy, c2)
        dh = gelu_backward(da, h)
        return self.lin1.backward(dh, c1)


class CrossBlock:
    """Pre-LN residual block: x + MHA(LN(x), LN(kv)) followed by x + FFN(LN(x))."""

    def __init__(self, store: ParamStore, name: str, c: int, heads: int,
                 ffn_mult: int = 2):
        self.ln_q = LayerNorm(store, f"{name}.ln_q", c)
        self.ln_kv = LayerNorm(store, f"{name}.ln_kv", c)
        self.mha = MultiHeadAttention(store, f"{name}.mha", c, heads)
        self.ln_f = LayerNorm(store, f"{name}.ln_f", c)
        self.ffn = FeedForward(store, f"{name}.ffn", c, ffn_mult * c)

    def forward(self, x, kv, mask=None):
        aq, c1 = self.ln_q.forward(x)
        akv, c2 = self.ln_kv.forward(kv)
        att, c3 = self.mha.forward(aq, akv, mask)
        h = x + att
        fin, c4 = self.ln_f.forward(h)
        f, c5 = self.ffn.forward(fin)
        return h + f, (c1, c2, c3, c4, c5)

    def backward(self, dy, cache):
        c1, c2, c3, c4, c5 = cache
        dfin = self.ffn.backward(dy, c5)
        dh = dy + self.ln_f.backward(dfin, c4)
        daq, dakv = self.mha.backward(dh, c3)
        dx = dh + self.ln_q.backward(daq, c1)
        dkv = self.ln_kv.backward(dakv, c2)
        return dx, dkv


class SelfBlock:
    """Pre-LN residual self-attention block with optional attention mask."""

    def __init__(self, store: ParamStore, name: str, c: int, heads: int,
                 ffn_mult: int = 2):
        self.ln = LayerNorm(store, f"{name}.ln", c)
        self.mha = MultiHeadAttention(store, f"{name}.mha", c, heads)
        self.ln_f = LayerNorm(store, f"{name}.ln_f", c)
        self.ffn = FeedForward(store, f"{name}.ffn", c, ffn_mult * c)

    def forward(self, x, mask=None):
        a, c1 = self.ln.forward(x)
        att, c2 = self.mha.forward(a, a, mask)
        h = x + att
        fin, c3 = self.ln_f.forward(h)
        f, c4 = self.ffn.forward(fin)
        return h + f, (c1, c2, c3, c4)

    def backward(self, dy, cache):
        c1, c2, c3, c4 = cache
        dfin = self.ffn.backward(dy, c4)
        dh = dy + self.ln_f.backward(dfin, c3)
        dq, dkv = self.mha.backward(dh, c2)
        return dh + self.ln.backward(dq + dkv, c1)


class MLP:
    """Two-layer row-wise MLP (used by the bone attribute encoders)."""

    def __init__(self, store: ParamStore, name: str, cin: int, hidden: int,
                 cout: int):
        self.lin1 = Linear(store, f"{name}.lin1", cin, hidden)
        self.lin2 = Linear(store, f"{name}.lin2", hidden, cout)

    def forward(self, x):
        h, c1 = self.lin1.forward(x)
        a = gelu_forward(h)
        y, c2 = self.lin2.forward(a)
        return y, (c1, h, c2)

    def backward(self, dy, cache):
        c1, h, c2 = cache
        da = self.lin2.backward(dy, c2)
        dh = gelu_backward(da, h)
        return self.lin1.backward(dh, c1)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(store: ParamStore, path, meta: Optional[dict] = None) -> None:
    """Single-file checkpoint: magic line, manifest length, JSON manifest,
    then one little-endian binary blob of all tensors."""
    tensors = {}
    blob = bytearray()
    for name in store.names():
        arr = np.ascontiguousarray(store[name].value)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tensors[name] = {
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "offset": len(blob),
            "nbytes": le.nbytes,
        }
        blob.extend(le.tobytes())
    manifest = json.dumps({"tensors": tensors, "meta": meta or {}},
                          sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC.encode() + b"\n")
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        f.write(bytes(blob))


def load_checkpoint(path):
    """Returns (tensors dict, meta dict)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise InputError(f"cannot read checkpoint {path}: {e}") from e
    magic = CHECKPOINT_MAGIC.encode() + b"\n"
    if not raw.startswith(magic):
        raise InputError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    off = len(magic)
    (mlen,) = struct.unpack("<Q", raw[off:off + 8])
    off += 8
    manifest = json.loads(raw[off:off + mlen].decode())
    off += mlen
    blob = raw[off:]
    tensors = {}
    for name, rec in manifest["tensors"].items():
        dt = np.dtype(rec["dtype"]).newbyteorder("<")
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(rec["shape"], dtype=int)),
                            offset=rec["offset"]).reshape(rec["shape"])
        tensors[name] = arr.astype(rec["dtype"])
    return tensors, manifest.get("meta", {})
