"""Dense float64 tensors with tape-based reverse-mode differentiation.

The op set is deliberately small: linear maps, pointwise nonlinearities,
reductions, row gather/concat and the recurrent scan the network needs.
Tapes are rebuilt on every forward pass (define-by-run); a tensor that is
not attached to a tape behaves as a constant and never receives a gradient.
"""
from __future__ import annotations

import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import ndtr as _ndtr

from .errors import ContractError, DimensionError, NumericError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tape:
    """Append-only record of primitive ops; parents always precede children."""

    def __init__(self):
        self._nodes = []  # node_id -> (parent_ids, backward fn or None)

    def __len__(self):
        return len(self._nodes)

    def _record(self, parents, backward):
        self._nodes.append((parents, backward))
        return len(self._nodes) - 1

    def leaf(self, data) -> "DiffTensor":
        arr = np.asarray(data, dtype=np.float64)
        return DiffTensor(arr, self, self._record((), None))

    def backward(self, loss: Optional["DiffTensor"] = None) -> dict:
        """Reverse sweep from a scalar loss.

        Returns {node_id: gradient array} for every node reached. With no
        loss (or an empty tape) this is a no-op returning {}.
        """
        if loss is None or not self._nodes:
            return {}
        if loss.tape is not self:
            raise ContractError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {list(loss.data.shape)}"
            )
        grads = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            parents, backfn = self._nodes[nid]
            if backfn is None:
                continue
            pgrads = backfn(g)
            for pid, pg in zip(parents, pgrads):
                if pid < 0 or pg is None:
                    continue
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg
        return grads


class DiffTensor:
    """A float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: Optional[Tape] = None, node_id: Optional[int] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = "const" if self.tape is None else f"node {self.node_id}"
        return f"DiffTensor(shape={list(self.data.shape)}, {tag})"

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.data)

    # arithmetic sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(np.asarray(x, dtype=np.float64))


def _from_op(inputs: Sequence[DiffTensor], data: np.ndarray, backward: Callable) -> DiffTensor:
    tapes = {t.tape for t in inputs if t.tape is not None}
    if not tapes:
        return DiffTensor(data)
    if len(tapes) > 1:
        raise ContractError("operands belong to different tapes")
    tape = tapes.pop()
    parent_ids = tuple(t.node_id if t.tape is not None else -1 for t in inputs)
    return DiffTensor(data, tape, tape._record(parent_ids, backward))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient g back to `shape` under numpy broadcasting rules."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> DiffTensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _from_op((a, b), out, back)


def sub(a, b) -> DiffTensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _from_op((a, b), out, back)


def mul(a, b) -> DiffTensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _from_op((a, b), out, back)


def div(a, b) -> DiffTensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return _from_op((a, b), out, back)


def neg(a) -> DiffTensor:
    a = _lift(a)
    return _from_op((a,), -a.data, lambda g: (-g,))


_POINTWISE_KINDS = ("sigmoid", "softplus", "exp", "silu")


def pointwise(x, kind: str) -> DiffTensor:
    """Apply one of the supported nonlinearities elementwise."""
    if kind not in _POINTWISE_KINDS:
        raise ContractError(f"unsupported pointwise kind {kind!r}; expected one of {_POINTWISE_KINDS}")
    x = _lift(x)
    xd = x.data
    with np.errstate(over="ignore"):
        if kind == "sigmoid":
            out = 1.0 / (1.0 + np.exp(-xd))
            deriv = out * (1.0 - out)
        elif kind == "softplus":
            out = np.logaddexp(0.0, xd)
            deriv = 1.0 / (1.0 + np.exp(-xd))
        elif kind == "exp":
            out = np.exp(xd)
            deriv = out
        else:  # silu
            s = 1.0 / (1.0 + np.exp(-xd))
            out = xd * s
            deriv = s * (1.0 + xd * (1.0 - s))
    return _from_op((x,), out, lambda g: (g * deriv,))


def sigmoid(x):
    return pointwise(x, "sigmoid")


def softplus(x):
    return pointwise(x, "softplus")


def exp(x):
    return pointwise(x, "exp")


def silu(x):
    return pointwise(x, "silu")


def log(x) -> DiffTensor:
    x = _lift(x)
    xd = x.data
    return _from_op((x,), np.log(xd), lambda g: (g / xd,))


def ndtr(x) -> DiffTensor:
    """Standard normal CDF."""
    x = _lift(x)
    xd = x.data
    pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
    return _from_op((x,), _ndtr(xd), lambda g: (g * pdf,))


def clamp_min(x, floor: float) -> DiffTensor:
    """max(x, floor); gradient passes only where x > floor."""
    x = _lift(x)
    keep = x.data > floor
    return _from_op((x,), np.maximum(x.data, floor), lambda g: (g * keep,))


def lower_bound(x, floor: float) -> DiffTensor:
    """max(x, floor) whose gradient also passes, at clamped entries, when the
    descent direction pushes x back above the bound."""
    x = _lift(x)
    above = x.data > floor

    def back(g):
        return (g * (above | (g < 0)),)

    return _from_op((x,), np.maximum(x.data, floor), back)


def straight_through_round(x) -> DiffTensor:
    """Nearest-integer (ties to even) forward, identity gradient."""
    x = _lift(x)
    return _from_op((x,), np.rint(x.data), lambda g: (g,))


def rms_norm_rows(x, eps: float = 1e-6) -> DiffTensor:
    """Scale each row of x [n, c] to unit root-mean-square."""
    x = _lift(x)
    xd = x.data
    if xd.ndim != 2:
        raise DimensionError(f"rms_norm_rows expects a matrix, got {list(xd.shape)}")
    c = xd.shape[1]
    r = np.sqrt((xd * xd).mean(axis=1, keepdims=True) + eps)
    y = xd / r

    def back(g):
        dot = (g * xd).sum(axis=1, keepdims=True)
        return ((g - xd * (dot / (c * r * r))) / r,)

    return _from_op((x,), y, back)


# ---------------------------------------------------------------------------
# linear algebra / structure

def linear(x, w, b) -> DiffTensor:
    """x[n, d_in] @ w[d_in, d_out] + b[d_out]."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise DimensionError(
            f"linear: x {list(xd.shape)} incompatible with w {list(wd.shape)}"
        )
    if bd.shape != (wd.shape[1],):
        raise DimensionError(
            f"linear: bias {list(bd.shape)} incompatible with w {list(wd.shape)}"
        )
    out = xd @ wd + bd

    def back(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _from_op((x, w, b), out, back)


def matmul(a, b) -> DiffTensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise DimensionError(f"matmul: {list(ad.shape)} @ {list(bd.shape)}")
    return _from_op((a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def tsum(x, axis=None) -> DiffTensor:
    x = _lift(x)
    shape = x.data.shape
    out = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _from_op((x,), out, back)


def tmean(x, axis=None) -> DiffTensor:
    x = _lift(x)
    shape = x.data.shape
    n = x.data.size if axis is None else shape[axis]
    out = x.data.mean(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _from_op((x,), out, back)


def reshape(x, shape) -> DiffTensor:
    x = _lift(x)
    old = x.data.shape
    return _from_op((x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x) -> DiffTensor:
    x = _lift(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {list(x.data.shape)}")
    return _from_op((x,), x.data.T.copy(), lambda g: (g.T.copy(),))


def gather_rows(x, idx) -> DiffTensor:
    """x[idx] along axis 0; duplicate indices accumulate in the gradient."""
    x = _lift(x)
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.data.shape

    def back(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _from_op((x,), x.data[idx], back)


def flip_rows(x) -> DiffTensor:
    x = _lift(x)
    return _from_op((x,), x.data[::-1].copy(), lambda g: (g[::-1].copy(),))


def concat_rows(parts: Iterable) -> DiffTensor:
    parts = [_lift(p) for p in parts]
    sizes = [p.data.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _from_op(tuple(parts), out, back)


def concat_cols(parts: Iterable) -> DiffTensor:
    parts = [_lift(p) for p in parts]
    sizes = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _from_op(tuple(parts), out, back)


# ---------------------------------------------------------------------------
# recurrent scan primitive

def scan_tokens(x, abar, bbar, cmat) -> DiffTensor:
    """Linear state-space recurrence along axis 0.

    x: [L, C]; abar, bbar, cmat: [L, H]. Per lane c (lanes independent):
        h_t = abar_t * h_{t-1} + bbar_t * x[t, c],  h_0 = 0
        y[t, c] = <cmat_t, h_t>
    """
    x, abar, bbar, cmat = _lift(x), _lift(abar), _lift(bbar), _lift(cmat)
    xd, ad, bd, cd = x.data, abar.data, bbar.data, cmat.data
    if xd.ndim != 2:
        raise DimensionError(f"scan_tokens: x must be [L, C], got {list(xd.shape)}")
    L, C = xd.shape
    if L < 1:
        raise ContractError("scan_tokens: empty sequence")
    H = ad.shape[1]
    for name, arr in (("abar", ad), ("bbar", bd), ("cmat", cd)):
        if arr.shape != (L, H):
            raise DimensionError(f"scan_tokens: {name} must be [{L}, {H}], got {list(arr.shape)}")

    hs = np.empty((L, C, H))
    y = np.empty((L, C))
    h = np.zeros((C, H))
    for t in range(L):
        h = h * ad[t] + xd[t][:, None] * bd[t]
        if not np.all(np.isfinite(h)):
            raise NumericError(f"scan_tokens: non-finite state at token {t}")
        hs[t] = h
        y[t] = h @ cd[t]

    def back(g):
        dx = np.empty((L, C))
        da = np.zeros((L, H))
        db = np.zeros((L, H))
        dc = np.zeros((L, H))
        dh = np.zeros((C, H))
        for t in range(L - 1, -1, -1):
            dh = dh + g[t][:, None] * cd[t]
            dc[t] = hs[t].T @ g[t]
            if t > 0:
                da[t] = (dh * hs[t - 1]).sum(axis=0)
            db[t] = dh.T @ xd[t]
            dx[t] = dh @ bd[t]
            dh = dh * ad[t]
        return dx, da, db, dc

    return _from_op((x, abar, bbar, cmat), y, back)


def zoh_factors(a, delta) -> tuple:
    """Zero-order-hold discretization factors for a diagonal system.

    a: [H] (negative), delta: [L] (positive). Returns (abar, phi), both [L, H]:
        abar = exp(delta a)
        phi  = (exp(delta a) - 1) / a, with the series limit
               phi = delta (1 + delta a / 2) when |delta a| < 1e-6.
    The discrete input map is bbar = phi * B.
    """
    a, delta = _lift(a), _lift(delta)
    ad = a.data
    dshape = delta.data.shape
    dd = delta.data.reshape(-1)
    u = dd[:, None] * ad[None, :]
    abar = np.exp(u)
    small = np.abs(u) < 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        phi_exact = (abar - 1.0) / ad[None, :]
    phi = np.where(small, dd[:, None] * (1.0 + 0.5 * u), phi_exact)

    def back_abar(g):
        da = (g * dd[:, None] * abar).sum(axis=0)
        ddelta = (g * ad[None, :] * abar).sum(axis=1)
        return da, ddelta.reshape(dshape)

    def back_phi(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            dphi_da_exact = (dd[:, None] * abar - phi) / ad[None, :]
        dphi_da = np.where(small, 0.5 * dd[:, None] ** 2, dphi_da_exact)
        da = (g * dphi_da).sum(axis=0)
        ddelta = (g * abar).sum(axis=1)
        return da, ddelta.reshape(dshape)

    out_abar = _from_op((a, delta), abar, lambda g: back_abar(g))
    out_phi = _from_op((a, delta), phi, lambda g: back_phi(g))
    return out_abar, out_phi


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints

class Parameter:
    """A named, persistent float64 array optimized across training steps."""

    __slots__ = ("name", "data")

    def __init__(self, name: str, data):
        self.name = name
        self.data = np.asarray(data, dtype=np.float64)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={list(self.data.shape)})"


class Context:
    """Binds persistent Parameters to leaves of one per-forward tape.

    With tape=None every bound parameter is a detached constant, which gives
    a pure-numpy inference path through the same model code.
    """

    def __init__(self, tape: Optional[Tape] = None):
        self.tape = tape
        self._leaves = {}
        self.bound = {}  # node_id -> Parameter (taped mode only)
        self.touched = set()  # parameter names read through this context

    def p(self, param: Parameter) -> DiffTensor:
        t = self._leaves.get(id(param))
        if t is None:
            self.touched.add(param.name)
            if self.tape is None:
                t = DiffTensor(param.data)
            else:
                t = self.tape.leaf(param.data)
                self.bound[t.node_id] = param
            self._leaves[id(param)] = t
        return t

    def const(self, arr) -> DiffTensor:
        return DiffTensor(arr)

    def param_grads(self, grads: dict) -> dict:
        """Map a Tape.backward result onto {param_name: grad}."""
        out = {}
        for nid, param in self.bound.items():
            g = grads.get(nid)
            if g is not None:
                out[param.name] = g
        return out


def adam_step(param: np.ndarray, grad: np.ndarray, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """One Adam update with bias correction; `state` holds m, v, t."""
    if param.shape != grad.shape:
        raise DimensionError(f"adam_step: param {list(param.shape)} vs grad {list(grad.shape)}")
    state["t"] += 1
    t = state["t"]
    state["m"] = beta1 * state["m"] + (1.0 - beta1) * grad
    state["v"] = beta2 * state["v"] + (1.0 - beta2) * grad * grad
    mhat = state["m"] / (1.0 - beta1 ** t)
    vhat = state["v"] / (1.0 - beta2 ** t)
    return param - lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over a set of Parameters; rejects steps with non-finite gradients."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {
            p.name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            for p in self.params
        }
        self.rejected = 0

    def step(self, grads: dict, lr: Optional[float] = None) -> bool:
        """Apply one update from {param_name: grad}. Returns False if rejected.

        Parameters absent from `grads` are skipped entirely (identical to a
        zero gradient while their moments are still zero)."""
        for g in grads.values():
            if not np.all(np.isfinite(g)):
                self.rejected += 1
                return False
        step_lr = self.lr if lr is None else lr
        for p in self.params:
            g = grads.get(p.name)
            if g is None:
                continue
            p.data = adam_step(p.data, g, self.state[p.name], step_lr,
                               self.beta1, self.beta2, self.eps)
        return True


CHECKPOINT_MAGIC = b"MGWT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Sequence[Parameter]) -> None:
    """Write parameters: magic, version u8, then per entry
    u16 name length + UTF-8 name, u8 rank, u32 dims, little-endian f64 data."""
    names = {}
    for p in params:
        if p.name in names:
            raise ContractError(f"duplicate parameter name {p.name!r}")
        names[p.name] = p
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", CHECKPOINT_VERSION))
        for name in sorted(names):
            p = names[name]
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", p.data.ndim))
            for d in p.data.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint into {name: float64 array}."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ContractError(f"not a checkpoint file (bad magic {blob[:4]!r})")
    version = blob[4]
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    pos = 5
    out = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rank = blob[pos]
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", blob, pos) if rank else ()
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        out[name] = arr.astype(np.float64)
    return out
