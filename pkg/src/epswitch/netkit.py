"""Small deterministic differentiable kernels on numpy arrays.

Reverse-mode gradients are implemented per-op on a single-use tape; there is
no external ML framework underneath. All math is float64 and single-threaded,
so repeated runs on identical inputs are bit-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

CHECK_FINITE = True


class NetkitError(Exception):
    pass


class ShapeError(NetkitError):
    pass


class NonFiniteError(NetkitError):
    pass


class CheckpointError(NetkitError):
    pass


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


class Var:
    """Node in a single-use computation tape.

    ``value`` is a numpy array, ``grad`` is populated by ``backward``.
    Custom ops construct a Var with the parent nodes and a closure that maps
    the incoming gradient to per-parent gradients.
    """

    __slots__ = ("value", "grad", "_parents", "_backward", "_hook")

    def __init__(self, value, parents=(), backward=None, hook=None):
        self.value = _as_array(value)
        if CHECK_FINITE and not np.all(np.isfinite(self.value)):
            raise NonFiniteError("non-finite value entering the tape")
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self._hook = hook

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value)

    def backward(self, seed=None):
        run_backward(self, seed)


def constant(x):
    return Var(x)


def run_backward(root, seed=None):
    """Reverse-mode pass from ``root``; accumulates into Var.grad and hooks."""
    if seed is None:
        seed = np.ones_like(root.value)
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    grads = {id(root): _as_array(seed)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g
        if node._backward is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        if node._hook is not None:
            node._hook(g)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops


def add(a: Var, b: Var) -> Var:
    y = a.value + b.value

    def bw(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Var(y, (a, b), bw)


def mul(a: Var, b: Var) -> Var:
    y = a.value * b.value

    def bw(g):
        return (_unbroadcast(g * b.value, a.value.shape),
                _unbroadcast(g * a.value, b.value.shape))

    return Var(y, (a, b), bw)


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return Var(a.value * c, (a,), lambda g: (g * c,))


def tanh_v(a: Var) -> Var:
    y = np.tanh(a.value)
    return Var(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid_v(a: Var) -> Var:
    y = _sigmoid(a.value)
    return Var(y, (a,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z):
    """Numerically stable softmax over the last axis (plain numpy)."""
    z = np.asarray(z, dtype=np.float64)
    if np.isnan(z).any():
        raise NonFiniteError("NaN input to softmax")
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    if np.isnan(z).any():
        raise NonFiniteError("NaN input to log_softmax")
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def log_softmax_v(z: Var) -> Var:
    """Log-softmax over the last axis, any rank."""
    y = log_softmax(z.value)
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Var(y, (z,), bw)


# ---------------------------------------------------------------------------
# dense / conv / recurrent kernels


def dense_forward(x: Var, W: Var, b: Var) -> Var:
    """y = W x + b for a vector x, or row-wise X W^T + b for a (T, in) matrix."""
    xv, Wv, bv = x.value, W.value, b.value
    if Wv.ndim != 2 or bv.shape != (Wv.shape[0],):
        raise ShapeError(f"dense: W {Wv.shape} incompatible with b {bv.shape}")
    if xv.ndim == 1:
        if xv.shape[0] != Wv.shape[1]:
            raise ShapeError(f"dense: x {xv.shape} vs W {Wv.shape}")
        y = Wv @ xv + bv

        def bw(g):
            return Wv.T @ g, np.outer(g, xv), g

    elif xv.ndim == 2:
        if xv.shape[1] != Wv.shape[1]:
            raise ShapeError(f"dense: x {xv.shape} vs W {Wv.shape}")
        y = xv @ Wv.T + bv

        def bw(g):
            return g @ Wv, g.T @ xv, g.sum(axis=0)

    else:
        raise ShapeError(f"dense: x must be 1-D or 2-D, got {xv.shape}")
    return Var(y, (x, W, b), bw)


def causal_conv(x: Var, K: Var) -> Var:
    """Depthwise causal convolution: y[t] = sum_j K[j] * x[t-j], x[<0] = 0."""
    xv, Kv = x.value, K.value
    if xv.ndim != 2 or Kv.ndim != 2 or Kv.shape[1] != xv.shape[1]:
        raise ShapeError(f"causal_conv: x {xv.shape} vs K {Kv.shape}")
    T = xv.shape[0]
    k = Kv.shape[0]
    y = np.zeros_like(xv)
    for j in range(k):
        if j == 0:
            y += Kv[0] * xv
        elif j < T:
            y[j:] += Kv[j] * xv[:-j]

    def bw(g):
        dK = np.zeros_like(Kv)
        dx = np.zeros_like(xv)
        for j in range(k):
            if j == 0:
                dK[0] = (g * xv).sum(axis=0)
                dx += Kv[0] * g
            elif j < T:
                dK[j] = (g[j:] * xv[:-j]).sum(axis=0)
                dx[:-j] += Kv[j] * g[j:]
        return dx, dK

    return Var(y, (x, K), bw)


def lstm_cell_step(x, state, W, b):
    """One LSTM step in plain numpy (streaming inference path).

    ``state`` is (h, c); ``W`` is (4H, D+H) with gate rows ordered i, f, g, o;
    returns (y, (h', c')) with y = h'.
    """
    h, c = state
    x = np.asarray(x, dtype=np.float64)
    H = h.shape[0]
    if W.shape != (4 * H, x.shape[0] + H) or b.shape != (4 * H,):
        raise ShapeError(f"lstm_cell_step: W {W.shape} vs x {x.shape}, H {H}")
    z = W @ np.concatenate([x, h]) + b
    i = _sigmoid(z[:H])
    f = _sigmoid(z[H:2 * H])
    g = np.tanh(z[2 * H:3 * H])
    o = _sigmoid(z[3 * H:])
    c2 = f * c + i * g
    h2 = o * np.tanh(c2)
    return h2, (h2, c2)


def lstm_layer(xs: Var, W: Var, b: Var) -> Var:
    """Full LSTM layer over a (T, D) sequence with zero initial state.

    Forward matches repeated ``lstm_cell_step``; backward is hand-rolled BPTT.
    Returns the (T, H) hidden-state sequence.
    """
    xv, Wv, bv = xs.value, W.value, b.value
    if xv.ndim != 2:
        raise ShapeError(f"lstm_layer: xs must be 2-D, got {xv.shape}")
    T, D = xv.shape
    if Wv.shape[0] % 4 != 0 or bv.shape != (Wv.shape[0],):
        raise ShapeError(f"lstm_layer: W {Wv.shape} vs b {bv.shape}")
    H = Wv.shape[0] // 4
    if Wv.shape[1] != D + H:
        raise ShapeError(f"lstm_layer: W {Wv.shape} vs input dim {D}, H {H}")

    hs = np.zeros((T, H))
    cache = []
    h = np.zeros(H)
    c = np.zeros(H)
    for t in range(T):
        xh = np.concatenate([xv[t], h])
        z = Wv @ xh + bv
        i = _sigmoid(z[:H])
        f = _sigmoid(z[H:2 * H])
        g = np.tanh(z[2 * H:3 * H])
        o = _sigmoid(z[3 * H:])
        c_prev = c
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[t] = h
        cache.append((xh, i, f, g, o, c_prev, tc))

    def bw(gout):
        dW = np.zeros_like(Wv)
        db = np.zeros_like(bv)
        dxs = np.zeros_like(xv)
        dh_next = np.zeros(H)
        dc_next = np.zeros(H)
        for t in range(T - 1, -1, -1):
            xh, i, f, g, o, c_prev, tc = cache[t]
            dh = gout[t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            dc_next = dc * f
            dz = np.concatenate([
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ])
            dW += np.outer(dz, xh)
            db += dz
            dxh = Wv.T @ dz
            dxs[t] = dxh[:D]
            dh_next = dxh[D:]
        return dxs, dW, db

    return Var(hs, (xs, W, b), bw)


def stack_pairs(x: Var) -> Var:
    """Stack consecutive frame pairs: (T, D) -> (ceil(T/2), 2D).

    An odd-length tail is zero-padded before stacking.
    """
    xv = x.value
    if xv.ndim != 2 or xv.shape[0] == 0:
        raise ShapeError(f"stack_pairs: need nonempty (T, D), got {xv.shape}")
    T, D = xv.shape
    T2 = (T + 1) // 2
    padded = xv if T % 2 == 0 else np.vstack([xv, np.zeros((1, D))])
    y = padded.reshape(T2, 2 * D)

    def bw(g):
        dx = g.reshape(2 * T2, D)
        return (dx[:T],)

    return Var(y, (x,), bw)


def embed_rows(table: Var, ids) -> Var:
    """Gather and concatenate embedding rows: ids (N, m) -> (N, m*E)."""
    ids = np.asarray(ids, dtype=np.int64)
    tv = table.value
    if ids.ndim != 2:
        raise ShapeError(f"embed_rows: ids must be 2-D, got {ids.shape}")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= tv.shape[0]:
        raise ShapeError("embed_rows: id out of range for embedding table")
    N, m = ids.shape
    E = tv.shape[1]
    y = tv[ids].reshape(N, m * E)

    def bw(g):
        dt = np.zeros_like(tv)
        gr = g.reshape(N, m, E)
        np.add.at(dt, ids, gr)
        return (dt,)

    return Var(y, (table,), bw)


def joiner_lattice(enc: Var, pred: Var, We: Var, Wp: Var, b1: Var,
                   Wo: Var, b2: Var) -> Var:
    """Transducer joiner over the full lattice.

    logits[t, u] = Wo tanh(We enc[t] + Wp pred[u] + b1) + b2, shaped
    (T, U+1, K). Backward is fused by hand so the whole lattice is one op.
    """
    ev, pv = enc.value, pred.value
    A = ev @ We.value.T
    B = pv @ Wp.value.T
    Hpre = A[:, None, :] + B[None, :, :] + b1.value
    Hth = np.tanh(Hpre)
    logits = Hth @ Wo.value.T + b2.value

    def bw(g):
        dWo = np.einsum("tuk,tuj->kj", g, Hth)
        db2 = g.sum(axis=(0, 1))
        dH = g @ Wo.value
        dpre = dH * (1.0 - Hth * Hth)
        dA = dpre.sum(axis=1)
        dB = dpre.sum(axis=0)
        db1 = dpre.sum(axis=(0, 1))
        return (dA @ We.value, dB @ Wp.value,
                dA.T @ ev, dB.T @ pv, db1, dWo, db2)

    return Var(logits, (enc, pred, We, Wp, b1, Wo, b2), bw)


# ---------------------------------------------------------------------------
# parameter store


class ParamStore:
    """Named parameter arrays with matching gradient accumulators."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name, value):
        if name in self.params:
            raise NetkitError(f"parameter {name!r} already registered")
        v = _as_array(value).copy()
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite initial value for {name!r}")
        self.params[name] = v
        self.grads[name] = np.zeros_like(v)

    def leaf(self, name) -> Var:
        value = self.params[name]

        def hook(g):
            if g.shape != value.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} != param {name!r} {value.shape}")
            self.grads[name] += g

        return Var(value, hook=hook)

    def names(self):
        return list(self.params)

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, v in self.params.items():
            out.add(name, v)
        return out

    def __contains__(self, name):
        return name in self.params


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst_param: str | None
    per_param: dict = field(default_factory=dict)


def grad_check(f, store: ParamStore, eps=1e-4, tol=1e-4, param_names=None):
    """Compare analytic gradients of scalar ``f(store)`` to central differences.

    Returns a per-parameter report; passes iff every max relative error is
    below ``tol``.
    """
    def scalar(out):
        v = np.asarray(out.value)
        if v.size != 1:
            raise ShapeError(f"grad_check objective must be scalar, got {v.shape}")
        return float(v.reshape(()))

    names = list(param_names) if param_names is not None else store.names()
    store.zero_grads()
    out = f(store)
    val = scalar(out)
    if not np.isfinite(val):
        raise NonFiniteError("objective is non-finite at the base point")
    out.backward()
    analytic = {n: store.grads[n].copy() for n in names}

    per_param = {}
    worst_name = None
    worst_err = 0.0
    for name in names:
        p = store.params[name]
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        num_flat = numeric.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = scalar(f(store))
            flat[idx] = orig - eps
            lo = scalar(f(store))
            flat[idx] = orig
            num_flat[idx] = (hi - lo) / (2.0 * eps)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1.0)
        err = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
        per_param[name] = err
        if err > worst_err:
            worst_err = err
            worst_name = name
    store.zero_grads()
    return GradCheckReport(passed=worst_err < tol, max_rel_err=worst_err,
                           worst_param=worst_name, per_param=per_param)


# ---------------------------------------------------------------------------
# parameter serialization

_CKPT_VERSION = 1


def params_to_jsonable(store: ParamStore):
    return {
        name: {"shape": list(v.shape), "data": v.ravel().tolist()}
        for name, v in store.params.items()
    }


def params_from_jsonable(payload) -> ParamStore:
    store = ParamStore()
    for name, entry in payload.items():
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise CheckpointError(
                f"parameter {name!r}: {data.size} values for shape {shape}")
        store.add(name, data.reshape(shape))
    return store


def _payload_checksum(obj):
    blob = json.dumps(obj, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_params(store: ParamStore, path, extra=None):
    body = {"params": params_to_jsonable(store)}
    if extra is not None:
        body["extra"] = extra
    payload = {
        "version": _CKPT_VERSION,
        "checksum": _payload_checksum(body),
        **body,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_params(path):
    """Load a checkpoint; returns (store, extra)."""
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if payload["version"] != _CKPT_VERSION:
        raise CheckpointError(
            f"{path}: version {payload['version']} != {_CKPT_VERSION}")
    body = {"params": payload.get("params", {})}
    if "extra" in payload:
        body["extra"] = payload["extra"]
    if _payload_checksum(body) != payload.get("checksum"):
        raise CheckpointError(f"{path}: checksum mismatch (corrupt file)")
    store = params_from_jsonable(payload["params"])
    return store, payload.get("extra")
