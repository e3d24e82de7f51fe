"""Network building blocks: two-hidden-layer MLPs, a GRU cell, Adam, checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from volcast import autodiff as ad
from volcast.tree import tree_items, tree_map

CHECKPOINT_MAGIC = b"VOLCAST1"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = {"tanh": ad.tanh, "sigmoid": ad.sigmoid, "softplus": ad.softplus, "linear": None}


@dataclass
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    out_act: str = "linear"
    hidden_act: str = "tanh"

    @property
    def n_in(self):
        return self.w1.shape[1]

    @property
    def n_out(self):
        return self.w3.shape[0]


@dataclass
class GruParams:
    """GRU weights; ``w_*`` act on the input, ``u_*`` on the previous state."""

    w_update: np.ndarray
    u_update: np.ndarray
    b_update: np.ndarray
    w_reset: np.ndarray
    u_reset: np.ndarray
    b_reset: np.ndarray
    w_cand: np.ndarray
    u_cand: np.ndarray
    b_cand: np.ndarray

    @property
    def n_in(self):
        return self.w_update.shape[1]

    @property
    def n_hidden(self):
        return self.u_update.shape[0]


def _act(name, x):
    fn = _ACTIVATIONS[name]
    return x if fn is None else fn(x)


def mlp_forward(p, x):
    """h1 = act(W1 x + b1); h2 = act(W2 h1 + b2); out = outact(W3 h2 + b3).

    ``x`` is ``(n_in, batch)``; parameters may be arrays or recorded nodes.
    """
    n_in = ad.value(p.w1).shape[1]
    if ad.value(x).shape[0] != n_in:
        raise ad.ShapeError("mlp_forward", ad.value(p.w1).shape, ad.value(x).shape)
    h = _act(p.hidden_act, ad.add(ad.matmul(p.w1, x), p.b1))
    h = _act(p.hidden_act, ad.add(ad.matmul(p.w2, h), p.b2))
    return _act(p.out_act, ad.add(ad.matmul(p.w3, h), p.b3))


def gru_step(p, h_prev, x):
    """One GRU update with the convention h = u*h_prev + (1-u)*h_cand.

    The reset gate scales the previous state before the candidate's
    recurrent matrix: h_cand = tanh(Wc x + Uc (r*h_prev) + bc).
    """
    hv, xv = ad.value(h_prev), ad.value(x)
    uv = ad.value(p.u_update)
    if xv.shape[0] != ad.value(p.w_update).shape[1] or hv.shape[0] != uv.shape[0]:
        raise ad.ShapeError("gru_step", uv.shape, hv.shape, xv.shape)
    u = ad.sigmoid(ad.add(ad.add(ad.matmul(p.w_update, x), ad.matmul(p.u_update, h_prev)), p.b_update))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(p.w_reset, x), ad.matmul(p.u_reset, h_prev)), p.b_reset))
    cand = ad.tanh(
        ad.add(ad.add(ad.matmul(p.w_cand, x), ad.matmul(p.u_cand, ad.mul(r, h_prev))), p.b_cand)
    )
    return ad.add(ad.mul(u, h_prev), ad.mul(ad.sub(1.0, u), cand))


def glorot(fan_in, fan_out, rng):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_out, fan_in))


def init_mlp(n_in, width, n_out, rng, out_act="linear", hidden_act="tanh"):
    if min(n_in, width, n_out) < 1:
        raise ValueError("layer sizes must be positive")
    return MlpParams(
        w1=glorot(n_in, width, rng),
        b1=np.zeros((width, 1)),
        w2=glorot(width, width, rng),
        b2=np.zeros((width, 1)),
        w3=glorot(width, n_out, rng),
        b3=np.zeros((n_out, 1)),
        out_act=out_act,
        hidden_act=hidden_act,
    )


def init_gru(n_in, n_hidden, rng):
    if min(n_in, n_hidden) < 1:
        raise ValueError("layer sizes must be positive")
    kw = {}
    for gate in ("update", "reset", "cand"):
        kw[f"w_{gate}"] = glorot(n_in, n_hidden, rng)
        kw[f"u_{gate}"] = glorot(n_hidden, n_hidden, rng)
        kw[f"b_{gate}"] = np.zeros((n_hidden, 1))
    return GruParams(**kw)


# --- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    m: object
    v: object
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    zeros = tree_map(np.zeros_like, params)
    return AdamState(m=zeros, v=tree_map(np.zeros_like, params), lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state, params, grads):
    """Bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t

    def check(p, g):
        if p.shape != g.shape:
            raise ad.ShapeError("adam_step", p.shape, g.shape)
        return g

    grads = tree_map(check, params, grads)
    m = tree_map(lambda m_, g: b1 * m_ + (1.0 - b1) * g, state.m, grads)
    v = tree_map(lambda v_, g: b2 * v_ + (1.0 - b2) * g * g, state.v, grads)
    new = tree_map(
        lambda p, m_, v_: p - state.lr * (m_ / c1) / (np.sqrt(v_ / c2) + state.eps), params, m, v
    )
    return new, AdamState(m=m, v=v, step=t, lr=state.lr, beta1=b1, beta2=b2, eps=state.eps)


# --- checkpoints ------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params, meta=None):
    """Write ``params`` as VOLCAST1 magic, a JSON manifest, then raw little-endian f64.

    Layout: 8-byte magic, u64 LE manifest length, UTF-8 JSON manifest, then
    each array's data in manifest order (row-major).
    """
    items = list(tree_items(params))
    manifest = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in items],
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for _, a in items:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Return ``(meta, {name: array})`` preserving manifest order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a VOLCAST1 checkpoint")
    (n,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16:16 + n].decode("utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    offset = 16 + n
    arrays = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 8
        chunk = blob[offset:offset + size]
        if len(chunk) != size:
            raise CheckpointError(f"{path}: truncated at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += size
    if offset != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after last array")
    return manifest["meta"], arrays


def load_into(template, arrays):
    """Fill a parameter tree of the right structure from named arrays."""
    names = [name for name, _ in tree_items(template)]
    if names != list(arrays):
        raise CheckpointError("checkpoint layout does not match the model template")
    it = iter(arrays.values())

    def fill(leaf):
        a = next(it)
        if a.shape != leaf.shape:
            raise CheckpointError(f"shape mismatch: {a.shape} vs {leaf.shape}")
        return a

    return tree_map(fill, template)
