"""Embedding layer, three interaction architectures and the binary checkpoint format.

Architectures (fixed, simplified):

* ``dcn``     -- two cross layers over the flattened embeddings in parallel with
  an MLP [64, 32]; a linear head reads their concatenation.
* ``deepfm``  -- order-2 FM term plus an MLP [64, 32] with a linear head,
  summed into one logit.
* ``autoint`` -- one single-head self-attention layer (key dim 8) with a
  projected residual and ReLU, flattened into a linear head.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from .tensor_core import (
    MLP,
    Linear,
    NumericalError,
    Parameters,
    bce_with_logits,
    check_finite,
    sigmoid,
)

MODEL_KINDS = ("dcn", "deepfm", "autoint")
HIDDEN = (64, 32)
ATTN_DIM = 8
EMB_STD = 0.01

CKPT_MAGIC = b"NFSCKPT1"
CKPT_VERSION = 1


def _finite(x, layer):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite output in layer {layer!r}")
    return x


class Embedding:
    """Per-field lookup tables ``emb.<field>`` of shape (vocab, V)."""

    def __init__(self, params: Parameters, fields: Sequence[int], vocab_sizes: Sequence[int],
                 dim: int, rng: np.random.Generator):
        self.params = params
        self.fields = list(fields)
        self.vocab_sizes = list(vocab_sizes)
        self.dim = dim
        self.names = [f"emb.{f}" for f in self.fields]
        self._offsets = np.concatenate([[0], np.cumsum(self.vocab_sizes)[:-1]]).astype(np.int64)
        for name, vocab in zip(self.names, self.vocab_sizes):
            params.add(name, rng.normal(0.0, EMB_STD, size=(vocab, dim)))
        self._idx = None

    def forward(self, indices: np.ndarray) -> np.ndarray:
        """``indices`` holds one column per active field, in ``self.fields`` order."""
        if indices.shape[1] != len(self.fields):
            raise ValueError(f"expected {len(self.fields)} index columns, got {indices.shape[1]}")
        for j, vocab in enumerate(self.vocab_sizes):
            col = indices[:, j]
            if col.size and (col.min() < 0 or col.max() >= vocab):
                raise IndexError(f"bucket index out of range for field {self.fields[j]}")
        self._idx = indices
        out = np.empty((indices.shape[0], len(self.fields), self.dim))
        for j, name in enumerate(self.names):
            out[:, j, :] = self.params[name][indices[:, j]]
        return out

    def backward(self, d_emb: np.ndarray) -> None:
        """Scatter-add row gradients; rows never looked up stay exactly zero."""
        b, m = self._idx.shape
        rows = (self._idx + self._offsets[None, :]).ravel()
        onehot = sparse.csr_matrix((np.ones(b * m), (rows, np.arange(b * m))),
                                   shape=(self._offsets[-1] + self.vocab_sizes[-1], b * m))
        dense = onehot @ d_emb.reshape(b * m, self.dim)
        for j, name in enumerate(self.names):
            lo = self._offsets[j]
            self.params.grads[name] += dense[lo:lo + self.vocab_sizes[j]]


class CrossLayer:
    """x_next = x0 * (x . w) + b + x"""

    def __init__(self, params: Parameters, name: str, dim: int, rng: np.random.Generator):
        limit = np.sqrt(6.0 / (dim + 1))
        self.w, self.b = f"{name}.w", f"{name}.b"
        params.add(self.w, rng.uniform(-limit, limit, size=dim))
        params.add(self.b, np.zeros(dim))
        self.params = params

    def forward(self, x0, x):
        self._x0, self._x = x0, x
        self._s = x @ self.params[self.w]
        return x0 * self._s[:, None] + self.params[self.b] + x

    def backward(self, dy):
        """Return (d_x0 contribution, d_x)."""
        ds = np.einsum("bd,bd->b", dy, self._x0)
        self.params.grads[self.w] += self._x.T @ ds
        self.params.grads[self.b] += dy.sum(axis=0)
        dx = dy + ds[:, None] * self.params[self.w][None, :]
        return dy * self._s[:, None], dx


class DCN:
    def __init__(self, params, num_fields, dim, rng, num_cross=2):
        d = num_fields * dim
        self.cross = [CrossLayer(params, f"dcn.cross{i}", d, rng) for i in range(num_cross)]
        self.deep = MLP(params, "dcn.mlp", [d, *HIDDEN], rng)
        self.head = Linear(params, "dcn.head", d + HIDDEN[-1], 1, rng)

    def forward(self, emb):
        b, m, v = emb.shape
        self._shape = emb.shape
        x0 = emb.reshape(b, m * v)
        x = x0
        for layer in self.cross:
            x = _finite(layer.forward(x0, x), "dcn.cross")
        h = _finite(self.deep.forward(x0), "dcn.mlp")
        self._split = x.shape[1]
        return _finite(self.head.forward(np.concatenate([x, h], axis=1))[:, 0], "dcn.head")

    def backward(self, dlogit):
        dz = self.head.backward(dlogit[:, None])
        dx, dh = dz[:, :self._split], dz[:, self._split:]
        dx0 = self.deep.backward(dh)
        for layer in reversed(self.cross):
            d0, dx = layer.backward(dx)
            dx0 = dx0 + d0
        return (dx0 + dx).reshape(self._shape)


def fm_interaction(emb: np.ndarray) -> np.ndarray:
    """Sum of pairwise dot products between field embeddings, per row."""
    s = emb.sum(axis=1)
    return 0.5 * (np.einsum("bv,bv->b", s, s) - np.einsum("bmv,bmv->b", emb, emb))


class DeepFM:
    def __init__(self, params, num_fields, dim, rng):
        d = num_fields * dim
        self.deep = MLP(params, "deepfm.mlp", [d, *HIDDEN], rng)
        self.head = Linear(params, "deepfm.head", HIDDEN[-1], 1, rng)

    def forward(self, emb):
        self._emb = emb
        b = emb.shape[0]
        fm = _finite(fm_interaction(emb), "deepfm.fm")
        h = _finite(self.deep.forward(emb.reshape(b, -1)), "deepfm.mlp")
        return _finite(fm + self.head.forward(h)[:, 0], "deepfm.head")

    def backward(self, dlogit):
        emb = self._emb
        d_fm = dlogit[:, None, None] * (emb.sum(axis=1, keepdims=True) - emb)
        dh = self.head.backward(dlogit[:, None])
        d_deep = self.deep.backward(dh).reshape(emb.shape)
        return d_fm + d_deep


class AutoInt:
    def __init__(self, params, num_fields, dim, rng, attn_dim=ATTN_DIM):
        self.params = params
        self.attn_dim = attn_dim
        limit = np.sqrt(6.0 / (dim + attn_dim))
        for w in ("q", "k", "v", "res"):
            params.add(f"autoint.{w}", rng.uniform(-limit, limit, size=(dim, attn_dim)))
        self.head = Linear(params, "autoint.head", num_fields * attn_dim, 1, rng)

    def forward(self, emb):
        p = self.params
        self._x = x = emb
        self._q = q = x @ p["autoint.q"]
        self._k = k = x @ p["autoint.k"]
        self._v = v = x @ p["autoint.v"]
        scores = np.einsum("bid,bjd->bij", q, k) / np.sqrt(self.attn_dim)
        scores -= scores.max(axis=-1, keepdims=True)
        a = np.exp(scores)
        a /= a.sum(axis=-1, keepdims=True)
        self._a = a
        pre = np.einsum("bij,bjd->bid", a, v) + x @ p["autoint.res"]
        self._mask = pre > 0
        out = _finite(np.where(self._mask, pre, 0.0), "autoint.attention")
        return _finite(self.head.forward(out.reshape(out.shape[0], -1))[:, 0], "autoint.head")

    def backward(self, dlogit):
        p, g = self.params, self.params.grads
        x, q, k, v, a = self._x, self._q, self._k, self._v, self._a
        dout = self.head.backward(dlogit[:, None]).reshape(self._mask.shape)
        dpre = np.where(self._mask, dout, 0.0)
        da = np.einsum("bid,bjd->bij", dpre, v)
        dv = np.einsum("bij,bid->bjd", a, dpre)
        dscores = a * (da - np.einsum("bij,bij->bi", da, a)[..., None])
        dscores /= np.sqrt(self.attn_dim)
        dq = np.einsum("bij,bjd->bid", dscores, k)
        dk = np.einsum("bij,bid->bjd", dscores, q)
        dx = dpre @ p["autoint.res"].T
        g["autoint.res"] += np.einsum("bmv,bmd->vd", x, dpre)
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            g[f"autoint.{name}"] += np.einsum("bmv,bmd->vd", x, dproj)
            dx += dproj @ p[f"autoint.{name}"].T
        return dx


_INTERACTIONS = {"dcn": DCN, "deepfm": DeepFM, "autoint": AutoInt}


class CTRModel:
    """Embedding tables plus one interaction architecture over ``fields``.

    ``fields`` lists the original field indices this model consumes; a
    retrained model over a selection never touches the other tables.
    """

    def __init__(self, kind: str, vocab_sizes: Sequence[int], dim: int = 8,
                 seed: int = 0, fields: Sequence[int] | None = None):
        if kind not in _INTERACTIONS:
            raise ValueError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
        self.kind = kind
        self.fields = list(range(len(vocab_sizes))) if fields is None else sorted(fields)
        self.dim = dim
        rng = np.random.default_rng(seed)
        self.params = Parameters()
        self.embedding = Embedding(self.params, self.fields,
                                   [vocab_sizes[f] for f in self.fields], dim, rng)
        self.interaction = _INTERACTIONS[kind](self.params, len(self.fields), dim, rng)

    @property
    def embedding_names(self) -> list[str]:
        return self.embedding.names

    def select(self, indices: np.ndarray) -> np.ndarray:
        return indices[:, self.fields]

    def embed(self, indices: np.ndarray) -> np.ndarray:
        return self.embedding.forward(self.select(indices))

    def forward(self, emb: np.ndarray) -> np.ndarray:
        """Logits for a batch of (possibly gated) embeddings."""
        check_finite(emb, "embeddings")
        return self.interaction.forward(emb)

    def backward(self, dlogit: np.ndarray) -> np.ndarray:
        return self.interaction.backward(dlogit)

    def predict_proba(self, indices: np.ndarray, batch_size: int = 8192) -> np.ndarray:
        out = [sigmoid(self.forward(self.embed(indices[s:s + batch_size])))
               for s in range(0, len(indices), batch_size)]
        return np.concatenate(out) if out else np.empty(0)


def training_objective(logits: np.ndarray, labels: np.ndarray, params: Parameters,
                       wd: float) -> tuple[float, np.ndarray]:
    """BCE plus ``wd * sum(param**2)`` over every tensor in ``params``.

    Returns the loss and d loss / d logits; the weight-decay gradient
    ``2 * wd * param`` is added straight into ``params.grads``.
    """
    if wd < 0:
        raise ValueError("weight decay must be >= 0")
    loss, dlogit = bce_with_logits(logits, labels)
    if wd > 0:
        for name, value in params.values.items():
            loss += wd * float(np.sum(value * value))
            params.grads[name] += 2.0 * wd * value
    return loss, dlogit


def save_checkpoint(path, arrays: "OrderedDict[str, np.ndarray] | dict[str, np.ndarray]") -> None:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 12, OrderedDict()
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    return out
