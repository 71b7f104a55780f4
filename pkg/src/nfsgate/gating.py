"""One group of feature gates: binarize functions, masking, sparsity penalty, init."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import sigmoid

GUMBEL_U_EPS = 1e-12
GAMMA_START = 1e-3
GAMMA_END = 1e-4


@dataclass
class GateInitSpec:
    mode: str = "constant"  # or "random"
    p: float = 0.8
    c: float = 0.01
    constant_value: float | None = None

    def __post_init__(self):
        if self.mode not in ("constant", "random"):
            raise ValueError(f"unknown gate init mode {self.mode!r}")
        if not 0 < self.p < 1:
            raise ValueError("open fraction p must lie in (0, 1)")
        if self.c <= 0:
            raise ValueError("magnitude c must be positive")
        if self.constant_value is None:
            self.constant_value = self.c * self.p

    @property
    def support(self) -> tuple[float, float]:
        return -self.c * (1 - self.p), self.c * self.p


@dataclass
class GateGroup:
    alpha: np.ndarray
    kind: str = "ste"
    temperature: float = GAMMA_START

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64).copy()
        if self.kind not in ("ste", "gumbel"):
            raise ValueError(f"unknown binarize kind {self.kind!r}")
        if self.kind == "gumbel" and not self.temperature > 0:
            raise ValueError("gumbel temperature must be positive")

    def __len__(self):
        return len(self.alpha)

    def decisions(self) -> np.ndarray:
        """Hard open/closed state of every gate (sign of alpha)."""
        return binarize_ste(self.alpha)

    def open_count(self) -> int:
        return int(np.count_nonzero(self.alpha > 0))


def binarize_ste(alpha) -> np.ndarray:
    """Step function; its declared backward is the identity."""
    return (np.asarray(alpha, dtype=np.float64) > 0).astype(np.float64)


def binarize_ste_backward(d_gate):
    return np.asarray(d_gate, dtype=np.float64)


def gumbel_noise_pair(rng: np.random.Generator, size) -> tuple[np.ndarray, np.ndarray]:
    return rng.random(size), rng.random(size)


def binarize_gumbel(alpha, gamma: float, rng: np.random.Generator | None = None,
                    u: tuple | None = None) -> np.ndarray:
    """Gumbel-Sigmoid relaxation ``sigmoid((alpha + g_k - g_l) / gamma)``.

    Pass ``u=(u_k, u_l)`` to force the uniform draws; otherwise they come
    from ``rng``.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    alpha = np.asarray(alpha, dtype=np.float64)
    if u is None:
        u = gumbel_noise_pair(rng, alpha.shape)
    uk, ul = (np.clip(np.asarray(x, dtype=np.float64), GUMBEL_U_EPS, 1 - GUMBEL_U_EPS) for x in u)
    gk = -np.log(-np.log(uk))
    gl = -np.log(-np.log(ul))
    return sigmoid((alpha + gk - gl) / gamma)


def binarize_gumbel_backward(gate: np.ndarray, gamma: float, d_gate) -> np.ndarray:
    return np.asarray(d_gate) * gate * (1.0 - gate) / gamma


@dataclass
class GateContext:
    """What ``apply_gates_backward`` needs from the forward pass."""
    gates: np.ndarray
    emb: np.ndarray
    kind: str
    gamma: float = 1.0
    extra: dict = field(default_factory=dict)


def gate_values(group: GateGroup, rng: np.random.Generator | None = None) -> np.ndarray:
    if group.kind == "ste":
        return binarize_ste(group.alpha)
    # one noise draw per field per forward pass
    return binarize_gumbel(group.alpha, group.temperature, rng)


def apply_gates(emb: np.ndarray, group: GateGroup, rng: np.random.Generator | None = None,
                gates: np.ndarray | None = None) -> tuple[np.ndarray, GateContext]:
    """Scale each field slice of ``emb`` (batch, M, V) by its gate."""
    if emb.shape[1] != len(group):
        raise ValueError(f"gate group has {len(group)} gates, embeddings have {emb.shape[1]} fields")
    g = gate_values(group, rng) if gates is None else np.asarray(gates, dtype=np.float64)
    return emb * g[None, :, None], GateContext(g, emb, group.kind, group.temperature)


def apply_gates_backward(ctx: GateContext, d_masked: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (d_emb, d_alpha)."""
    d_emb = d_masked * ctx.gates[None, :, None]
    d_gate = np.einsum("bmv,bmv->m", d_masked, ctx.emb)
    if ctx.kind == "ste":
        d_alpha = binarize_ste_backward(d_gate)
    else:
        d_alpha = binarize_gumbel_backward(ctx.gates, ctx.gamma, d_gate)
    return d_emb, d_alpha


def sparse_regularizer(group: GateGroup, target: int) -> tuple[float, np.ndarray]:
    """Open-gate count when above ``target`` (else 0) and its surrogate gradient.

    The count is differentiated through the identity surrogate, so every
    alpha receives gradient 1 while over target.  Callers scale by beta_s.
    """
    m = len(group)
    if not 0 < target <= m:
        raise ValueError(f"target must lie in [1, {m}], got {target}")
    count = group.open_count()
    if count > target:
        return float(count), np.ones(m)
    return 0.0, np.zeros(m)


def init_gates(spec: GateInitSpec, num_fields: int, rng: np.random.Generator | int,
               kind: str = "ste") -> GateGroup:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if spec.mode == "random":
        lo, hi = spec.support
        alpha = rng.uniform(lo, hi, size=num_fields)
    else:
        alpha = np.full(num_fields, float(spec.constant_value))
    return GateGroup(alpha, kind)


def anneal_temperature(step: int, total_steps: int, start: float = GAMMA_START,
                       end: float = GAMMA_END) -> float:
    """Geometric interpolation from ``start`` at step 0 to ``end`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return start
    return float(start * (end / start) ** (step / total_steps))
