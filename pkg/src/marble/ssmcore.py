"""Selective state-space sequence block with a linear-time scan.

The block is a simplified diagonal selective SSM: per-channel scalar
decay a < 0, input-dependent step delta through softplus, per-step input
and output maps B_t / C_t shared across channels, a multiplicative silu
gate, a skip path, and a residual connection. A naive O(T^2)
materialization of the same recurrence (`reference_scan`) serves as the
correctness oracle, and a plain quadratic self-attention layer is kept
around as the benchmark foil.
"""

from __future__ import annotations

import gc
import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DimensionError, DomainError
from .numerics import Tensor


@dataclass
class SsmBlockParams:
    """Trainable parameters of one sequence block (model width D, inner
    width E, state size N)."""

    w_in: Tensor      # (D, E)
    w_gate: Tensor    # (D, E)
    w_delta: Tensor   # (E, E)
    b_delta: Tensor   # (E,)
    w_b: Tensor       # (E, N)
    w_c: Tensor       # (E, N)
    a_log: Tensor     # (E,), decay = -exp(a_log)
    d_skip: Tensor    # (E,)
    w_out: Tensor     # (E, D)

    @property
    def d_model(self) -> int:
        return self.w_in.shape[0]

    @property
    def d_inner(self) -> int:
        return self.w_in.shape[1]

    @property
    def d_state(self) -> int:
        return self.w_b.shape[1]

    def named(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(prefix + name, getattr(self, name)) for name in
                ("w_in", "w_gate", "w_delta", "b_delta", "w_b", "w_c",
                 "a_log", "d_skip", "w_out")]


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_ssm_params(d_model: int, d_inner: int, d_state: int,
                    rng: np.random.Generator) -> SsmBlockParams:
    """Conventional stable init: small uniform projections, softplus step
    size starting in [0.01, 0.1], decay magnitudes log-spaced in [1, N]."""
    dt = np.exp(rng.uniform(np.log(0.01), np.log(0.1), size=d_inner))
    b_delta = np.log(np.expm1(dt))  # softplus(b_delta) == dt at zero input
    a_mag = np.exp(np.linspace(0.0, np.log(max(d_state, 2)), d_inner))
    return SsmBlockParams(
        w_in=_uniform(rng, d_model, (d_model, d_inner)),
        w_gate=_uniform(rng, d_model, (d_model, d_inner)),
        w_delta=_uniform(rng, d_inner, (d_inner, d_inner)),
        b_delta=Tensor(b_delta, requires_grad=True),
        w_b=_uniform(rng, d_inner, (d_inner, d_state)),
        w_c=_uniform(rng, d_inner, (d_inner, d_state)),
        a_log=Tensor(np.log(a_mag), requires_grad=True),
        d_skip=Tensor(np.ones(d_inner), requires_grad=True),
        w_out=_uniform(rng, d_inner, (d_inner, d_model)),
    )


def selective_scan(u: Tensor, delta: Tensor, b: Tensor, c: Tensor,
                   a: Tensor, d: Tensor) -> Tensor:
    """Linear-time recurrence over T steps.

    h[t] = exp(delta[t] * a) (.) h[t-1] + delta[t] * u[t] (x) b[t]
    y[t] = h[t] c[t] + d (.) u[t]

    with h in R^{E x N}, h[0-] = 0. Time Theta(T E N); the per-step states
    are saved only when gradients are being recorded.
    """
    ud, dd, bd, cd = u.data, delta.data, b.data, c.data
    ad, skip = a.data, d.data
    if ud.ndim != 2 or ud.shape[0] < 1:
        raise DimensionError(f"selective_scan needs (T, E) input, got {u.shape}")
    t_len, e_dim = ud.shape
    n_dim = bd.shape[1]
    if dd.shape != (t_len, e_dim) or bd.shape != (t_len, n_dim) \
            or cd.shape != (t_len, n_dim) or ad.shape != (e_dim,) \
            or skip.shape != (e_dim,):
        raise DimensionError("selective_scan: inconsistent operand shapes")
    if np.any(dd <= 0.0):
        raise DomainError("selective_scan: delta must be strictly positive")

    abar = np.exp(dd * ad)    # (T, E)
    du = dd * ud              # (T, E)
    y = np.empty_like(ud)
    needs_grad = nm.active_tape() is not None and any(
        t.requires_grad for t in (u, delta, b, c, a, d))

    h = np.zeros((e_dim, n_dim))
    hs = None
    if needs_grad:
        hs = np.empty((t_len, e_dim, n_dim))
        for t in range(t_len):
            h = abar[t][:, None] * h + du[t][:, None] * bd[t][None, :]
            hs[t] = h
            y[t] = h @ cd[t] + skip * ud[t]
    else:
        # in-place update buffers: the step body allocates nothing, which
        # keeps long-sequence inference timing linear instead of
        # allocator-bound
        inj = np.empty((e_dim, n_dim))
        tmp = np.empty(e_dim)
        for t in range(t_len):
            h *= abar[t][:, None]
            np.multiply(du[t][:, None], bd[t][None, :], out=inj)
            h += inj
            np.matmul(h, cd[t], out=y[t])
            np.multiply(skip, ud[t], out=tmp)
            y[t] += tmp

    def backward(gy):
        gu = gy * skip
        gskip = (gy * ud).sum(axis=0)
        gdelta = np.zeros_like(dd)
        gb = np.zeros_like(bd)
        gc = np.zeros_like(cd)
        ga = np.zeros_like(ad)
        carry = np.zeros((e_dim, n_dim))
        for t in range(t_len - 1, -1, -1):
            gh = carry + gy[t][:, None] * cd[t][None, :]
            gc[t] = gy[t] @ hs[t]
            h_prev = hs[t - 1] if t > 0 else np.zeros((e_dim, n_dim))
            g_abar = (gh * h_prev).sum(axis=1)
            gdelta[t] = g_abar * ad * abar[t]
            ga += g_abar * dd[t] * abar[t]
            s = gh @ bd[t]
            gdelta[t] += s * ud[t]
            gu[t] += s * dd[t]
            gb[t] = gh.T @ du[t]
            carry = gh * abar[t][:, None]
        return (gu, gdelta, gb, gc, ga, gskip)

    return nm.record_primitive("selective_scan", y, (u, delta, b, c, a, d),
                               backward)


def reference_scan(u, delta, b, c, a, d) -> np.ndarray:
    """Naive O(T^2) materialization of the scan (test oracle)."""
    u, delta, b, c = (np.asarray(x, dtype=np.float64) for x in (u, delta, b, c))
    a, d = np.asarray(a, dtype=np.float64), np.asarray(d, dtype=np.float64)
    t_len, e_dim = u.shape
    y = np.zeros_like(u)
    for t in range(t_len):
        for e in range(e_dim):
            acc = 0.0
            for s in range(t + 1):
                decay = 1.0
                for r in range(s + 1, t + 1):
                    decay *= np.exp(delta[r, e] * a[e])
                acc += float(np.dot(c[t], b[s])) * decay * delta[s, e] * u[s, e]
            y[t, e] = acc + d[e] * u[t, e]
    return y


def ssm_block_forward(x: Tensor, p: SsmBlockParams) -> Tensor:
    """One residual selective-SSM block applied to a (T, D) sequence."""
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"ssm_block_forward needs (T, D), got {x.shape}")
    u = nm.matmul(x, p.w_in)
    z = nm.matmul(x, p.w_gate)
    delta = nm.softplus(nm.add(nm.matmul(u, p.w_delta), p.b_delta))
    b = nm.matmul(u, p.w_b)
    c = nm.matmul(u, p.w_c)
    a = nm.scale(nm.exp(p.a_log), -1.0)
    s = selective_scan(u, delta, b, c, a, p.d_skip)
    o = nm.matmul(nm.mul(s, nm.silu(z)), p.w_out)
    return nm.add(x, o)


# ---------------------------------------------------------------------------
# quadratic self-attention reference (benchmark foil, forward only)


@dataclass
class AttentionRefParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray


def init_attention_params(d_model: int, rng: np.random.Generator) -> AttentionRefParams:
    bound = 1.0 / np.sqrt(d_model)
    mk = lambda: rng.uniform(-bound, bound, size=(d_model, d_model))
    return AttentionRefParams(mk(), mk(), mk(), mk())


def attention_ref_forward(x, p: AttentionRefParams,
                          row_block: int = 1024) -> np.ndarray:
    """Single softmax self-attention layer plus residual, Theta(T^2 D).

    Queries are processed in row blocks to bound the score-matrix memory;
    the result is identical to the dense computation.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if xd.ndim != 2 or xd.shape[0] < 1:
        raise DimensionError(f"attention needs (T, D) input, got {xd.shape}")
    t_len, d_model = xd.shape
    q, k, v = xd @ p.w_q, xd @ p.w_k, xd @ p.w_v
    scale = 1.0 / np.sqrt(d_model)
    out = np.empty_like(xd)
    for start in range(0, t_len, row_block):
        stop = min(start + row_block, t_len)
        scores = (q[start:stop] @ k.T) * scale
        scores -= scores.max(axis=1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=1, keepdims=True)
        out[start:stop] = weights @ v
    return xd + out @ p.w_o


# ---------------------------------------------------------------------------
# scaling benchmark


def scaling_bench(encoder: str, d_model: int, d_state: int,
                  t_values: list[int], repetitions: int = 5,
                  rng_seed: int = 0) -> list[dict]:
    """Median per-run CPU time per sequence length, inference mode.

    Returns one row per T: {encoder, T, median_ms, min_ms,
    ratio_vs_prev}. The ratio column reports median time(T) / median
    time(previous T); min_ms is the best repetition. Process CPU time is
    used rather than wall clock so scheduling gaps on busy or virtualized
    machines do not distort the scaling ratios.
    """
    if encoder not in ("scan", "attention"):
        raise ConfigError(f"unknown encoder kind '{encoder}'")
    if any(b <= a for a, b in zip(t_values, t_values[1:])):
        raise ConfigError("T values must be strictly increasing")
    if repetitions < 3:
        raise ConfigError("need at least 3 repetitions for a stable median")
    rng = np.random.default_rng(rng_seed)
    if encoder == "scan":
        params = init_ssm_params(d_model, 2 * d_model, d_state, rng)
        for _, t in params.named():
            t.requires_grad = False
        run = lambda x: ssm_block_forward(Tensor(x), params)
    else:
        params = init_attention_params(d_model, rng)
        run = lambda x: attention_ref_forward(x, params)

    rows: list[dict] = []
    prev_median = None
    for t_len in t_values:
        x = rng.standard_normal((t_len, d_model))
        run(x)  # warm-up
        times = []
        for _ in range(repetitions):
            gc.collect()
            gc.disable()  # collector pauses would charge longer runs more
            try:
                start = time.process_time()
                run(x)
                times.append((time.process_time() - start) * 1e3)
            finally:
                gc.enable()
        median = float(np.median(times))
        ratio = None if prev_median is None else median / prev_median
        rows.append({"encoder": encoder, "T": t_len,
                     "median_ms": median, "min_ms": float(min(times)),
                     "ratio_vs_prev": ratio})
        prev_median = median
    return rows
