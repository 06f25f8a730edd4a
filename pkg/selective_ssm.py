# dyns selective SSM - input-selective diagonal state-space recurrence
#
#   delta_t = softplus(W_delta x~_t + delta_bias)          (per state channel)
#   A_t     = exp(-delta_t * softplus(a))                  in (0, 1)
#   B_t     = diag(delta_t) W_B                            (delta-modulated)
#   s_t     = A_t * s_{t-1} + B_t x~_t,   s_0 = 0
#
# Two backends: a left-to-right sequential scan (differentiable, reference)
# and a chunked work-efficient prefix scan over the affine operator
# (A2, b2) o (A1, b1) = (A2 * A1, A2 * b1 + b2) (forward only).

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

import tensor_autodiff as ta
from errors import ConfigError, DimensionError
from tensor_autodiff import Tensor

logger = logging.getLogger(__name__)

# -----------------------------
# Config
# -----------------------------
D_H = 16                    # latent state width
BLOCK_COUNT = 2             # "temporal encoder with two layers"
BACKENDS = ("sequential", "parallel")
BACKEND = "sequential"
CHUNK_SIZE = 64             # parallel scan chunk length (cache locality)
SCAN_WORKERS = 1
DECAY_RANGE = (1e-2, 1.0)   # initial softplus(a) spread across channels

BENCH_LENGTHS = (256, 512, 1024, 2048, 4096)
BENCH_REPEATS = 20


@dataclass
class SsmBlock:
    a: Tensor               # (d_h,) decay logits
    w_delta: Tensor         # (d_h, d_in)
    delta_bias: Tensor      # (d_h,)
    w_b: Tensor             # (d_h, d_in) base input projection
    w_out: Tensor           # (d_h, d_h) readout

    @property
    def d_h(self) -> int:
        return self.a.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_b.shape[1]


@dataclass
class SsmParams:
    blocks: List[SsmBlock] = field(default_factory=list)

    @property
    def d_h(self) -> int:
        return self.blocks[0].d_h

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    def parameters(self, prefix: str = "ssm") -> Dict[str, Tensor]:
        params = {}
        for i, block in enumerate(self.blocks):
            for name in ("a", "w_delta", "delta_bias", "w_b", "w_out"):
                params[f"{prefix}.block{i}.{name}"] = getattr(block, name)
        return params


@dataclass
class SsmStateSeq:
    states: Tensor          # (..., T, d_h); s_0 = 0 is implicit

    @property
    def length(self) -> int:
        return self.states.shape[-2]


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


def init_ssm(rng: np.random.Generator, d_in: int, d_h: int = D_H,
             block_count: int = BLOCK_COUNT) -> SsmParams:
    if d_h <= 0 or block_count < 1:
        raise ConfigError(f"need d_h > 0 and block_count >= 1 (got {d_h}, {block_count})")
    blocks = []
    width = d_in
    for _ in range(block_count):
        decay = np.geomspace(DECAY_RANGE[0], DECAY_RANGE[1], d_h)
        blocks.append(SsmBlock(
            a=ta.parameter(_inverse_softplus(decay)),
            w_delta=ta.randn(rng, (d_h, width), 0.1 / np.sqrt(width), True),
            delta_bias=ta.zeros((d_h,), True),
            w_b=ta.randn(rng, (d_h, width), 1.0 / np.sqrt(width), True),
            w_out=ta.randn(rng, (d_h, d_h), 1.0 / np.sqrt(d_h), True),
        ))
        width = d_h
    return SsmParams(blocks)


# -----------------------------
# Selective parameters
# -----------------------------
def make_selective_params(x_t: Tensor, block: SsmBlock) -> Tuple[Tensor, Tensor]:
    """(A_t diagonal (d_h,), B_t (d_h, N)) for one input vector x~_t."""
    if x_t.ndim != 1 or x_t.shape[0] != block.d_in:
        raise DimensionError("make_selective_params expects one input vector", x_t.shape, (block.d_in,))
    delta = ta.softplus(ta.linear(x_t, block.w_delta, block.delta_bias))
    a_diag = ta.exp(ta.neg(ta.mul(delta, ta.softplus(block.a))))
    b_t = ta.transpose(ta.mul(ta.transpose(block.w_b), delta))
    return a_diag, b_t


def selective_sequence(x: Tensor, block: SsmBlock) -> Tuple[Tensor, Tensor]:
    """Vectorized over time: A (..., T, d_h) and U = B_t x~_t (..., T, d_h)."""
    if x.shape[-1] != block.d_in:
        raise DimensionError("SSM input width", x.shape, (block.d_in,))
    delta = ta.softplus(ta.linear(x, block.w_delta, block.delta_bias))
    a = ta.exp(ta.neg(ta.mul(delta, ta.softplus(block.a))))
    u = ta.mul(delta, ta.linear(x, block.w_b))
    return a, u


def fixed_params_sequence(x: Tensor, block: SsmBlock) -> Tuple[Tensor, Tensor]:
    """S4-style: time-invariant A and B (delta from the bias only)."""
    delta = ta.softplus(block.delta_bias)
    a_vec = ta.exp(ta.neg(ta.mul(delta, ta.softplus(block.a))))
    u = ta.mul(ta.linear(x, block.w_b), delta)
    a = ta.mul(Tensor._wrap(np.ones(u.shape, dtype=u.data.dtype)), a_vec)
    return a, u


# -----------------------------
# Scan operator
# -----------------------------
def combine(later: Tuple[np.ndarray, np.ndarray], earlier: Tuple[np.ndarray, np.ndarray]):
    """(A2, b2) o (A1, b1) = (A2 * A1, A2 * b1 + b2): apply `earlier` first."""
    a2, b2 = later
    a1, b1 = earlier
    return a2 * a1, a2 * b1 + b2


def scan_recurrence_sequential(a: Tensor, u: Tensor) -> Tensor:
    """Left-to-right s_t = A_t * s_{t-1} + U_t (differentiable)."""
    return ta.linear_recurrence(a, u)


def _local_scan(a: np.ndarray, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # inclusive scan inside every chunk at once: arrays (chunks, C, ...)
    cum_a = np.empty_like(a)
    cum_b = np.empty_like(u)
    cum_a[:, 0] = a[:, 0]
    cum_b[:, 0] = u[:, 0]
    for j in range(1, a.shape[1]):
        cum_a[:, j] = a[:, j] * cum_a[:, j - 1]
        cum_b[:, j] = a[:, j] * cum_b[:, j - 1] + u[:, j]
    return cum_a, cum_b


def _exclusive_scan(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Blelloch up-sweep/down-sweep over chunk summaries (axis 0)."""
    n = a.shape[0]
    size = 1 << max(0, math.ceil(math.log2(n)))
    ea = np.ones((size,) + a.shape[1:], dtype=a.dtype)
    eb = np.zeros((size,) + b.shape[1:], dtype=b.dtype)
    ea[:n], eb[:n] = a, b

    stride = 2
    while stride <= size:
        right = np.arange(stride - 1, size, stride)
        left = right - stride // 2
        ea[right], eb[right] = combine((ea[right], eb[right]), (ea[left], eb[left]))
        stride *= 2

    ea[size - 1], eb[size - 1] = 1.0, 0.0
    stride = size
    while stride >= 2:
        right = np.arange(stride - 1, size, stride)
        left = right - stride // 2
        seg_a, seg_b = ea[left].copy(), eb[left].copy()
        ea[left], eb[left] = ea[right], eb[right]
        ea[right], eb[right] = combine((seg_a, seg_b), (ea[right], eb[right]))
        stride //= 2
    return ea[:n], eb[:n]


def scan_recurrence_parallel(a, u, chunk_size: int = CHUNK_SIZE, workers: int = SCAN_WORKERS) -> Tensor:
    """
    Same recurrence via chunked prefix scan; forward only. The operator tree
    depends on T and chunk_size alone, so results do not change with workers.
    """
    a = a.data if isinstance(a, Tensor) else np.asarray(a)
    u = u.data if isinstance(u, Tensor) else np.asarray(u)
    if a.shape != u.shape:
        raise DimensionError("scan operands differ", a.shape, u.shape)
    if chunk_size < 1:
        raise ConfigError(f"chunk_size must be positive, got {chunk_size}")

    a_t = np.moveaxis(a, -2, 0)
    u_t = np.moveaxis(u, -2, 0)
    T = a_t.shape[0]
    chunk = min(chunk_size, T)
    n_chunks = -(-T // chunk)
    pad = n_chunks * chunk - T
    if pad:
        a_t = np.concatenate([a_t, np.ones((pad,) + a_t.shape[1:], dtype=a_t.dtype)])
        u_t = np.concatenate([u_t, np.zeros((pad,) + u_t.shape[1:], dtype=u_t.dtype)])
    a_c = a_t.reshape((n_chunks, chunk) + a_t.shape[1:])
    u_c = u_t.reshape((n_chunks, chunk) + u_t.shape[1:])

    if workers > 1 and n_chunks > 1:
        bounds = np.linspace(0, n_chunks, min(workers, n_chunks) + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda lo_hi: _local_scan(a_c[lo_hi[0]:lo_hi[1]], u_c[lo_hi[0]:lo_hi[1]]),
                                  zip(bounds[:-1], bounds[1:])))
        cum_a = np.concatenate([p[0] for p in parts])
        cum_b = np.concatenate([p[1] for p in parts])
    else:
        cum_a, cum_b = _local_scan(a_c, u_c)

    _, carry = _exclusive_scan(cum_a[:, -1], cum_b[:, -1])
    states = cum_a * carry[:, None] + cum_b
    states = states.reshape((n_chunks * chunk,) + a_t.shape[1:])[:T]
    return Tensor._wrap(np.moveaxis(states, 0, -2))


def _scan(a: Tensor, u: Tensor, backend: str, workers: int = SCAN_WORKERS) -> Tensor:
    if backend == "sequential":
        return scan_recurrence_sequential(a, u)
    if backend == "parallel":
        return scan_recurrence_parallel(a, u, workers=workers)
    raise ConfigError(f"unknown scan backend {backend!r}; expected one of {BACKENDS}")


def scan_sequential(x: Tensor, block: SsmBlock) -> SsmStateSeq:
    a, u = selective_sequence(x, block)
    return SsmStateSeq(scan_recurrence_sequential(a, u))


def scan_parallel(x: Tensor, block: SsmBlock) -> SsmStateSeq:
    a, u = selective_sequence(x, block)
    return SsmStateSeq(scan_recurrence_parallel(a, u))


def ssm_forward(x: Tensor, params: SsmParams, backend: str = BACKEND, selective: bool = True,
                workers: int = SCAN_WORKERS) -> Tensor:
    """
    Stacked blocks with residual connections after the first:
    y_1 = W_out S_1, y_b = y_{b-1} + W_out S_b(y_{b-1}). Returns (..., T, d_h).
    `selective=False` swaps in time-invariant (S4-style) parameters. `workers`
    threads the local chunk scans of the parallel backend.
    """
    if x.shape[-2] < 1:
        raise DimensionError("empty sequence", x.shape)
    params_for = selective_sequence if selective else fixed_params_sequence
    h = x
    for i, block in enumerate(params.blocks):
        a, u = params_for(h, block)
        y = ta.linear(_scan(a, u, backend, workers), block.w_out)
        h = y if i == 0 else ta.add(h, y)
    return h


# -----------------------------
# Benchmark
# -----------------------------
def benchmark_scan(lengths: Iterable[int] = BENCH_LENGTHS, backends: Sequence[str] = BACKENDS,
                   repeats: int = BENCH_REPEATS, d_h: int = D_H, seed: int = 0,
                   workers: int = SCAN_WORKERS) -> List[Dict[str, float]]:
    """Wall-clock per (T, backend): median / p10 / p90 in nanoseconds."""
    rng = ta.make_rng(seed)
    rows = []
    for T in lengths:
        a = Tensor._wrap(rng.uniform(0.05, 0.95, (T, d_h)))
        u = Tensor._wrap(rng.standard_normal((T, d_h)))
        for backend in backends:
            if backend == "sequential":
                run = lambda: scan_recurrence_sequential(a, u)  # noqa: E731
            elif backend == "parallel":
                run = lambda: scan_recurrence_parallel(a, u, workers=workers)  # noqa: E731
            else:
                raise ConfigError(f"unknown scan backend {backend!r}")
            run()
            samples = []
            for _ in range(repeats):
                start = time.perf_counter_ns()
                run()
                samples.append(time.perf_counter_ns() - start)
            p10, median, p90 = np.percentile(samples, [10, 50, 90])
            rows.append({"T": int(T), "backend": backend, "median_ns": int(median),
                         "p10_ns": int(p10), "p90_ns": int(p90)})
            logger.info("scan-bench T=%d %s median %.3f ms", T, backend, median / 1e6)
    return rows


if __name__ == "__main__":
    rng = ta.make_rng(3)
    params = init_ssm(rng, d_in=8, d_h=16)
    x = ta.randn(rng, (300, 8))
    seq = ssm_forward(x, params, "sequential").data
    par = ssm_forward(x, params, "parallel").data
    print(f"backend max abs difference: {np.max(np.abs(seq - par)):.2e}")
    for row in benchmark_scan(lengths=(1024, 2048), repeats=5):
        print(row)
