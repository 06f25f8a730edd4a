# dyns latent graph - time-resolved functional graphs inferred from embeddings
#
#   h_{t,i} = phi(x)_{t,i}               shared encoder: grouped conv + ReLU,
#                                        lift to d_lat, self-attention over ROIs
#   G_t     = H_t H_t^T / sqrt(d_lat)    one dot product per ROI pair
#   x~_t    = G_t x_t                    (or softmax_rows(G_t) x_t)

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict

import numpy as np

import tensor_autodiff as ta
from data_pipeline import pearson_matrix, write_roi_csv
from errors import ConfigError, DimensionError, InputTooShortError
from tensor_autodiff import Tensor

logger = logging.getLogger(__name__)

# -----------------------------
# Config
# -----------------------------
D_LAT = 128                 # "latent embedding space of dimension 128"
KERNEL_SIZE = 3             # "kernel size 3"
CONV_CHANNELS = 8           # per-ROI conv feature maps
ATTENTION_HEADS = 4
FILTER_MODES = ("raw", "row_normalized")
FILTER_MODE = "row_normalized"


@dataclass
class NodeEncoderParams:
    """One parameter set shared by every ROI and time step."""

    conv_weight: Tensor     # (c, 1, k), tiled across ROI groups
    conv_bias: Tensor       # (c,)
    lift_weight: Tensor     # (d_lat, c)
    lift_bias: Tensor       # (d_lat,)
    w_query: Tensor         # (d_lat, d_lat)
    w_key: Tensor
    w_value: Tensor
    w_out: Tensor
    heads: int = ATTENTION_HEADS
    attention: bool = True

    @property
    def kernel_size(self) -> int:
        return self.conv_weight.shape[-1]

    @property
    def conv_channels(self) -> int:
        return self.conv_weight.shape[0]

    @property
    def d_lat(self) -> int:
        return self.lift_weight.shape[0]

    def parameters(self, prefix: str = "encoder") -> Dict[str, Tensor]:
        names = ("conv_weight", "conv_bias", "lift_weight", "lift_bias",
                 "w_query", "w_key", "w_value", "w_out")
        return {f"{prefix}.{n}": getattr(self, n) for n in names}


@dataclass
class DynGraphSequence:
    adjacency: Tensor       # (..., T, N, N)
    filtered: Tensor        # (..., T, N)
    embeddings: Tensor      # (..., T, N, d_lat)


def init_node_encoder(rng: np.random.Generator, d_lat: int = D_LAT, conv_channels: int = CONV_CHANNELS,
                      kernel_size: int = KERNEL_SIZE, heads: int = ATTENTION_HEADS,
                      attention: bool = True) -> NodeEncoderParams:
    if d_lat <= 0:
        raise ConfigError(f"d_lat must be positive, got {d_lat}")
    if d_lat % heads:
        raise ConfigError(f"d_lat={d_lat} is not divisible by {heads} attention heads")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    attn_scale = 1.0 / np.sqrt(d_lat)
    return NodeEncoderParams(
        conv_weight=ta.randn(rng, (conv_channels, 1, kernel_size), 1.0 / np.sqrt(kernel_size), True),
        conv_bias=ta.zeros((conv_channels,), True),
        lift_weight=ta.randn(rng, (d_lat, conv_channels), 1.0 / np.sqrt(conv_channels), True),
        lift_bias=ta.zeros((d_lat,), True),
        w_query=ta.randn(rng, (d_lat, d_lat), attn_scale, True),
        w_key=ta.randn(rng, (d_lat, d_lat), attn_scale, True),
        w_value=ta.randn(rng, (d_lat, d_lat), attn_scale, True),
        w_out=ta.randn(rng, (d_lat, d_lat), attn_scale, True),
        heads=heads,
        attention=attention,
    )


def _check_input(x: Tensor, params: NodeEncoderParams) -> None:
    if x.ndim < 2:
        raise DimensionError("expected (..., T, N) input", x.shape)
    if x.shape[-1] < 2:
        raise DimensionError("need at least 2 ROIs", x.shape)
    if x.shape[-2] < params.kernel_size:
        raise InputTooShortError(f"T={x.shape[-2]} is shorter than kernel_size={params.kernel_size}")


def conv_features(x: Tensor, params: NodeEncoderParams) -> Tensor:
    """Grouped conv (one group per ROI, shared kernel) + ReLU -> (..., T, N, c)."""
    _check_input(x, params)
    n_rois = x.shape[-1]
    weights = ta.tile_rows(params.conv_weight, n_rois)
    bias = ta.tile_rows(params.conv_bias, n_rois)
    out = ta.grouped_conv1d(x, params.kernel_size, weights, n_rois, bias=bias)
    return ta.relu(ta.reshape(out, x.shape + (params.conv_channels,)))


def roi_attention(h: Tensor, params: NodeEncoderParams) -> Tensor:
    """Self-attention across ROIs within each time step."""
    q = ta.linear(h, params.w_query)
    k = ta.linear(h, params.w_key)
    v = ta.linear(h, params.w_value)
    return ta.linear(ta.multi_head_attention(q, k, v, params.heads), params.w_out)


def encode_nodes(x: Tensor, params: NodeEncoderParams) -> Tensor:
    """phi: (..., T, N) -> (..., T, N, d_lat)."""
    h = ta.linear(conv_features(x, params), params.lift_weight, params.lift_bias)
    if params.attention:
        h = ta.add(h, roi_attention(h, params))
    return h


def infer_adjacency(h: Tensor) -> Tensor:
    """G = H H^T / sqrt(d_lat); the upper triangle is mirrored so G == G^T exactly."""
    d_lat = h.shape[-1]
    if d_lat <= 0:
        raise ConfigError("d_lat must be positive")
    gram = ta.matmul(h, ta.transpose(h))
    return ta.mul(ta.symmetrize_upper(gram), 1.0 / np.sqrt(d_lat))


def graph_filter(g: Tensor, x: Tensor, mode: str = FILTER_MODE) -> Tensor:
    """x~ = G x (raw) or softmax_rows(G) x (row_normalized), batched over leading axes."""
    if mode not in FILTER_MODES:
        raise ConfigError(f"unknown filter mode {mode!r}; expected one of {FILTER_MODES}")
    if g.ndim < 2 or g.shape[-1] != g.shape[-2] or g.shape[-1] != x.shape[-1] or g.shape[:-2] != x.shape[:-1]:
        raise DimensionError("graph_filter shapes disagree", g.shape, x.shape)
    weights = g if mode == "raw" else ta.softmax_rows(g)
    column = ta.reshape(x, x.shape + (1,))
    return ta.reshape(ta.matmul(weights, column), x.shape)


def encode_sequence(x: Tensor, params: NodeEncoderParams, mode: str = FILTER_MODE) -> DynGraphSequence:
    """Every time step gets its own graph; no sliding windows."""
    h = encode_nodes(x, params)
    g = infer_adjacency(h)
    return DynGraphSequence(adjacency=g, filtered=graph_filter(g, x, mode), embeddings=h)


# -----------------------------
# Static variants (ablation)
# -----------------------------
def static_adjacency(seq: DynGraphSequence) -> Tensor:
    """Time-mean of the learned latent graphs, (..., N, N)."""
    return ta.mean(seq.adjacency, axis=-3)


def pearson_adjacency(x: Tensor) -> Tensor:
    """Static Pearson correlation of (..., T, N); a constant, no gradient."""
    data = x.data
    if data.ndim == 2:
        return Tensor(pearson_matrix(data))
    flat = data.reshape((-1,) + data.shape[-2:])
    return Tensor(np.stack([pearson_matrix(m) for m in flat]).reshape(data.shape[:-2] + (data.shape[-1],) * 2))


def filter_static(g: Tensor, x: Tensor, mode: str = FILTER_MODE) -> Tensor:
    """Apply one graph (..., N, N) at every time step of x (..., T, N)."""
    T = x.shape[-2]
    lead = g.shape[:-2]
    tiled = ta.stack([g] * T, axis=len(lead))
    return graph_filter(tiled, x, mode)


# -----------------------------
# Debug dump
# -----------------------------
def dump_adjacency_csv(seq: DynGraphSequence, directory, prefix: str = "adjacency") -> int:
    """One CSV per time step (roi_i header, N rows). Returns files written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    adjacency = seq.adjacency.data
    if adjacency.ndim != 3:
        raise DimensionError("dump expects an unbatched (T, N, N) sequence", adjacency.shape)
    width = max(4, len(str(adjacency.shape[0] - 1)))
    for t, g in enumerate(adjacency):
        write_roi_csv(directory / f"{prefix}_t{t:0{width}d}.csv", g)
    logger.debug("wrote %d adjacency files to %s", adjacency.shape[0], directory)
    return adjacency.shape[0]


if __name__ == "__main__":
    rng = ta.make_rng(0)
    params = init_node_encoder(rng, d_lat=16)
    x = ta.randn(rng, (32, 8))
    seq = encode_sequence(x, params, mode="raw")
    g = seq.adjacency.data
    print(f"G sequence {g.shape}; symmetric: {np.array_equal(g, np.swapaxes(g, -1, -2))}")
    print(f"filtered {seq.filtered.shape}, mean |x~| = {np.abs(seq.filtered.data).mean():.3f}")
