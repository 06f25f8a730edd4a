# dyns token alignment - brain-summary tokens, frozen surrogate LM, LoRA
#
#   Z_brain = proj(softmax(Q S^T / sqrt(d_h)) S)   K learned queries over T states
#   [Z_brain ; embed(prompt)] -> frozen pre-LN transformer (+ LoRA on attention)
#   final position -> trainable head -> logits [ASD, TC]

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import tensor_autodiff as ta
from data_pipeline import Label
from errors import ConfigError, ContractError, DimensionError, LengthError
from tensor_autodiff import Tensor

logger = logging.getLogger(__name__)

# -----------------------------
# Config
# -----------------------------
D_K = 64                    # surrogate embedding width
TOKEN_COUNT = 8             # K brain-summary tokens
LORA_RANK = 16              # "rank r=16"
LORA_ALPHA = 32.0           # "scaling factor alpha=32"
LORA_DROPOUT = 0.1          # "dropout 0.1"
LORA_TARGETS = ("query", "value")
PROJECTIONS = ("query", "key", "value", "out")

VOCAB_SIZE = 64
SURROGATE_BLOCKS = 2
SURROGATE_HEADS = 4
FFN_MULT = 4
CONTEXT_CAP = 64
SURROGATE_SEED = 1729       # frozen weights are a pure function of this seed
_SURROGATE_STREAM = 9001

# fixed "diagnostic instruction" as token ids; no tokenizer
PROMPT_IDS = (3, 17, 42, 8, 23, 5, 61, 12, 30, 7, 19, 2)

VERDICT_TEMPLATE = "Classification leaning toward {label} ({confidence:.1f}% confidence)."


# -----------------------------
# Types
# -----------------------------
@dataclass
class BrainTokens:
    z: Tensor               # (..., K, d_k)

    @property
    def count(self) -> int:
        return self.z.shape[-2]

    @property
    def width(self) -> int:
        return self.z.shape[-1]


@dataclass
class CompressorParams:
    queries: Tensor         # (K, d_h)
    proj_weight: Tensor     # (d_k, d_h)
    proj_bias: Tensor       # (d_k,)

    def parameters(self, prefix: str = "brain") -> Dict[str, Tensor]:
        return {f"{prefix}.queries": self.queries,
                f"{prefix}.proj_weight": self.proj_weight,
                f"{prefix}.proj_bias": self.proj_bias}


@dataclass
class LoraAdapter:
    a: Tensor               # (r, d_in), small random
    b: Tensor               # (d_out, r), zero at init
    alpha: float = LORA_ALPHA
    dropout_p: float = LORA_DROPOUT

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def d_in(self) -> int:
        return self.a.shape[1]

    @property
    def d_out(self) -> int:
        return self.b.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclass
class FrozenBlock:
    ln1_gain: Tensor
    ln1_bias: Tensor
    w_query: Tensor
    w_key: Tensor
    w_value: Tensor
    w_out: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn_in: Tensor
    ffn_in_bias: Tensor
    ffn_out: Tensor
    ffn_out_bias: Tensor

    FIELDS = ("ln1_gain", "ln1_bias", "w_query", "w_key", "w_value", "w_out",
              "ln2_gain", "ln2_bias", "ffn_in", "ffn_in_bias", "ffn_out", "ffn_out_bias")

    def projection(self, name: str) -> Tensor:
        return getattr(self, f"w_{name}")


@dataclass
class FrozenSurrogate:
    """Base language model: never updated, never differentiated."""

    embedding: Tensor       # (vocab, d_k)
    positions: Tensor       # (context_cap, d_k), applied to prompt tokens
    blocks: List[FrozenBlock]
    final_gain: Tensor
    final_bias: Tensor
    heads: int = SURROGATE_HEADS

    @property
    def d_k(self) -> int:
        return self.embedding.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def context_cap(self) -> int:
        return self.positions.shape[0]

    def parameters(self, prefix: str = "surrogate") -> Dict[str, Tensor]:
        params = {f"{prefix}.embedding": self.embedding, f"{prefix}.positions": self.positions}
        for i, block in enumerate(self.blocks):
            for name in FrozenBlock.FIELDS:
                params[f"{prefix}.block{i}.{name}"] = getattr(block, name)
        params[f"{prefix}.final_gain"] = self.final_gain
        params[f"{prefix}.final_bias"] = self.final_bias
        return params

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], heads: int = SURROGATE_HEADS,
                    prefix: str = "surrogate") -> "FrozenSurrogate":
        def get(name):
            key = f"{prefix}.{name}"
            if key not in arrays:
                raise ConfigError(f"surrogate checkpoint is missing '{key}'")
            return Tensor(arrays[key])

        count = len({k.split(".")[1] for k in arrays if k.startswith(f"{prefix}.block")})
        blocks = [FrozenBlock(**{n: get(f"block{i}.{n}") for n in FrozenBlock.FIELDS}) for i in range(count)]
        return cls(get("embedding"), get("positions"), blocks, get("final_gain"), get("final_bias"), heads)


@dataclass
class SurrogateModel:
    base: FrozenSurrogate
    head_weight: Tensor                 # (2, d_k)
    head_bias: Tensor                   # (2,)
    adapters: Dict[str, LoraAdapter] = field(default_factory=dict)   # "block{i}.{projection}"
    brain_positions: Optional[Tensor] = None                         # (K, d_k) learned offsets

    def adapter_parameters(self) -> Dict[str, Tensor]:
        params = {}
        for key, adapter in self.adapters.items():
            params[f"lora.{key}.A"] = adapter.a
            params[f"lora.{key}.B"] = adapter.b
        return params

    def head_parameters(self) -> Dict[str, Tensor]:
        params = {"head.weight": self.head_weight, "head.bias": self.head_bias}
        if self.brain_positions is not None:
            params["brain.positions"] = self.brain_positions
        return params


# -----------------------------
# Brain-summary tokens
# -----------------------------
def init_compressor(rng: np.random.Generator, d_h: int, d_k: int = D_K,
                    token_count: int = TOKEN_COUNT) -> CompressorParams:
    if token_count < 1:
        raise ConfigError(f"token_count must be >= 1, got {token_count}")
    return CompressorParams(
        queries=ta.randn(rng, (token_count, d_h), 1.0, True),
        proj_weight=ta.randn(rng, (d_k, d_h), 1.0 / np.sqrt(d_h), True),
        proj_bias=ta.zeros((d_k,), True),
    )


def compress_tokens(states: Tensor, params: CompressorParams, uniform: bool = False,
                    mask: Optional[np.ndarray] = None) -> BrainTokens:
    """
    Learned-query cross-attention pooling of (..., T, d_h) into K tokens.
    `mask` (bool, (..., T)) marks real time steps; `uniform` replaces the
    attention weights by a plain mean over admissible steps.
    """
    d_h = states.shape[-1]
    if params.queries.shape[-1] != d_h:
        raise DimensionError("query width differs from state width", params.queries.shape, states.shape)
    scores = ta.mul(ta.matmul(params.queries, ta.transpose(states)), 1.0 / np.sqrt(d_h))
    row_mask = None if mask is None else np.expand_dims(np.asarray(mask, dtype=bool), -2)
    if uniform:
        admissible = np.ones(scores.shape) if row_mask is None else np.broadcast_to(row_mask, scores.shape)
        weights = Tensor._wrap(admissible / admissible.sum(axis=-1, keepdims=True))
    else:
        weights = ta.softmax_rows(scores, row_mask)
    pooled = ta.matmul(weights, states)
    return BrainTokens(ta.linear(pooled, params.proj_weight, params.proj_bias))


def mean_pool_tokens(states: Tensor, params: CompressorParams) -> BrainTokens:
    """Single token: projected time-mean of the states (alignment ablation)."""
    pooled = ta.mean(states, axis=-2, keepdims=True)
    return BrainTokens(ta.linear(pooled, params.proj_weight, params.proj_bias))


def random_tokens(rng: np.random.Generator, shape: Tuple[int, ...]) -> BrainTokens:
    """Brain-free noise tokens (alignment ablation)."""
    return BrainTokens(Tensor._wrap(rng.standard_normal(shape)))


# -----------------------------
# LoRA
# -----------------------------
def init_lora(rng: np.random.Generator, d_in: int, d_out: int, rank: int = LORA_RANK,
              alpha: float = LORA_ALPHA, dropout_p: float = LORA_DROPOUT) -> LoraAdapter:
    if rank < 1 or rank > min(d_in, d_out):
        raise ConfigError(f"LoRA rank {rank} must lie in [1, min({d_in}, {d_out})]")
    if not 0.0 <= dropout_p < 1.0:
        raise ConfigError(f"LoRA dropout must be in [0, 1), got {dropout_p}")
    bound = 1.0 / np.sqrt(d_in)
    return LoraAdapter(
        a=ta.parameter(rng.uniform(-bound, bound, (rank, d_in))),
        b=ta.zeros((d_out, rank), True),
        alpha=alpha,
        dropout_p=dropout_p,
    )


def lora_linear(x: Tensor, weight: Tensor, adapter: Optional[LoraAdapter], training: bool = False,
                rng: Optional[np.random.Generator] = None, bias: Optional[Tensor] = None) -> Tensor:
    """y = W x + (alpha / r) B A drop(x); dropout only while training."""
    y = ta.linear(x, weight, bias)
    if adapter is None:
        return y
    if weight.shape != (adapter.d_out, adapter.d_in):
        raise DimensionError("adapter does not fit weight", weight.shape, (adapter.d_out, adapter.d_in))
    if adapter.rank > min(adapter.d_in, adapter.d_out):
        raise ConfigError(f"LoRA rank {adapter.rank} exceeds min({adapter.d_in}, {adapter.d_out})")
    dropped = ta.dropout(x, adapter.dropout_p, rng, training)
    update = ta.linear(ta.linear(dropped, adapter.a), adapter.b)
    return ta.add(y, ta.mul(update, adapter.scaling))


def effective_delta(adapter: LoraAdapter) -> np.ndarray:
    return adapter.scaling * (adapter.b.data @ adapter.a.data)


def merge_adapter(weight: Tensor, adapter: LoraAdapter) -> Tensor:
    """W + (alpha / r) B A, for adapter-free inference."""
    return Tensor(weight.data + effective_delta(adapter))


# -----------------------------
# Surrogate language model
# -----------------------------
def init_surrogate(seed: int = SURROGATE_SEED, d_k: int = D_K, block_count: int = SURROGATE_BLOCKS,
                   heads: int = SURROGATE_HEADS, vocab_size: int = VOCAB_SIZE,
                   context_cap: int = CONTEXT_CAP, ffn_mult: int = FFN_MULT) -> FrozenSurrogate:
    if d_k % heads:
        raise ConfigError(f"d_k={d_k} is not divisible by {heads} heads")
    rng = ta.make_rng(seed, _SURROGATE_STREAM)
    width = ffn_mult * d_k

    def mat(rows, cols):
        return Tensor(rng.standard_normal((rows, cols)) / np.sqrt(cols))

    blocks = []
    for _ in range(block_count):
        blocks.append(FrozenBlock(
            ln1_gain=ta.ones((d_k,)), ln1_bias=ta.zeros((d_k,)),
            w_query=mat(d_k, d_k), w_key=mat(d_k, d_k), w_value=mat(d_k, d_k), w_out=mat(d_k, d_k),
            ln2_gain=ta.ones((d_k,)), ln2_bias=ta.zeros((d_k,)),
            ffn_in=mat(width, d_k), ffn_in_bias=ta.zeros((width,)),
            ffn_out=mat(d_k, width), ffn_out_bias=ta.zeros((d_k,)),
        ))
    return FrozenSurrogate(
        embedding=Tensor(rng.standard_normal((vocab_size, d_k))),
        positions=Tensor(0.1 * rng.standard_normal((context_cap, d_k))),
        blocks=blocks,
        final_gain=ta.ones((d_k,)),
        final_bias=ta.zeros((d_k,)),
        heads=heads,
    )


def build_model(rng: np.random.Generator, base: FrozenSurrogate, rank: int = LORA_RANK,
                alpha: float = LORA_ALPHA, dropout_p: float = LORA_DROPOUT,
                targets: Sequence[str] = LORA_TARGETS, token_count: int = TOKEN_COUNT,
                brain_positions: bool = False) -> SurrogateModel:
    """Attach fresh adapters and a trainable head to a frozen base."""
    unknown = set(targets) - set(PROJECTIONS)
    if unknown:
        raise ConfigError(f"unknown LoRA targets {sorted(unknown)}; expected a subset of {PROJECTIONS}")
    d_k = base.d_k
    adapters = {f"block{i}.{name}": init_lora(rng, d_k, d_k, rank, alpha, dropout_p)
                for i in range(len(base.blocks)) for name in targets}
    return SurrogateModel(
        base=base,
        head_weight=ta.randn(rng, (2, d_k), 1.0 / np.sqrt(d_k), True),
        head_bias=ta.zeros((2,), True),
        adapters=adapters,
        brain_positions=ta.zeros((token_count, d_k), True) if brain_positions else None,
    )


def _prompt_embeddings(prompt_ids: Sequence[int], base: FrozenSurrogate) -> Tensor:
    ids = np.asarray(prompt_ids, dtype=int)
    if ids.ndim != 1 or ids.size == 0:
        raise ContractError("prompt must be a non-empty id sequence")
    if ids.min() < 0 or ids.max() >= base.vocab_size:
        raise ContractError(f"prompt ids must lie in [0, {base.vocab_size})")
    return Tensor._wrap(base.embedding.data[ids] + base.positions.data[: ids.size])


def surrogate_forward(tokens: Optional[BrainTokens], prompt_ids: Sequence[int], model: SurrogateModel,
                      training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Brain tokens (prefix) + prompt through the adapted frozen stack; the
    final position is pooled into 2 logits. tokens=None runs the prompt alone.
    Attention is bidirectional, so brain tokens without position offsets are
    an unordered set.
    """
    base = model.base
    k = 0 if tokens is None else tokens.count
    if k + len(prompt_ids) > base.context_cap:
        raise LengthError(f"{k} brain tokens + {len(prompt_ids)} prompt tokens exceed context {base.context_cap}")
    prompt = _prompt_embeddings(prompt_ids, base)

    if tokens is None:
        h = prompt
    else:
        if tokens.width != base.d_k:
            raise DimensionError("brain token width differs from surrogate width", tokens.z.shape, (base.d_k,))
        z = tokens.z
        if model.brain_positions is not None:
            z = ta.add(z, model.brain_positions)
        lead = z.shape[:-2]
        h = ta.concat([z, ta.broadcast_batch(prompt, lead) if lead else prompt], axis=-2)

    for i, block in enumerate(base.blocks):
        a = ta.layer_norm(h, block.ln1_gain, block.ln1_bias)
        q, key, v = (lora_linear(a, block.projection(name), model.adapters.get(f"block{i}.{name}"), training, rng)
                     for name in ("query", "key", "value"))
        context = ta.multi_head_attention(q, key, v, base.heads)
        h = ta.add(h, lora_linear(context, block.w_out, model.adapters.get(f"block{i}.out"), training, rng))
        f = ta.layer_norm(h, block.ln2_gain, block.ln2_bias)
        hidden = ta.relu(ta.linear(f, block.ffn_in, block.ffn_in_bias))
        h = ta.add(h, ta.linear(hidden, block.ffn_out, block.ffn_out_bias))

    h = ta.layer_norm(h, base.final_gain, base.final_bias)
    pooled = h[..., -1, :]
    return ta.linear(pooled, model.head_weight, model.head_bias)


# -----------------------------
# Decisions
# -----------------------------
def classify(logits) -> Tuple[Label, float]:
    """argmax over [ASD, TC]; an exact tie goes to TC."""
    values = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if values.shape != (2,):
        raise DimensionError("classify expects two logits", values.shape)
    shifted = np.exp(values - values.max())
    probs = shifted / shifted.sum()
    label = Label.ASD if probs[Label.ASD] > probs[Label.TC] else Label.TC
    return label, float(probs[label])


def summarize(label: Label, confidence: float) -> str:
    return VERDICT_TEMPLATE.format(label=label.name, confidence=100.0 * confidence)


def frozen_checksum(base: FrozenSurrogate) -> str:
    """sha256 over (name, shape, little-endian f64 bytes) of every frozen parameter."""
    digest = hashlib.sha256()
    for name, t in sorted(base.parameters().items()):
        digest.update(name.encode("utf-8"))
        digest.update(str(t.shape).encode("ascii"))
        digest.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return digest.hexdigest()


def trainable_fraction(trainable: Mapping[str, Tensor], frozen: Mapping[str, Tensor]) -> float:
    n_train = int(sum(t.size for t in trainable.values()))
    n_frozen = int(sum(t.size for t in frozen.values()))
    total = n_train + n_frozen
    return n_train / total if total else 0.0


if __name__ == "__main__":
    rng = ta.make_rng(11)
    base = init_surrogate(d_k=32)
    model = build_model(rng, base, rank=4)
    compressor = init_compressor(rng, d_h=16, d_k=32)
    states = ta.randn(rng, (100, 16))
    logits = surrogate_forward(compress_tokens(states, compressor), PROMPT_IDS, model)
    label, confidence = classify(logits)
    print(summarize(label, confidence))
    trainable = {**model.adapter_parameters(), **model.head_parameters()}
    print(f"trainable fraction of the language side: {trainable_fraction(trainable, base.parameters()):.3%}")
    print(f"frozen checksum {frozen_checksum(base)[:16]}...")
