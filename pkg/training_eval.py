# dyns training & evaluation - loss, Adam, metrics, variants and ablations
#
# Model = latent graph (per-t G_t filter) -> temporal backbone -> brain tokens
#         -> frozen surrogate with LoRA -> [ASD, TC] logits.
# Variants swap one stage at a time behind the same training loop.

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import latent_graph as lg
import selective_ssm as ssm
import tensor_autodiff as ta
import token_align as tk
from data_pipeline import Label, RoiTimeSeries, split_dataset
from errors import ConfigError, EvaluationError, NonFiniteError, SplitError
from tensor_autodiff import GradientMap, Tape, Tensor

logger = logging.getLogger(__name__)

# -----------------------------
# Config
# -----------------------------
LEARNING_RATE = 1e-4        # "learning rate of 1e-4"
EPOCHS = 10                 # "for up to 10 epochs"
BATCH_SIZE = 8
ACCUMULATION_STEPS = 1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
VALIDATION_FRACTION = 0.1   # carved out of train for best-epoch selection
EPOCH_CHECKPOINT = "epoch_{epoch}.dyns"

BACKBONES = ("gru", "tcn", "transformer", "s4", "mamba")
GRAPH_MODES = ("dynamic", "static", "pearson")
ALIGN_MODES = ("tokens", "meanpool", "random", "none")
BASE_VARIANTS = ("full", "static_graph", "static_graph:pearson", "frozen_llm", "no_llm")
ABLATION_VARIANTS = ("full", "static_graph", "frozen_llm")

_MODEL_STREAM = 8001
_TRAIN_STREAM = 8002
_NOISE_STREAM = 8003


# -----------------------------
# Configuration records
# -----------------------------
@dataclass
class ModelConfig:
    d_lat: int = lg.D_LAT
    conv_channels: int = lg.CONV_CHANNELS
    kernel_size: int = lg.KERNEL_SIZE
    attention_heads: int = lg.ATTENTION_HEADS
    graph_attention: bool = True
    filter_mode: str = lg.FILTER_MODE
    d_h: int = ssm.D_H
    block_count: int = ssm.BLOCK_COUNT
    backend: str = ssm.BACKEND
    scan_workers: int = ssm.SCAN_WORKERS
    d_k: int = tk.D_K
    token_count: int = tk.TOKEN_COUNT
    lora_rank: int = tk.LORA_RANK
    lora_alpha: float = tk.LORA_ALPHA
    lora_dropout: float = tk.LORA_DROPOUT
    lora_targets: Tuple[str, ...] = tk.LORA_TARGETS
    brain_positions: bool = False
    surrogate_seed: int = tk.SURROGATE_SEED
    surrogate_blocks: int = tk.SURROGATE_BLOCKS
    surrogate_heads: int = tk.SURROGATE_HEADS
    vocab_size: int = tk.VOCAB_SIZE
    context_cap: int = tk.CONTEXT_CAP
    prompt_ids: Tuple[int, ...] = tk.PROMPT_IDS

    def validate(self) -> None:
        for name in ("d_lat", "conv_channels", "d_h", "block_count", "d_k", "token_count", "lora_rank"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.filter_mode not in lg.FILTER_MODES:
            raise ConfigError(f"unknown filter_mode {self.filter_mode!r}")
        if self.backend not in ssm.BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}; expected one of {ssm.BACKENDS}")
        if self.scan_workers < 1:
            raise ConfigError(f"scan_workers must be >= 1, got {self.scan_workers}")


@dataclass
class TrainConfig:
    learning_rate: float = LEARNING_RATE
    epochs: int = EPOCHS
    batch_size: int = BATCH_SIZE
    accumulation_steps: int = ACCUMULATION_STEPS
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    seed: int = 0
    variant: str = "full"
    validation_fraction: float = VALIDATION_FRACTION
    workers: int = 1

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.accumulation_steps < 1:
            raise ConfigError(f"accumulation_steps must be >= 1, got {self.accumulation_steps}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError(f"validation_fraction must be in [0, 1), got {self.validation_fraction}")
        parse_variant(self.variant)


@dataclass(frozen=True)
class Variant:
    name: str = "full"
    graph: str = "dynamic"
    backbone: str = "mamba"
    align: str = "tokens"
    adapters: bool = True
    llm: bool = True


def parse_variant(text: str) -> Variant:
    """full | static_graph[:pearson] | frozen_llm | no_llm | backbone:X | align:X"""
    if text == "full":
        return Variant(text)
    if text == "static_graph":
        return Variant(text, graph="static")
    if text == "static_graph:pearson":
        return Variant(text, graph="pearson")
    if text == "frozen_llm":
        return Variant(text, adapters=False)
    if text == "no_llm":
        return Variant(text, llm=False)
    kind, _, value = text.partition(":")
    if kind == "backbone" and value in BACKBONES:
        return Variant(text, backbone=value)
    if kind == "align" and value in ALIGN_MODES:
        return Variant(text, align=value)
    raise ConfigError(f"unknown variant {text!r}; expected one of {BASE_VARIANTS}, "
                      f"backbone:{{{'|'.join(BACKBONES)}}} or align:{{{'|'.join(ALIGN_MODES)}}}")


# -----------------------------
# Metrics
# -----------------------------
def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def f1_from_precision_recall(precision: float, recall: float) -> float:
    return _ratio(2.0 * precision * recall, precision + recall)


@dataclass
class Metrics:
    """Confusion counts with ASD as the positive class; 0/0 is reported as 0."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    loss: Optional[float] = None

    @classmethod
    def from_predictions(cls, truth: Sequence[Label], predicted: Sequence[Label],
                         loss: Optional[float] = None) -> "Metrics":
        truth = np.asarray(truth, dtype=int)
        predicted = np.asarray(predicted, dtype=int)
        pos, neg = int(Label.ASD), int(Label.TC)
        return cls(
            tp=int(np.sum((truth == pos) & (predicted == pos))),
            fp=int(np.sum((truth == neg) & (predicted == pos))),
            fn=int(np.sum((truth == pos) & (predicted == neg))),
            tn=int(np.sum((truth == neg) & (predicted == neg))),
            loss=loss,
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return _ratio(self.tp + self.tn, self.total)

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        return f1_from_precision_recall(self.precision, self.recall)

    def to_dict(self) -> Dict[str, float]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "loss": self.loss, "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


# -----------------------------
# Loss / optimizer
# -----------------------------
def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the leading batch (if any)."""
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    log_probs = ta.log_softmax(logits)
    onehot = np.zeros(log_probs.shape, dtype=log_probs.data.dtype)
    onehot.reshape(-1, log_probs.shape[-1])[np.arange(labels.size), labels] = 1.0
    picked = ta.sum(ta.mul(log_probs, Tensor._wrap(onehot)))
    return ta.mul(picked, -1.0 / labels.size)


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: GradientMap, state: AdamState,
              cfg: TrainConfig) -> AdamState:
    """Bias-corrected Adam; parameter arrays are replaced, never mutated in place."""
    bad = [name for name in params if not np.all(np.isfinite(grads[name]))]
    if bad:
        logger.error("non-finite gradients at step %d in: %s", state.step + 1, ", ".join(sorted(bad)))
        raise NonFiniteError(f"non-finite gradient in {len(bad)} parameter(s), first: {sorted(bad)[0]}")
    state.step += 1
    correction1 = 1.0 - cfg.beta1 ** state.step
    correction2 = 1.0 - cfg.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = cfg.beta1 * state.m.get(name, 0.0) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(name, 0.0) + (1.0 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - cfg.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
    return state


class GradientAccumulator:
    """Averages micro-batch gradients; `ready` after `steps` contributions."""

    def __init__(self, steps: int):
        self.steps = steps
        self.count = 0
        self.total: Dict[str, np.ndarray] = {}

    def add(self, grads: GradientMap) -> None:
        for name, g in grads.items():
            self.total[name] = g.copy() if name not in self.total else self.total[name] + g
        self.count += 1

    @property
    def ready(self) -> bool:
        return self.count >= self.steps

    def average(self) -> GradientMap:
        averaged = {name: g / self.count for name, g in self.total.items()}
        self.total, self.count = {}, 0
        return averaged


# -----------------------------
# Temporal backbones
# -----------------------------
class TemporalModule:
    """(..., T, N) -> (..., T, d_h); `parameters()` names every weight."""

    name = "base"

    def parameters(self) -> Dict[str, Tensor]:
        raise NotImplementedError

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        raise NotImplementedError


class MambaBackbone(TemporalModule):
    name = "mamba"
    selective = True

    def __init__(self, rng, d_in: int, cfg: ModelConfig):
        self.params = ssm.init_ssm(rng, d_in, cfg.d_h, cfg.block_count)
        self.backend = cfg.backend
        self.workers = cfg.scan_workers

    def parameters(self) -> Dict[str, Tensor]:
        return self.params.parameters("temporal")

    def __call__(self, x, training=False):
        # gradients only flow through the sequential scan
        backend = "sequential" if training else self.backend
        return ssm.ssm_forward(x, self.params, backend, selective=self.selective, workers=self.workers)


class S4Backbone(MambaBackbone):
    name = "s4"
    selective = False

    def __init__(self, rng, d_in: int, cfg: ModelConfig):
        self.params = ssm.init_ssm(rng, d_in, cfg.d_h, 1)
        self.backend = cfg.backend
        self.workers = cfg.scan_workers


class GruBackbone(TemporalModule):
    name = "gru"

    def __init__(self, rng, d_in: int, cfg: ModelConfig):
        d_h = cfg.d_h
        self.weights = {}
        for gate in ("z", "r", "n"):
            self.weights[f"temporal.w_{gate}"] = ta.randn(rng, (d_h, d_in), 1.0 / np.sqrt(d_in), True)
            self.weights[f"temporal.u_{gate}"] = ta.randn(rng, (d_h, d_h), 1.0 / np.sqrt(d_h), True)
            self.weights[f"temporal.b_{gate}"] = ta.zeros((d_h,), True)
        self.d_h = d_h

    def parameters(self):
        return dict(self.weights)

    def __call__(self, x, training=False):
        w = self.weights
        inputs = {gate: ta.linear(x, w[f"temporal.w_{gate}"], w[f"temporal.b_{gate}"]) for gate in "zrn"}
        lead = x.shape[:-2]
        h = Tensor._wrap(np.zeros(lead + (self.d_h,)))
        states = []
        for t in range(x.shape[-2]):
            z = ta.sigmoid(ta.add(inputs["z"][..., t, :], ta.linear(h, w["temporal.u_z"])))
            r = ta.sigmoid(ta.add(inputs["r"][..., t, :], ta.linear(h, w["temporal.u_r"])))
            n = ta.tanh(ta.add(inputs["n"][..., t, :], ta.linear(ta.mul(r, h), w["temporal.u_n"])))
            h = ta.add(ta.mul(ta.sub(1.0, z), n), ta.mul(z, h))
            states.append(h)
        return ta.stack(states, axis=len(lead))


class TcnBackbone(TemporalModule):
    """Two dilated same-padded conv layers (dilation 1, 2) with a residual."""

    name = "tcn"

    def __init__(self, rng, d_in: int, cfg: ModelConfig):
        d_h, k = cfg.d_h, cfg.kernel_size
        self.kernel_size = k
        self.weights = {
            "temporal.conv1_weight": ta.randn(rng, (d_h, d_in, k), 1.0 / np.sqrt(d_in * k), True),
            "temporal.conv1_bias": ta.zeros((d_h,), True),
            "temporal.conv2_weight": ta.randn(rng, (d_h, d_h, k), 1.0 / np.sqrt(d_h * k), True),
            "temporal.conv2_bias": ta.zeros((d_h,), True),
        }

    def parameters(self):
        return dict(self.weights)

    def __call__(self, x, training=False):
        w = self.weights
        h1 = ta.relu(ta.grouped_conv1d(x, self.kernel_size, w["temporal.conv1_weight"], 1,
                                       w["temporal.conv1_bias"], dilation=1))
        h2 = ta.relu(ta.grouped_conv1d(h1, self.kernel_size, w["temporal.conv2_weight"], 1,
                                       w["temporal.conv2_bias"], dilation=2))
        return ta.add(h1, h2)


def _sinusoid(length: int, width: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(width) // 2 * 2) / width)
    angles = pos * freq
    return np.where(np.arange(width) % 2 == 0, np.sin(angles), np.cos(angles))


class TransformerBackbone(TemporalModule):
    """One pre-LN encoder block over time."""

    name = "transformer"

    def __init__(self, rng, d_in: int, cfg: ModelConfig):
        d_h = cfg.d_h
        self.heads = next(h for h in (4, 2, 1) if d_h % h == 0)
        s = 1.0 / np.sqrt(d_h)
        self.weights = {
            "temporal.w_in": ta.randn(rng, (d_h, d_in), 1.0 / np.sqrt(d_in), True),
            "temporal.b_in": ta.zeros((d_h,), True),
            "temporal.ln1_gain": ta.ones((d_h,), True), "temporal.ln1_bias": ta.zeros((d_h,), True),
            "temporal.w_query": ta.randn(rng, (d_h, d_h), s, True),
            "temporal.w_key": ta.randn(rng, (d_h, d_h), s, True),
            "temporal.w_value": ta.randn(rng, (d_h, d_h), s, True),
            "temporal.w_out": ta.randn(rng, (d_h, d_h), s, True),
            "temporal.ln2_gain": ta.ones((d_h,), True), "temporal.ln2_bias": ta.zeros((d_h,), True),
            "temporal.ffn_in": ta.randn(rng, (2 * d_h, d_h), s, True),
            "temporal.ffn_in_bias": ta.zeros((2 * d_h,), True),
            "temporal.ffn_out": ta.randn(rng, (d_h, 2 * d_h), 1.0 / np.sqrt(2 * d_h), True),
            "temporal.ffn_out_bias": ta.zeros((d_h,), True),
        }

    def parameters(self):
        return dict(self.weights)

    def __call__(self, x, training=False):
        w = self.weights
        h = ta.linear(x, w["temporal.w_in"], w["temporal.b_in"])
        h = ta.add(h, Tensor._wrap(_sinusoid(h.shape[-2], h.shape[-1])))
        a = ta.layer_norm(h, w["temporal.ln1_gain"], w["temporal.ln1_bias"])
        q, k, v = (ta.linear(a, w[f"temporal.w_{p}"]) for p in ("query", "key", "value"))
        h = ta.add(h, ta.linear(ta.multi_head_attention(q, k, v, self.heads), w["temporal.w_out"]))
        f = ta.layer_norm(h, w["temporal.ln2_gain"], w["temporal.ln2_bias"])
        hidden = ta.relu(ta.linear(f, w["temporal.ffn_in"], w["temporal.ffn_in_bias"]))
        return ta.add(h, ta.linear(hidden, w["temporal.ffn_out"], w["temporal.ffn_out_bias"]))


BACKBONE_TYPES = {
    "gru": GruBackbone,
    "tcn": TcnBackbone,
    "transformer": TransformerBackbone,
    "s4": S4Backbone,
    "mamba": MambaBackbone,
}


# -----------------------------
# Model
# -----------------------------
@dataclass
class DynsModel:
    variant: Variant
    config: ModelConfig
    encoder: lg.NodeEncoderParams
    temporal: TemporalModule
    compressor: tk.CompressorParams
    surrogate: tk.SurrogateModel
    direct_head: Dict[str, Tensor]      # no_llm: pooled tokens -> logits
    seed: int = 0

    def parameters(self) -> Dict[str, Tensor]:
        """Everything a checkpoint stores (the frozen base is stored separately)."""
        return {**self.encoder.parameters(), **self.temporal.parameters(), **self.compressor.parameters(),
                **self.surrogate.adapter_parameters(), **self.surrogate.head_parameters(), **self.direct_head}

    def trainable_parameters(self) -> Dict[str, Tensor]:
        """Parameters the variant actually trains."""
        v = self.variant
        params: Dict[str, Tensor] = {}
        if v.align in ("tokens", "meanpool"):
            if v.graph != "pearson":
                params.update(self.encoder.parameters())
            params.update(self.temporal.parameters())
            params.update(self.compressor.parameters())
        if not v.llm:
            params.update(self.direct_head)
            return params
        if v.adapters:
            params.update(self.surrogate.adapter_parameters())
        params.update(self.surrogate.head_parameters())
        return params


def init_model(cfg: ModelConfig, variant: Variant, n_rois: int, seed: int,
               base: Optional[tk.FrozenSurrogate] = None) -> DynsModel:
    """Parameters are drawn in a fixed order, so variants sharing a seed share weights."""
    cfg.validate()
    rng = ta.make_rng(seed, _MODEL_STREAM)
    encoder = lg.init_node_encoder(rng, cfg.d_lat, cfg.conv_channels, cfg.kernel_size,
                                   cfg.attention_heads, cfg.graph_attention)
    compressor = tk.init_compressor(rng, cfg.d_h, cfg.d_k, cfg.token_count)
    if base is None:
        base = tk.init_surrogate(cfg.surrogate_seed, cfg.d_k, cfg.surrogate_blocks, cfg.surrogate_heads,
                                 cfg.vocab_size, cfg.context_cap)
    surrogate = tk.build_model(rng, base, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout,
                               cfg.lora_targets, cfg.token_count, cfg.brain_positions)
    direct_head = {"direct.weight": ta.randn(rng, (2, cfg.d_k), 1.0 / np.sqrt(cfg.d_k), True),
                   "direct.bias": ta.zeros((2,), True)}
    temporal = BACKBONE_TYPES[variant.backbone](ta.make_rng(seed, _MODEL_STREAM, 1), n_rois, cfg)
    return DynsModel(variant, cfg, encoder, temporal, compressor, surrogate, direct_head, seed)


def load_model_parameters(model: DynsModel, arrays: Mapping[str, np.ndarray]) -> None:
    for name, p in model.parameters().items():
        if name not in arrays:
            raise ConfigError(f"checkpoint is missing parameter '{name}'")
        if arrays[name].shape != p.shape:
            raise ConfigError(f"checkpoint shape for '{name}' is {arrays[name].shape}, expected {p.shape}")
        p.data = np.array(arrays[name], dtype=p.data.dtype)


def filtered_signal(model: DynsModel, x: Tensor) -> Tensor:
    v, cfg = model.variant, model.config
    if v.graph == "pearson":
        return lg.filter_static(lg.pearson_adjacency(x), x, cfg.filter_mode)
    seq = lg.encode_sequence(x, model.encoder, cfg.filter_mode)
    if v.graph == "static":
        return lg.filter_static(lg.static_adjacency(seq), x, cfg.filter_mode)
    return seq.filtered


def forward(model: DynsModel, x: Tensor, training: bool = False,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """x: (..., T, N) -> logits (..., 2); index 0 is ASD."""
    v, cfg = model.variant, model.config
    lead = x.shape[:-2]
    tokens = None
    if v.align == "random":
        tokens = tk.random_tokens(rng if rng is not None else ta.make_rng(model.seed, _NOISE_STREAM),
                                  lead + (cfg.token_count, cfg.d_k))
    elif v.align != "none":
        states = model.temporal(filtered_signal(model, x), training)
        if v.align == "meanpool":
            tokens = tk.mean_pool_tokens(states, model.compressor)
        else:
            tokens = tk.compress_tokens(states, model.compressor)

    if not v.llm:
        pooled = ta.mean(tokens.z, axis=-2)
        return ta.linear(pooled, model.direct_head["direct.weight"], model.direct_head["direct.bias"])
    logits = tk.surrogate_forward(tokens, cfg.prompt_ids, model.surrogate, training, rng)
    if tokens is None and lead:
        logits = ta.broadcast_batch(logits, lead)
    return logits


# -----------------------------
# Batching
# -----------------------------
def _batches(subjects: Sequence[RoiTimeSeries], size: int) -> List[List[RoiTimeSeries]]:
    """Consecutive batches; a batch is split further where series shapes differ."""
    out = []
    for start in range(0, len(subjects), size):
        groups: Dict[Tuple[int, ...], List[RoiTimeSeries]] = {}
        for s in subjects[start: start + size]:
            groups.setdefault(s.values.shape, []).append(s)
        out.extend(groups.values())
    return out


def _stack(batch: Sequence[RoiTimeSeries]) -> Tuple[Tensor, Optional[np.ndarray]]:
    x = Tensor._wrap(np.stack([s.values.data for s in batch]))
    if any(s.label is None for s in batch):
        return x, None
    return x, np.array([int(s.label) for s in batch])


def _predict_batch(model: DynsModel, batch: Sequence[RoiTimeSeries], index: int) -> Tuple[np.ndarray, float]:
    x, labels = _stack(batch)
    logits = forward(model, x, training=False, rng=ta.make_rng(model.seed, _NOISE_STREAM, index))
    loss = 0.0 if labels is None else cross_entropy(logits, labels).item() * len(batch)
    return logits.data, loss


def _inference(model: DynsModel, subjects: Sequence[RoiTimeSeries], batch_size: int,
               workers: int) -> Tuple[List[RoiTimeSeries], np.ndarray, float]:
    batches = _batches(subjects, batch_size)
    jobs = list(enumerate(batches))
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: _predict_batch(model, job[1], job[0]), jobs))
    else:
        results = [_predict_batch(model, batch, i) for i, batch in jobs]
    ordered = [s for batch in batches for s in batch]
    logits = np.concatenate([r[0] for r in results])
    loss = float(np.sum([r[1] for r in results])) / len(ordered)
    return ordered, logits, loss


def _decide(logits: np.ndarray) -> np.ndarray:
    # ties go to TC
    return np.where(logits[:, Label.ASD] > logits[:, Label.TC], int(Label.ASD), int(Label.TC))


def evaluate(model: DynsModel, subjects: Sequence[RoiTimeSeries], batch_size: int = BATCH_SIZE,
             workers: int = 1) -> Metrics:
    if not subjects:
        raise EvaluationError("evaluation split is empty")
    if any(s.label is None for s in subjects):
        raise EvaluationError("evaluation needs labelled subjects; use predict for unlabelled ones")
    ordered, logits, loss = _inference(model, subjects, batch_size, workers)
    return Metrics.from_predictions([s.label for s in ordered], _decide(logits), loss)


@dataclass
class Prediction:
    subject_id: str
    label: Optional[Label]
    predicted: Label
    confidence: float
    verdict: str


def predict(model: DynsModel, subjects: Sequence[RoiTimeSeries], batch_size: int = BATCH_SIZE,
            workers: int = 1) -> List[Prediction]:
    if not subjects:
        raise EvaluationError("nothing to predict")
    ordered, logits, _ = _inference(model, subjects, batch_size, workers)
    position = {id(s): i for i, s in enumerate(subjects)}
    rows = []
    for s, row in sorted(zip(ordered, logits), key=lambda pair: position[id(pair[0])]):
        label, confidence = tk.classify(row)
        rows.append(Prediction(s.subject_id, s.label, label, confidence, tk.summarize(label, confidence)))
    return rows


# -----------------------------
# Training
# -----------------------------
@dataclass
class TrainResult:
    log: List[Dict[str, float]]
    best_epoch: int
    best_accuracy: float
    validation_size: int


def _log_record(epoch: int, split: str, metrics: Metrics) -> Dict[str, float]:
    return {"epoch": epoch, "split": split, "loss": metrics.loss, "accuracy": metrics.accuracy,
            "precision": metrics.precision, "recall": metrics.recall, "f1": metrics.f1}


def _carve_validation(subjects: Sequence[RoiTimeSeries], cfg: TrainConfig):
    if cfg.validation_fraction <= 0:
        return list(subjects), []
    try:
        split = split_dataset(subjects, 1.0 - cfg.validation_fraction, cfg.seed)
    except SplitError as exc:
        logger.warning("no validation carve-out (%s); selecting on training accuracy", exc)
        return list(subjects), []
    return split.train, split.test


def train(model: DynsModel, subjects: Sequence[RoiTimeSeries], cfg: TrainConfig,
          checkpoint_dir=None) -> TrainResult:
    """
    Adam over the variant's trainable parameters. After each epoch the
    parameters are scored on the validation carve-out; the best epoch's
    parameters (first on ties) are restored at the end. With `checkpoint_dir`
    every epoch also writes its parameters to epoch_<k>.dyns there.
    """
    cfg.validate()
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    fit, val = _carve_validation(subjects, cfg)
    if not fit:
        raise EvaluationError("no training subjects")
    params = model.trainable_parameters()
    rng = ta.make_rng(cfg.seed, _TRAIN_STREAM)
    state = AdamState()
    log: List[Dict[str, float]] = []
    best = (-1.0, 0, {name: p.data for name, p in params.items()})
    logger.info("training %s: %d subjects (+%d validation), %d trainable parameters",
                model.variant.name, len(fit), len(val), sum(p.size for p in params.values()))

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(fit))
        truth, predicted, losses = [], [], []
        for batch in _batches([fit[i] for i in order], cfg.batch_size):
            accumulator = GradientAccumulator(min(cfg.accumulation_steps, len(batch)))
            for micro in np.array_split(np.arange(len(batch)), accumulator.steps):
                x, labels = _stack([batch[i] for i in micro])
                with Tape():
                    logits = forward(model, x, training=True, rng=rng)
                    loss = cross_entropy(logits, labels)
                    accumulator.add(ta.backward(loss, params))
                losses.append(loss.item() * len(micro))
                truth.extend(labels)
                predicted.extend(_decide(logits.data.reshape(-1, 2)))
            adam_step(params, accumulator.average(), state, cfg)

        train_metrics = Metrics.from_predictions(truth, predicted, float(np.sum(losses)) / len(truth))
        log.append(_log_record(epoch, "train", train_metrics))
        score_metrics = train_metrics
        if val:
            score_metrics = evaluate(model, val, cfg.batch_size, cfg.workers)
            log.append(_log_record(epoch, "val", score_metrics))
        logger.info("epoch %d/%d loss %.4f train acc %.3f%s", epoch, cfg.epochs, train_metrics.loss,
                    train_metrics.accuracy, f" val acc {score_metrics.accuracy:.3f}" if val else "")
        if score_metrics.accuracy > best[0]:
            best = (score_metrics.accuracy, epoch, {name: p.data for name, p in params.items()})
        if checkpoint_dir is not None:
            ta.save_checkpoint(checkpoint_dir / EPOCH_CHECKPOINT.format(epoch=epoch), model.parameters())

    for name, p in params.items():
        p.data = best[2][name]
    return TrainResult(log, best[1], best[0], len(val))


# -----------------------------
# Variants / ablation
# -----------------------------
@dataclass
class VariantResult:
    variant: str
    seed: int
    metrics: Metrics
    train: TrainResult
    model: DynsModel


def run_variant(variant: str, train_subjects: Sequence[RoiTimeSeries], test_subjects: Sequence[RoiTimeSeries],
                cfg: TrainConfig, model_cfg: Optional[ModelConfig] = None,
                base: Optional[tk.FrozenSurrogate] = None, checkpoint_dir=None) -> VariantResult:
    parsed = parse_variant(variant)
    model_cfg = model_cfg or ModelConfig()
    n_rois = train_subjects[0].n_rois
    model = init_model(model_cfg, parsed, n_rois, cfg.seed, base)
    result = train(model, train_subjects, TrainConfig(**{**asdict(cfg), "variant": variant}), checkpoint_dir)
    metrics = evaluate(model, test_subjects, cfg.batch_size, cfg.workers)
    logger.info("%s seed %d: test accuracy %.4f", variant, cfg.seed, metrics.accuracy)
    return VariantResult(variant, cfg.seed, metrics, result, model)


METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


def run_ablation(variants: Iterable[str], subjects: Sequence[RoiTimeSeries], cfg: TrainConfig,
                 seeds: Sequence[int], model_cfg: Optional[ModelConfig] = None,
                 train_fraction: float = 0.8) -> List[Dict[str, float]]:
    """
    One stratified split per seed, shared by every variant (paired comparison).
    Rows carry mean and sample std over seeds for each metric.
    """
    variants = list(variants)
    for v in variants:
        parse_variant(v)
    scores: Dict[str, List[Metrics]] = {v: [] for v in variants}
    for seed in seeds:
        split = split_dataset(subjects, train_fraction, seed)
        seed_cfg = TrainConfig(**{**asdict(cfg), "seed": int(seed)})
        for v in variants:
            scores[v].append(run_variant(v, split.train, split.test, seed_cfg, model_cfg).metrics)

    rows = []
    for v in variants:
        row: Dict[str, float] = {"variant": v, "seeds": len(seeds)}
        for metric in METRIC_NAMES:
            values = np.array([getattr(m, metric) for m in scores[v]])
            row[f"{metric}_mean"] = float(values.mean())
            row[f"{metric}_std"] = float(values.std(ddof=1)) if values.size > 1 else 0.0
        rows.append(row)
    return rows


def write_ablation_csv(rows: Sequence[Mapping[str, float]], path) -> None:
    fields = ["variant", "seeds"] + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]) for k in fields})


def write_log_jsonl(records: Iterable[Mapping], path) -> None:
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_log_jsonl(path) -> List[Dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


# -----------------------------
# Gradient verification
# -----------------------------
GRADCHECK_COORDS = 4        # sampled coordinates per parameter in end-to-end checks


def _readout(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar readout sum(out * w) with fixed random w."""
    return ta.sum(ta.mul(out, Tensor._wrap(weights)))


def _gradient_cases(rng: np.random.Generator):
    """(name, fn, params) triples covering every differentiable op and stage."""
    def p(*shape, low=None):
        data = rng.standard_normal(shape)
        if low is not None:
            data = low + np.abs(data)
        return ta.parameter(data)

    def away_from_zero(*shape):
        data = rng.standard_normal(shape)
        return ta.parameter(data + np.sign(data) * 0.5)

    w34 = rng.standard_normal((3, 4))
    cases = []
    for name, op in (("add", ta.add), ("sub", ta.sub), ("mul", ta.mul)):
        cases.append((name, lambda q, op=op: _readout(op(q["x"], q["y"]), w34), {"x": p(3, 4), "y": p(4)}))
    cases.append(("div", lambda q: _readout(ta.div(q["x"], q["y"]), w34), {"x": p(3, 4), "y": p(3, 4, low=0.5)}))
    for name, op, params in (("exp", ta.exp, {"x": p(3, 4)}),
                             ("log", ta.log, {"x": p(3, 4, low=0.5)}),
                             ("square", ta.square, {"x": p(3, 4)}),
                             ("relu", ta.relu, {"x": away_from_zero(3, 4)}),
                             ("sigmoid", ta.sigmoid, {"x": p(3, 4)}),
                             ("softplus", ta.softplus, {"x": p(3, 4)}),
                             ("tanh", ta.tanh, {"x": p(3, 4)}),
                             ("softmax_rows", ta.softmax_rows, {"x": p(3, 4)}),
                             ("log_softmax", ta.log_softmax, {"x": p(3, 4)}),
                             ("symmetrize_upper", ta.symmetrize_upper, {"x": p(4, 4)})):
        shape = params["x"].shape
        cases.append((name, lambda q, op=op, w=rng.standard_normal(shape): _readout(op(q["x"]), w), params))

    w245 = rng.standard_normal((2, 3, 5))
    cases.append(("matmul", lambda q: _readout(ta.matmul(q["a"], q["b"]), w245), {"a": p(2, 3, 4), "b": p(2, 4, 5)}))
    w_mean = rng.standard_normal((2, 4))
    cases.append(("mean", lambda q: _readout(ta.mean(q["x"], axis=1), w_mean), {"x": p(2, 3, 4)}))
    w_ln = rng.standard_normal((3, 6))
    cases.append(("layer_norm", lambda q: _readout(ta.layer_norm(q["x"], q["g"], q["b"]), w_ln),
                  {"x": p(3, 6), "g": p(6), "b": p(6)}))
    w_att = rng.standard_normal((2, 5, 8))
    cases.append(("multi_head_attention",
                  lambda q: _readout(ta.multi_head_attention(q["q"], q["k"], q["v"], 2), w_att),
                  {"q": p(2, 5, 8), "k": p(2, 5, 8), "v": p(2, 5, 8)}))
    w_conv = rng.standard_normal((2, 9, 4))
    cases.append(("grouped_conv1d",
                  lambda q: _readout(ta.grouped_conv1d(q["x"], 3, q["w"], 2, q["b"], dilation=2), w_conv),
                  {"x": p(2, 9, 4), "w": p(4, 2, 3), "b": p(4)}))
    w_rec = rng.standard_normal((7, 3))
    cases.append(("linear_recurrence", lambda q: _readout(ta.linear_recurrence(q["a"], q["u"]), w_rec),
                  {"a": ta.parameter(rng.uniform(0.1, 0.9, (7, 3))), "u": p(7, 3)}))

    encoder = lg.init_node_encoder(rng, d_lat=8, conv_channels=3, kernel_size=3, heads=2)
    x_graph = Tensor(rng.standard_normal((6, 4)))
    w_graph = rng.standard_normal((6, 4))
    cases.append(("encode_sequence",
                  lambda q: _readout(lg.encode_sequence(x_graph, encoder).filtered, w_graph),
                  encoder.parameters()))

    ssm_params = ssm.init_ssm(rng, d_in=4, d_h=5, block_count=2)
    x_ssm = Tensor(rng.standard_normal((9, 4)))
    w_ssm = rng.standard_normal((9, 5))
    cases.append(("ssm_forward", lambda q: _readout(ssm.ssm_forward(x_ssm, ssm_params, "sequential"), w_ssm),
                  ssm_params.parameters()))

    compressor = tk.init_compressor(rng, d_h=5, d_k=8, token_count=3)
    states = Tensor(rng.standard_normal((7, 5)))
    w_tok = rng.standard_normal((3, 8))
    cases.append(("compress_tokens", lambda q: _readout(tk.compress_tokens(states, compressor).z, w_tok),
                  compressor.parameters()))

    adapter = tk.init_lora(rng, 6, 5, rank=2, alpha=4.0, dropout_p=0.0)
    adapter.b.data = rng.standard_normal(adapter.b.shape)
    frozen_w = Tensor(rng.standard_normal((5, 6)))
    x_lora = Tensor(rng.standard_normal((3, 6)))
    w_lora = rng.standard_normal((3, 5))
    cases.append(("lora_linear", lambda q: _readout(tk.lora_linear(x_lora, frozen_w, adapter), w_lora),
                  {"A": adapter.a, "B": adapter.b}))

    base = tk.init_surrogate(seed=rng.integers(1 << 30), d_k=8, block_count=1, heads=2,
                             vocab_size=16, context_cap=16)
    surrogate = tk.build_model(rng, base, rank=2, alpha=4.0, dropout_p=0.0, token_count=3)
    for adapter_ in surrogate.adapters.values():
        adapter_.b.data = 0.1 * rng.standard_normal(adapter_.b.shape)
    tokens = tk.BrainTokens(Tensor(rng.standard_normal((3, 8))))
    w_logits = rng.standard_normal(2)
    cases.append(("surrogate_forward",
                  lambda q: _readout(tk.surrogate_forward(tokens, (1, 5, 9), surrogate), w_logits),
                  {**surrogate.adapter_parameters(), **surrogate.head_parameters()}))

    logits = p(4, 2)
    labels = rng.integers(0, 2, 4)
    cases.append(("cross_entropy", lambda q: cross_entropy(q["z"], labels), {"z": logits}))
    return cases


def _end_to_end_case(rng: np.random.Generator, seed: int):
    cfg = ModelConfig(d_lat=8, conv_channels=3, attention_heads=2, d_h=6, block_count=2, d_k=8,
                      token_count=2, lora_rank=2, lora_alpha=4.0, lora_dropout=0.0, surrogate_blocks=1,
                      surrogate_heads=2, vocab_size=16, context_cap=16, prompt_ids=(1, 4, 7))
    model = init_model(cfg, parse_variant("full"), n_rois=4, seed=seed)
    for adapter in model.surrogate.adapters.values():
        adapter.b.data = 0.1 * rng.standard_normal(adapter.b.shape)
    x = Tensor(rng.standard_normal((2, 8, 4)))
    labels = np.array([0, 1])
    return lambda q: cross_entropy(forward(model, x), labels), model.trainable_parameters()


def gradient_suite(seed: int, end_to_end: bool = True) -> Dict[str, float]:
    """Max relative finite-difference error per op / stage (float64 required)."""
    if ta.default_precision() != 64:
        raise ConfigError("gradient checks need 64-bit precision")
    rng = ta.make_rng(seed)
    errors = {}
    for name, fn, params in _gradient_cases(rng):
        errors[name] = ta.finite_diff_check(fn, params)
    if end_to_end:
        fn, params = _end_to_end_case(rng, seed)
        errors["end_to_end_loss"] = ta.finite_diff_check(fn, params, max_coords=GRADCHECK_COORDS, rng=rng)
    return errors


if __name__ == "__main__":
    from data_pipeline import default_synth_spec, normalize_zscore, synth_generate

    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")
    spec = default_synth_spec(subjects_per_class=12, length=64, seed=0)
    subjects = [normalize_zscore(s) for s in synth_generate(spec)]
    split = split_dataset(subjects, 0.8, 0)
    model_cfg = ModelConfig(d_lat=16, d_h=16, d_k=32, lora_rank=4)
    cfg = TrainConfig(learning_rate=3e-3, epochs=3, seed=0)
    result = run_variant("full", split.train, split.test, cfg, model_cfg)
    print(json.dumps(result.metrics.to_dict(), indent=2))
