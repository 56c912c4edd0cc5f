"""End-to-end model: encoders, batch graph, aggregation, fusion and heads.

Training uses binary cross-entropy summed over diseases and averaged over the
batch, Adam, per-epoch validation macro PR-AUC and early stopping.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .aggregation import (AggParams, cxr_messages, ehr_messages, init_agg,
                          temporal_weight_matrix)
from .config import TrainConfig
from .diffmath import (DimensionError, Tensor, clip, fan_in_uniform, log, sigmoid,
                       zeros_param)
from .disease_corr import DiseaseCorrelation, GCNParams, gcn_forward, init_gcn
from .encoders import EncoderParams, ehr_summaries, init_encoder, mlp
from .evaluation import PraucReport, macro_prauc
from .fusion import FusionParams, SourceStack, fuse_batch, init_fusion, stack_features
from .pgraph import PGraph, build_pgraph
from .records import PatientRecord

logger = logging.getLogger(__name__)

VARIANTS = ("full", "no-ehr-ehr", "last-cxr-only", "no-cga", "ehr-only")
ABLATIONS = ("no-ehr-ehr", "last-cxr-only", "no-cga")
PROB_EPS = 1e-7


class TrainingDiverged(RuntimeError):
    """The loss became NaN or infinite."""


@dataclass(frozen=True)
class Dims:
    n_features: int
    cxr_dim: int
    n_labels: int
    dim: int = 64
    hidden: int = 128
    heads: int = 4

    @classmethod
    def infer(cls, records: Sequence[PatientRecord], config: TrainConfig) -> "Dims":
        first = records[0]
        cxr_dim = next((c.features.size for r in records for c in r.cxrs), 1)
        return cls(first.ehr.n_features, cxr_dim, first.labels.size,
                   config.dim, config.hidden, config.heads)


@dataclass
class ModelParams:
    ehr_enc: EncoderParams
    cxr_enc: EncoderParams
    agg: AggParams
    gcn: GCNParams
    fusion: FusionParams
    head_W: Tensor
    head_b: Tensor

    @classmethod
    def init(cls, dims: Dims, rng: np.random.Generator, zero_heads: bool = False) -> "ModelParams":
        d = dims.dim
        return cls(
            ehr_enc=init_encoder(rng, 2 * dims.n_features, dims.hidden, d),
            cxr_enc=init_encoder(rng, dims.cxr_dim, dims.hidden, d),
            agg=init_agg(rng, d, dims.heads),
            gcn=init_gcn(rng, dims.n_labels, d),
            fusion=init_fusion(rng, d),
            head_W=zeros_param((dims.n_labels, d)) if zero_heads
            else fan_in_uniform(rng, (dims.n_labels, d), fan_in=d),
            head_b=zeros_param(dims.n_labels),
        )

    @property
    def dims(self) -> Dims:
        return Dims(self.ehr_enc.in_dim // 2, self.cxr_enc.in_dim, self.head_W.shape[0],
                    self.head_W.shape[1], self.ehr_enc.W1.shape[1], self.agg.heads)

    def named(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.ehr_enc.named("ehr_enc"))
        out.update(self.cxr_enc.named("cxr_enc"))
        out.update(self.agg.named("agg"))
        out.update(self.gcn.named("gcn"))
        out.update(self.fusion.named("fusion"))
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        return out

    def n_parameters(self) -> int:
        return sum(t.size for t in self.named().values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.named().items():
            if state[k].shape != t.shape:
                raise DimensionError(f"{k}: stored shape {state[k].shape} != model shape {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)

    @classmethod
    def from_state(cls, dims: Dims, state: dict[str, np.ndarray]) -> "ModelParams":
        params = cls.init(dims, np.random.default_rng(0))
        params.load_state(state)
        return params


# -- batch handling -------------------------------------------------------------

def apply_variant(batch: Sequence[PatientRecord], variant: str) -> list[PatientRecord]:
    """Input-side edits an architecture variant makes to every batch."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    if variant == "last-cxr-only":
        out = []
        for r in batch:
            if len(r.cxrs) > 1:
                last = max(range(len(r.cxrs)), key=lambda i: (r.cxrs[i].time_hours, i))
                r = replace(r, cxrs=[r.cxrs[last]])
            out.append(r)
        return out
    if variant == "ehr-only":
        return [replace(r, cxrs=[]) if r.cxrs else r for r in batch]
    return list(batch)


def strip_cxrs(records: Sequence[PatientRecord]) -> list[PatientRecord]:
    return apply_variant(records, "ehr-only")


def cxr_dropout(batch: Sequence[PatientRecord], rate: float,
                rng: np.random.Generator) -> list[PatientRecord]:
    """Remove every CXR from ``floor(rate * #CXR-bearing)`` random patients."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"cxr dropout rate must lie in [0, 1), got {rate}")
    batch = list(batch)
    bearing = [i for i, r in enumerate(batch) if r.cxrs]
    k = math.floor(rate * len(bearing))
    if k == 0:
        return batch
    for i in rng.choice(bearing, size=k, replace=False):
        batch[int(i)] = replace(batch[int(i)], cxrs=[])
    return batch


def label_matrix(records: Sequence[PatientRecord]) -> np.ndarray:
    return np.stack([r.labels for r in records]).astype(np.float64)


@dataclass
class ForwardResult:
    probs: Tensor
    logits: Tensor
    alpha: Tensor
    stack: SourceStack
    graph: PGraph
    records: list[PatientRecord]


def forward_detailed(batch: Sequence[PatientRecord], params: ModelParams,
                     correlation: DiseaseCorrelation, *, delta: float = 0.6,
                     window_length: float = 48.0, variant: str = "full",
                     slope: float = 0.01) -> ForwardResult:
    records = apply_variant(batch, variant)
    if not records:
        raise ValueError("empty batch")
    n = len(records)
    h = mlp(ehr_summaries(r.ehr for r in records), params.ehr_enc)
    graph = build_pgraph(records, h.data, np.inf if variant == "no-ehr-ehr" else delta, window_length)
    m_ee, has_nb = ehr_messages(h, graph.adjacency(), params.agg, slope)

    if graph.n_cxr:
        cxr_x = np.stack([c.features for r in records for c in r.cxrs])
        weights = temporal_weight_matrix(graph.cxr_owner(), graph.cxr_delta_t(), n)
        m_ec = cxr_messages(mlp(cxr_x, params.cxr_enc), weights, params.agg)
    else:
        m_ec = Tensor(np.zeros((n, params.agg.dim)))
    stack_ = stack_features(h, m_ee, m_ec, has_nb, graph.cxr_counts() > 0)

    if correlation.n_labels != params.head_W.shape[0]:
        raise DimensionError(
            f"correlation covers {correlation.n_labels} labels, heads expect {params.head_W.shape[0]}")
    prototypes = gcn_forward(correlation.A_hat, correlation.Z, params.gcn)
    fused, alpha = fuse_batch(stack_, prototypes, params.fusion, shared_query=variant == "no-cga")
    logits = (fused * params.head_W).sum(axis=-1) + params.head_b
    return ForwardResult(sigmoid(logits), logits, alpha, stack_, graph, records)


def forward(batch, params: ModelParams, correlation: DiseaseCorrelation, **kwargs) -> Tensor:
    """B x N matrix of per-disease probabilities."""
    return forward_detailed(batch, params, correlation, **kwargs).probs


def bce_loss(predictions: Tensor, labels) -> Tensor:
    """Negative log-likelihood summed over diseases, averaged over the batch."""
    y = np.asarray(labels, dtype=np.float64)
    if predictions.shape != y.shape:
        raise DimensionError(f"predictions {predictions.shape} vs labels {y.shape}")
    p = clip(predictions, PROB_EPS, 1.0 - PROB_EPS)
    ll = log(p) * y + log(1.0 - p) * (1.0 - y)
    return ll.sum() * (-1.0 / y.shape[0])


# -- optimization ----------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * p.grad
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * p.grad ** 2
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class Splits:
    train: list[PatientRecord]
    val: list[PatientRecord]
    test: list[PatientRecord]


def split_dataset(records: Sequence[PatientRecord], seed: int = 0,
                  ratios=(0.7, 0.1, 0.2)) -> Splits:
    """Seeded 7:1:2 shuffle split."""
    n = len(records)
    order = np.random.default_rng([seed, 7102]).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    pick = lambda idx: [records[i] for i in idx]  # noqa: E731
    return Splits(pick(order[:n_train]), pick(order[n_train:n_train + n_val]),
                  pick(order[n_train + n_val:]))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_macro_prauc: float


@dataclass
class TrainResult:
    params: ModelParams
    correlation: DiseaseCorrelation
    config: TrainConfig
    variant: str
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    splits: Splits | None = None


def predict(records: Sequence[PatientRecord], params: ModelParams, correlation: DiseaseCorrelation,
            config: TrainConfig, variant: str = "full", return_alpha: bool = False):
    """Probabilities for ``records`` evaluated in consecutive batches, in order."""
    bs = config.effective_eval_batch
    probs, alphas = [], []
    for start in range(0, len(records), bs):
        out = forward_detailed(records[start:start + bs], params, correlation, delta=config.delta,
                               window_length=config.window_length, variant=variant,
                               slope=config.leaky_slope)
        probs.append(out.probs.data)
        alphas.append(out.alpha.data)
    if not probs:
        n = params.head_W.shape[0]
        probs, alphas = [np.zeros((0, n))], [np.zeros((0, n, 3))]
    if return_alpha:
        return np.concatenate(probs), np.concatenate(alphas)
    return np.concatenate(probs)


def evaluate(records, params, correlation, config, variant: str = "full") -> PraucReport:
    return macro_prauc(predict(records, params, correlation, config, variant), label_matrix(records))


def train(dataset, config: TrainConfig | None = None, variant: str = "full",
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Fit a model; ``dataset`` is a record list (split 7:1:2) or :class:`Splits`.

    Returns the parameters of the epoch with the best validation macro PR-AUC.
    """
    config = config or TrainConfig()
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    splits = dataset if isinstance(dataset, Splits) else split_dataset(dataset, config.seed)
    if not splits.train:
        raise ValueError("training split is empty")
    rng = np.random.default_rng(config.seed)
    dims = Dims.infer(splits.train + splits.val + splits.test, config)
    params = ModelParams.init(dims, rng)
    correlation = DiseaseCorrelation.from_labels(label_matrix(splits.train), config.tau)
    opt = Adam(params.named(), lr=config.learning_rate)
    result = TrainResult(params, correlation, config, variant, splits=splits)

    best_score, best_state, stale = -math.inf, None, 0
    n = len(splits.train)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = [splits.train[i] for i in order[start:start + config.batch_size]]
            batch = cxr_dropout(batch, config.cxr_dropout_rate, rng)
            out = forward_detailed(batch, params, correlation, delta=config.delta,
                                   window_length=config.window_length, variant=variant,
                                   slope=config.leaky_slope)
            loss = bce_loss(out.probs, label_matrix(batch))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"loss became {value} at epoch {epoch}; try a smaller learning_rate "
                    f"(currently {config.learning_rate})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(batch)
        val = evaluate(splits.val, params, correlation, config, variant).macro if splits.val else math.nan
        rec = EpochRecord(epoch, total / n, val)
        result.history.append(rec)
        if on_epoch:
            on_epoch(rec)
        logger.info("epoch %d loss %.5f val macro-PRAUC %.4f", epoch, rec.train_loss, val)
        if best_state is None or (not math.isnan(val) and val > best_score):
            best_score = val if not math.isnan(val) else best_score
            best_state, result.best_epoch, stale = params.state(), epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    params.load_state(best_state)
    return result


@dataclass
class AblationResult:
    variant: str
    test: PraucReport
    training: TrainResult


def ablate(variant: str, dataset, config: TrainConfig | None = None) -> AblationResult:
    """Train the given architecture variant and score it on the test split."""
    config = config or TrainConfig()
    result = train(dataset, config, variant=variant)
    report = evaluate(result.splits.test, result.params, result.correlation, config, variant)
    return AblationResult(variant, report, result)


_CORR_FIELDS = ("counts", "cooccur", "A", "A_bin", "A_hat")


def save_model(result: TrainResult, path) -> None:
    from .checkpoint import write_checkpoint

    arrays = dict(result.params.state())
    for name in _CORR_FIELDS:
        arrays[f"corr.{name}"] = np.asarray(getattr(result.correlation, name), dtype=np.float64)
    dims = result.params.dims
    meta = {
        "config_hash": result.config.digest(),
        "config": result.config.to_dict(),
        "dims": dims.__dict__.copy(),
        "variant": result.variant,
        "best_epoch": result.best_epoch,
    }
    write_checkpoint(path, arrays, meta)


def load_model(path) -> TrainResult:
    """Rebuild params, correlation statistics and config from a checkpoint."""
    from .checkpoint import CheckpointError, read_checkpoint

    arrays, meta = read_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    if config.digest() != meta["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    dims = Dims(**meta["dims"])
    params = ModelParams.from_state(dims, {k: v for k, v in arrays.items() if not k.startswith("corr.")})
    corr = DiseaseCorrelation(*(arrays[f"corr.{n}"] for n in _CORR_FIELDS))
    return TrainResult(params, corr, config, meta["variant"], best_epoch=meta["best_epoch"])
