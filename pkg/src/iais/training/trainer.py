"""Regularized training on the synthetic task and the per-checkpoint record."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .. import autodiff as ad
from ..attention import EncoderParams, encode_batch, init_params, pooled_scores, score_pairs
from ..isda import isda
from ..regularizer import DISTRIBUTED, SINGULAR, alignment_terms
from ..tensor_ops import NonFiniteError, pearson
from .losses import LITERAL, PAIRWISE, SCHEDULES, lambda_schedule, margin_terms
from .retrieval import RetrievalMetrics, evaluate_retrieval
from .synthetic import (
    Batch,
    BatchComposition,
    HardNegativeTable,
    PairPools,
    SyntheticTask,
    generate_pools,
    generate_synthetic_batch,
)

log = logging.getLogger(__name__)

NONE = "none"
ANCHORS = ("both", "v", "l")
RECORD_FIELDS = ("step", "lambda", "margin_loss", "iais_loss", "iais_v", "iais_l", "isda",
                 "r1_i", "r5_i", "r10_i", "r1_t", "r5_t", "r10_t", "meta_sum")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float, detail: str = ""):
        msg = f"non-finite loss {value!r} at step {step}"
        super().__init__(f"{msg}: {detail}" if detail else msg)
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    margin_mode: str = PAIRWISE
    iais_kind: str = NONE
    anchor: str = "both"
    schedule: str = "exp"
    gamma: float = 5.0
    steps: int = 2000
    iais_layer: int = -1
    head_reduction: str = "mean"
    positives_per_batch: int = 4
    negatives_per_positive: int = 7
    seed: int = 0
    lr: float = 0.003
    checkpoint_every: int = 100
    hard_negatives: bool = True
    hard_candidates: int = 16
    d_model: int = 16
    n_layers: int = 2
    n_heads: int = 2
    # scale of the initial query/key projections (see init_params)
    qk_init_gain: float = 4.0
    # kind logged in the iais_* columns when iais_kind is "none"
    monitor_kind: str = SINGULAR

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.margin_mode not in (PAIRWISE, LITERAL):
            raise ValueError(f"margin_mode must be {PAIRWISE!r} or {LITERAL!r}")
        if self.iais_kind not in (NONE, SINGULAR, DISTRIBUTED):
            raise ValueError(f"iais_kind must be none, singular or distributed")
        if self.monitor_kind not in (SINGULAR, DISTRIBUTED):
            raise ValueError("monitor_kind must be singular or distributed")
        if self.anchor not in ANCHORS:
            raise ValueError(f"anchor must be one of {ANCHORS}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if not self.qk_init_gain > 0:
            raise ValueError("qk_init_gain must be > 0")
        if self.head_reduction not in ("mean", "sum"):
            raise ValueError("head_reduction must be 'mean' or 'sum'")
        if not -self.n_layers <= self.iais_layer < self.n_layers:
            raise ValueError(f"iais_layer {self.iais_layer} out of range for {self.n_layers} layers")

    @property
    def composition(self) -> BatchComposition:
        return BatchComposition(self.positives_per_batch, self.negatives_per_positive)

    @property
    def alignment_kind(self) -> str:
        return self.monitor_kind if self.iais_kind == NONE else self.iais_kind

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Checkpoint:
    step: int
    lam: float
    margin_loss: float
    iais_loss: float
    iais_v: float
    iais_l: float
    isda: float
    recall: RetrievalMetrics

    @property
    def meta_sum(self) -> float:
        return self.recall.meta_sum

    def row(self) -> dict:
        r = self.recall
        return {"step": self.step, "lambda": self.lam, "margin_loss": self.margin_loss,
                "iais_loss": self.iais_loss, "iais_v": self.iais_v, "iais_l": self.iais_l,
                "isda": self.isda, "r1_i": r.r1_i, "r5_i": r.r5_i, "r10_i": r.r10_i,
                "r1_t": r.r1_t, "r5_t": r.r5_t, "r10_t": r.r10_t, "meta_sum": r.meta_sum}


@dataclass
class RunRecord:
    config: TrainConfig
    task: SyntheticTask
    checkpoints: list[Checkpoint] = field(default_factory=list)
    params: EncoderParams | None = field(default=None, repr=False)

    def column(self, name: str) -> np.ndarray:
        return np.array([c.row()[name] for c in self.checkpoints], dtype=np.float64)

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]

    def pearson_isda_metasum(self) -> float | None:
        if len(self.checkpoints) < 2:
            return None
        try:
            return pearson(self.column("isda"), self.column("meta_sum"))
        except ValueError:
            return None

    def summary(self) -> dict:
        return {
            "final_isda": self.final.isda,
            "final_meta_sum": self.final.meta_sum,
            "pearson_isda_metasum": self.pearson_isda_metasum(),
            "config": self.config.to_dict(),
            "task": self.task.to_dict(),
        }


# -- loss -----------------------------------------------------------------------

@dataclass
class LossBreakdown:
    total: ad.Tensor
    margin: float
    iais_v: float
    iais_l: float
    lam: float

    @property
    def iais(self) -> float:
        return self.iais_v + self.iais_l


def _pair_alignment(enc, b: int, layer: int, kind: str, reduction: str, scale: float):
    lay = enc.layouts[b]
    nl, n = lay.n_l, lay.n
    s = enc.scores[layer][b, :, :n, :n]  # (H, N, N), graph-connected
    mats = [s.mean(axis=0)] if reduction == "mean" else [s[h] for h in range(s.shape[0])]
    v_total = l_total = None
    for m in mats:
        v, l = alignment_terms(kind, m[:nl, :nl], m[:nl, nl:], m[nl:, :nl], m[nl:, nl:], scale)
        v_total = v if v_total is None else v_total + v
        l_total = l if l_total is None else l_total + l
    return v_total, l_total


def alignment_loss(enc, positive_rows, params: EncoderParams, config: TrainConfig, kind: str):
    """Mean over positive pairs of the (V-anchored, L-anchored) alignment losses."""
    vs, ls = [], []
    for b in positive_rows:
        v, l = _pair_alignment(enc, b, config.iais_layer, kind, config.head_reduction,
                               params.attention_scale)
        vs.append(v)
        ls.append(l)
    k = 1.0 / len(vs)
    return ad.stack(vs).sum() * k, ad.stack(ls).sum() * k


def total_loss(features, n_pos: int, params: EncoderParams, tensors, config: TrainConfig,
               t: int) -> LossBreakdown:
    """``L_margin + lambda_t * L_align`` for a batch laid out as positives then negatives.

    ``features`` lists ``n_pos`` positive pairs followed by
    ``n_pos * negatives_per_positive`` negatives grouped by positive.
    """
    enc = encode_batch(features, params, tensors)
    s = pooled_scores(enc, tensors["head_w"], tensors["head_b"])
    pos = s[:n_pos]
    neg = s[n_pos:].reshape(n_pos, -1)
    margin = margin_terms(pos, neg, config.margin, config.margin_mode)
    lam = lambda_schedule(config.schedule, config.gamma, t, max(config.steps, 1))
    if config.iais_kind == NONE:
        return LossBreakdown(margin, margin.item(), 0.0, 0.0, lam)
    v, l = alignment_loss(enc, range(n_pos), params, config, config.iais_kind)
    reg = {"both": v + l, "v": v, "l": l}[config.anchor]
    # a zero weight leaves the graph untouched so gradients match the baseline bit for bit
    total = margin if lam == 0.0 else margin + reg * lam
    return LossBreakdown(total, margin.item(), v.item(), l.item(), lam)


# -- evaluation -----------------------------------------------------------------

def probe_isda(params: EncoderParams, probe, layer: int = -1) -> float:
    """Mean ISDa over matched probe pairs, from head-averaged attention probabilities."""
    enc = encode_batch([(p.text, p.regions) for p in probe], params)
    vals = []
    for b, pair in enumerate(probe):
        probs = enc.pair_probs(b, layer).mean(axis=0)
        nl = enc.layouts[b].n_l
        vals.append(isda(probs[:nl, :nl], probs[nl:, nl:], pair.annotations))
    return float(np.mean(vals))


def similarity_matrix(params: EncoderParams, pairs) -> np.ndarray:
    """Scores for every (text, image) combination of ``pairs``, rows are texts."""
    n = len(pairs)
    feats = [(pairs[t].text, pairs[v].regions) for t in range(n) for v in range(n)]
    return score_pairs(feats, params).reshape(n, n)


def mine_hard_negatives(params: EncoderParams, pool, config: TrainConfig, seed) -> HardNegativeTable:
    """Score a random candidate subset per pool pair and keep the hardest mismatches."""
    rng = np.random.default_rng(seed)
    n = len(pool)
    c = min(config.hard_candidates, n - 1)
    keep = max(config.negatives_per_positive, 2 * ((config.negatives_per_positive + 1) // 2))
    keep = min(keep, c)
    cands = np.empty((n, c), dtype=np.int64)
    for i in range(n):
        cands[i] = rng.choice(np.delete(np.arange(n), i), size=c, replace=False)
    img_feats = [(pool[i].text, pool[j].regions) for i in range(n) for j in cands[i]]
    txt_feats = [(pool[j].text, pool[i].regions) for i in range(n) for j in cands[i]]
    s_img = score_pairs(img_feats, params).reshape(n, c)
    s_txt = score_pairs(txt_feats, params).reshape(n, c)
    table = HardNegativeTable()
    for i in range(n):
        table.image_side[i] = cands[i][np.argsort(-s_img[i], kind="stable")[:keep]]
        table.text_side[i] = cands[i][np.argsort(-s_txt[i], kind="stable")[:keep]]
    return table


# -- training loop --------------------------------------------------------------

def sgd_step(params: EncoderParams, tensors, lr: float) -> EncoderParams:
    return params.replace({k: v - lr * tensors[k].grad for k, v in params.arrays.items()})


def _batch_seed(config: TrainConfig, t: int):
    return [config.seed, 1, t]


def train(config: TrainConfig, task: SyntheticTask, pools: PairPools | None = None) -> RunRecord:
    """Plain SGD on ``L_margin + lambda_t L_align``, checkpointing every ``checkpoint_every`` steps.

    Checkpoint rows at step ``t`` describe the parameters after ``t`` updates;
    the loss columns are evaluated on the batch that step ``t`` trains on.
    """
    pools = pools or generate_pools(task)
    probe = pools.eval[: task.probe_size]
    rng = np.random.default_rng([config.seed, 0])
    params = init_params(rng, d_in=task.feature_width, d_model=config.d_model, n_layers=config.n_layers,
                         n_heads=config.n_heads, max_tokens=task.max_tokens, qk_gain=config.qk_init_gain)
    record = RunRecord(config, task)
    hard = None
    steps = config.steps

    def checkpoint(t):
        cp = _checkpoint(params, pools, probe, config, t, hard)
        record.checkpoints.append(cp)
        log.info("step %d  lambda=%.4g margin=%.4g align=%.4g isda=%.4g meta_sum=%.2f",
                 t, cp.lam, cp.margin_loss, cp.iais_loss, cp.isda, cp.meta_sum)

    for t in range(steps + 1):
        if config.hard_negatives and t % config.checkpoint_every == 0 and t < steps:
            hard = mine_hard_negatives(params, pools.train, config, [config.seed, 2, t])
        if t % config.checkpoint_every == 0 or t == steps:
            checkpoint(t)
        if t == steps:
            break
        batch = generate_synthetic_batch(pools.train, _batch_seed(config, t), config.composition, hard)
        tensors = params.tensors()
        try:
            out = total_loss(batch.features(pools.train), len(batch.positives), params, tensors, config, t)
        except NonFiniteError as e:
            raise TrainingDiverged(t, float("nan"), str(e)) from e
        value = out.total.item()
        if not math.isfinite(value):
            raise TrainingDiverged(t, value)
        out.total.backward()
        params = sgd_step(params, tensors, config.lr)
    record.params = params
    return record


def _checkpoint(params, pools: PairPools, probe, config, t, hard) -> Checkpoint:
    batch = generate_synthetic_batch(pools.train, _batch_seed(config, t), config.composition, hard)
    feats = batch.features(pools.train)
    n_pos = len(batch.positives)
    lam = lambda_schedule(config.schedule, config.gamma, t, max(config.steps, 1))
    enc = encode_batch(feats, params)
    w, b = params.arrays["head_w"], params.arrays["head_b"]
    s = pooled_scores(enc, w, b)
    margin = margin_terms(s[:n_pos], s[n_pos:].reshape(n_pos, -1), config.margin, config.margin_mode).item()
    v, l = alignment_loss(enc, range(n_pos), params, config, config.alignment_kind)
    iv, il = v.item(), l.item()
    recall = evaluate_retrieval(similarity_matrix(params, pools.eval))
    return Checkpoint(t, lam, margin, iv + il, iv, il, probe_isda(params, probe), recall)
