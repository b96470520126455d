"""Synthetic paired-modality data with ground-truth object annotations.

Every pair draws fresh latent object vectors. Each object is described by a
few tokens and a few regions, all noisy copies of its latent vector, so a
matched text and image share latents while a re-paired text/image does not.
Tokens of one object are contiguous (objects in a random order); regions are
fully shuffled.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..isda import AnnotatedObject, ObjectAnnotationSet


@dataclass(frozen=True)
class PairSample:
    text: np.ndarray
    regions: np.ndarray
    annotations: ObjectAnnotationSet
    latents: np.ndarray


@dataclass(frozen=True)
class SyntheticTask:
    n_objects: int = 4
    tokens_per_object: tuple[int, int] = (1, 3)
    regions_per_object: tuple[int, int] = (1, 2)
    feature_width: int = 16
    noise: float = 0.25
    # latents come from a shared table of object types; 0 draws fresh latents per pair
    vocab_size: int = 32
    pool_size: int = 1024
    probe_size: int = 64
    eval_size: int = 100
    seed: int = 7

    def __post_init__(self):
        if self.n_objects < 1:
            raise ValueError("n_objects must be >= 1")
        for name in ("tokens_per_object", "regions_per_object"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 1 <= low <= high")
        if self.vocab_size and self.vocab_size < self.n_objects:
            raise ValueError("vocab_size must be 0 or >= n_objects")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.probe_size > self.eval_size:
            raise ValueError("probe_size cannot exceed eval_size")
        if self.eval_size < 10:
            raise ValueError("eval_size must be >= 10 for Recall@10")

    @property
    def max_tokens(self) -> int:
        return self.n_objects * self.tokens_per_object[1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTask":
        d = dict(d)
        for k in ("tokens_per_object", "regions_per_object"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def object_vocabulary(task: SyntheticTask) -> np.ndarray | None:
    if not task.vocab_size:
        return None
    return np.random.default_rng([task.seed, 99]).normal(0.0, 1.0, size=(task.vocab_size, task.feature_width))


def make_pair(task: SyntheticTask, rng: np.random.Generator, vocab: np.ndarray | None = None) -> PairSample:
    k, d = task.n_objects, task.feature_width
    if vocab is None:
        latents = rng.normal(0.0, 1.0, size=(k, d))
    else:
        latents = vocab[rng.choice(vocab.shape[0], size=k, replace=False)]
    n_tok = rng.integers(task.tokens_per_object[0], task.tokens_per_object[1] + 1, size=k)
    n_reg = rng.integers(task.regions_per_object[0], task.regions_per_object[1] + 1, size=k)

    text_order = rng.permutation(k)
    token_owner = np.concatenate([np.full(n_tok[o], o) for o in text_order])
    region_owner = rng.permutation(np.concatenate([np.full(n_reg[o], o) for o in range(k)]))

    text = latents[token_owner] + task.noise * rng.normal(size=(token_owner.size, d))
    regions = latents[region_owner] + task.noise * rng.normal(size=(region_owner.size, d))

    objects = [
        AnnotatedObject(
            f"object_{o}",
            tuple(int(i) for i in np.flatnonzero(token_owner == o)),
            tuple(int(i) for i in np.flatnonzero(region_owner == o)),
        )
        for o in range(k)
    ]
    return PairSample(text, regions, ObjectAnnotationSet(objects), latents)


@dataclass(frozen=True)
class PairPools:
    train: list[PairSample]
    eval: list[PairSample]

    @property
    def probe(self) -> list[PairSample]:
        return self.eval


def generate_pools(task: SyntheticTask) -> PairPools:
    rng = np.random.default_rng(task.seed)
    vocab = object_vocabulary(task)
    train = [make_pair(task, rng, vocab) for _ in range(task.pool_size)]
    held_out = [make_pair(task, rng, vocab) for _ in range(task.eval_size)]
    return PairPools(train, held_out)


@dataclass(frozen=True)
class Batch:
    """Indices into a pair pool.

    ``positives[p]`` is a matched pair index; ``negatives[p]`` lists
    ``(text_index, image_index)`` mismatches built around it.
    """

    positives: tuple[int, ...]
    negatives: tuple[tuple[tuple[int, int], ...], ...]

    def features(self, pool: Sequence[PairSample]) -> list[tuple[np.ndarray, np.ndarray]]:
        feats = [(pool[i].text, pool[i].regions) for i in self.positives]
        for negs in self.negatives:
            feats.extend((pool[t].text, pool[v].regions) for t, v in negs)
        return feats


@dataclass(frozen=True)
class BatchComposition:
    positives: int = 4
    negatives_per_positive: int = 7


@dataclass
class HardNegativeTable:
    """Hardest mismatched partners per pool index, for both sides; batches sample among them."""

    image_side: dict[int, np.ndarray] = field(default_factory=dict)
    text_side: dict[int, np.ndarray] = field(default_factory=dict)


def generate_synthetic_batch(pool: Sequence[PairSample], seed, composition: BatchComposition,
                             hard: HardNegativeTable | None = None) -> Batch:
    """Draw positives and re-paired negatives deterministically from ``seed``.

    Negatives alternate between keeping the text with a foreign image and
    keeping the image with a foreign text. With a ``hard`` table, foreign
    partners come from its ranked candidates instead of uniformly.
    """
    n = len(pool)
    p, m = composition.positives, composition.negatives_per_positive
    if m < 1:
        raise ValueError("negatives_per_positive must be >= 1")
    if p > n or n < 2 or (hard is None and m > 2 * (n - 1)):
        raise ValueError(f"pool of {n} pairs cannot supply {p} positives with {m} negatives each")
    rng = np.random.default_rng(seed)
    positives = rng.choice(n, size=p, replace=False)
    negatives = []
    n_img = (m + 1) // 2
    n_txt = m - n_img
    for i in positives:
        i = int(i)
        if hard is not None and i in hard.image_side:
            imgs = rng.permutation(hard.image_side[i])[:n_img]
            txts = rng.permutation(hard.text_side[i])[:n_txt]
        else:
            others = np.delete(np.arange(n), i)
            imgs = rng.choice(others, size=n_img, replace=n_img > others.size)
            txts = rng.choice(others, size=n_txt, replace=n_txt > others.size)
        negs = []
        for j in range(max(n_img, n_txt)):
            if j < len(imgs):
                negs.append((i, int(imgs[j])))
            if j < len(txts):
                negs.append((int(txts[j]), i))
        if len(negs) < m:
            raise ValueError(f"hard-negative table for pair {i} has too few candidates")
        negatives.append(tuple(negs[:m]))
    return Batch(tuple(int(i) for i in positives), tuple(negatives))
