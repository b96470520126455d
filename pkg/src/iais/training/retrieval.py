"""Recall@K for text-to-image and image-to-text retrieval."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KS = (1, 5, 10)


@dataclass(frozen=True)
class RetrievalMetrics:
    """Recalls in percent. ``*_i`` is image retrieval (text queries), ``*_t`` text retrieval."""

    r1_i: float
    r5_i: float
    r10_i: float
    r1_t: float
    r5_t: float
    r10_t: float

    @property
    def meta_sum(self) -> float:
        return self.r1_i + self.r5_i + self.r10_i + self.r1_t + self.r5_t + self.r10_t

    def as_dict(self) -> dict[str, float]:
        return {"r1_i": self.r1_i, "r5_i": self.r5_i, "r10_i": self.r10_i,
                "r1_t": self.r1_t, "r5_t": self.r5_t, "r10_t": self.r10_t, "meta_sum": self.meta_sum}


def ranks_of_truth(scores: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """0-based rank of ``truth[q]`` within row ``q``; ties go to the lower index."""
    rows = np.arange(scores.shape[0])
    gt = scores[rows, truth][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    better = (scores > gt) | ((scores == gt) & (cols < truth[:, None]))
    return better.sum(axis=1)


def recall_at(ranks: np.ndarray, k: int, candidates: int) -> float:
    if k > candidates:
        raise ValueError(f"K={k} exceeds the {candidates} candidates")
    return 100.0 * float(np.mean(ranks < k))


def evaluate_retrieval(similarity, text_to_image=None) -> RetrievalMetrics:
    """Recall@{1,5,10} in both directions from a texts x images score matrix.

    ``text_to_image[t]`` is the ground-truth image of text ``t``; the mapping
    must be one-to-one. Defaults to the identity.
    """
    s = np.asarray(similarity, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError("similarity must be a texts x images matrix")
    n_t, n_i = s.shape
    gt = np.arange(n_t) if text_to_image is None else np.asarray(text_to_image, dtype=np.int64)
    if gt.shape != (n_t,) or np.any(gt < 0) or np.any(gt >= n_i) or len(set(gt.tolist())) != n_t:
        raise ValueError("text_to_image must map every text to a distinct image")
    image_to_text = np.full(n_i, -1)
    image_to_text[gt] = np.arange(n_t)
    if np.any(image_to_text < 0):
        raise ValueError("every image needs exactly one ground-truth text")
    ranks_i = ranks_of_truth(s, gt)
    ranks_t = ranks_of_truth(s.T, image_to_text)
    vals = [recall_at(ranks_i, k, n_i) for k in KS] + [recall_at(ranks_t, k, n_t) for k in KS]
    return RetrievalMetrics(*vals)
