"""Annotation-grouped comparison of intra-modal self-attention (ISDa).

Each annotated object owns a set of token positions and a set of region
positions. Both intra-modal attention blocks are summarised object-by-object
into N x N matrices, which are then compared with the symmetric row-summed
KL divergence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import TEXT, VISUAL, ModalityLayout
from .tensor_ops import as_matrix, floor_and_renormalize, m_kl, m_kl_rows


@dataclass(frozen=True)
class AnnotatedObject:
    name: str
    token_indices: tuple[int, ...]
    region_indices: tuple[int, ...]


class ObjectAnnotationSet:
    """Ordered objects, each mapped to token and region index sets.

    The same position in the list names the same object in both
    modalities. Index bounds are checked by :meth:`validate_layout` once a
    layout is known.
    """

    def __init__(self, objects: Sequence[AnnotatedObject]):
        objects = list(objects)
        if not objects:
            raise ValueError("annotation set needs at least one object")
        for i, obj in enumerate(objects):
            for kind, idx in (("token_indices", obj.token_indices), ("region_indices", obj.region_indices)):
                if len(idx) == 0:
                    raise ValueError(f"object {i} ({obj.name!r}): empty {kind}")
                if len(set(idx)) != len(idx):
                    raise ValueError(f"object {i} ({obj.name!r}): duplicate entry in {kind}")
                if any((not isinstance(j, (int, np.integer))) or j < 0 for j in idx):
                    raise ValueError(f"object {i} ({obj.name!r}): {kind} must be non-negative integers")
        self.objects: tuple[AnnotatedObject, ...] = tuple(
            AnnotatedObject(o.name, tuple(int(j) for j in o.token_indices), tuple(int(j) for j in o.region_indices))
            for o in objects
        )

    @classmethod
    def from_lists(cls, token_sets, region_sets, names=None) -> "ObjectAnnotationSet":
        if len(token_sets) != len(region_sets):
            raise ValueError("token and region groupings must list the same number of objects")
        names = names or [f"object_{i}" for i in range(len(token_sets))]
        return cls([AnnotatedObject(n, tuple(t), tuple(r)) for n, t, r in zip(names, token_sets, region_sets)])

    def __len__(self) -> int:
        return len(self.objects)

    def __eq__(self, other) -> bool:
        return isinstance(other, ObjectAnnotationSet) and self.objects == other.objects

    def __repr__(self) -> str:
        return f"ObjectAnnotationSet({len(self)} objects)"

    def indices(self, modality: str) -> list[tuple[int, ...]]:
        if modality == TEXT:
            return [o.token_indices for o in self.objects]
        if modality == VISUAL:
            return [o.region_indices for o in self.objects]
        raise ValueError(f"unknown modality {modality!r}")

    def permuted(self, order: Sequence[int]) -> "ObjectAnnotationSet":
        return ObjectAnnotationSet([self.objects[i] for i in order])

    def validate_layout(self, layout: ModalityLayout) -> None:
        for modality, bound in ((TEXT, layout.n_l), (VISUAL, layout.n_v)):
            self.validate_bound(modality, bound)

    def validate_bound(self, modality: str, bound: int) -> None:
        for i, idx in enumerate(self.indices(modality)):
            for j in idx:
                if j >= bound:
                    raise IndexError(f"object {i} ({self.objects[i].name!r}): index {j} out of range for "
                                     f"{'linguistic' if modality == TEXT else 'visual'} size {bound}")


@dataclass(frozen=True)
class CompressedAttention:
    matrix: np.ndarray
    modality: str


def ext_patch(s, row_indices: Sequence[int], col_indices: Sequence[int]) -> np.ndarray:
    """Gather ``s[rows][:, cols]`` in the listed order."""
    s = as_matrix(s, "attention")
    for axis, idx in ((0, row_indices), (1, col_indices)):
        for j in idx:
            if not 0 <= j < s.shape[axis]:
                raise IndexError(f"index {j} out of bounds for axis {axis} with size {s.shape[axis]}")
    return s[np.ix_(list(row_indices), list(col_indices))]


def cps(patch) -> float:
    """Sum over columns, averaged over rows: ``sum(patch) / rows``."""
    patch = as_matrix(patch, "patch")
    return float(patch.sum() / patch.shape[0])


def compress_by_objects(s_intra, annotations: ObjectAnnotationSet, modality: str) -> CompressedAttention:
    s = as_matrix(s_intra, "intra-modal attention")
    if s.shape[0] != s.shape[1]:
        raise ValueError(f"intra-modal block must be square, got {s.shape}")
    annotations.validate_bound(modality, s.shape[0])
    groups = annotations.indices(modality)
    n = len(groups)
    out = np.empty((n, n))
    for i, gi in enumerate(groups):
        rows = s[list(gi)]
        for j, gj in enumerate(groups):
            out[i, j] = rows[:, list(gj)].sum() / len(gi)
    return CompressedAttention(out, modality)


def block_normalize(block) -> np.ndarray:
    """Rescale rows of a non-negative block to sum to one (epsilon floored)."""
    b = as_matrix(block, "block")
    if np.any(b < 0):
        raise ValueError("attention block must be non-negative")
    return floor_and_renormalize(b)


def _compressed_pair(s_ll, s_vv, annotations: ObjectAnnotationSet, renormalize: bool):
    a_l = compress_by_objects(block_normalize(s_ll), annotations, TEXT).matrix
    a_v = compress_by_objects(block_normalize(s_vv), annotations, VISUAL).matrix
    if renormalize:
        a_l, a_v = floor_and_renormalize(a_l), floor_and_renormalize(a_v)
    return a_l, a_v


def _raw_m_kl(a: np.ndarray, b: np.ndarray) -> float:
    # Rows of un-renormalized Cps matrices are not distributions; only floored.
    p = np.maximum(a, 1e-12)
    q = np.maximum(b, 1e-12)
    return float(np.sum((p - q) * (np.log(p) - np.log(q))))


def isda(s_ll, s_vv, annotations: ObjectAnnotationSet, renormalize: bool = True) -> float:
    """ISDa between the linguistic and visual self-attention blocks of one pair.

    ``s_ll`` and ``s_vv`` are post-softmax probabilities (the intra-modal
    blocks of a full-row softmax); rows are renormalized within each block
    before grouping. With ``renormalize=False`` the compressed rows are
    compared as-is.
    """
    a_l, a_v = _compressed_pair(s_ll, s_vv, annotations, renormalize)
    return m_kl(a_l, a_v) if renormalize else _raw_m_kl(a_l, a_v)


def isda_breakdown(s_ll, s_vv, annotations: ObjectAnnotationSet) -> np.ndarray:
    """Per-object contributions (rows of the m-KL sum) to :func:`isda`."""
    a_l, a_v = _compressed_pair(s_ll, s_vv, annotations, True)
    return m_kl_rows(a_l, a_v)
