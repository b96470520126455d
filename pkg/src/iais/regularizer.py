"""Mirrored self-attention and the singular / distributed alignment losses.

Each modality's self-attention is rebuilt from the other modality's view
(through the inter-modal blocks) and compared with the original using the
symmetric matrix KL. ``σ`` below is a row softmax applied to one block at a
time.

The loss functions come in two flavours: ``*_terms`` operate on
:class:`~iais.autodiff.Tensor` blocks and keep the graph for training;
:func:`iais_singular` / :func:`iais_distributed` take plain
:class:`~iais.attention.AttentionBlocks` and return floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import TEXT, VISUAL, AttentionBlocks
from .tensor_ops import as_matrix, row_argmax, row_softmax

SINGULAR, DISTRIBUTED = "singular", "distributed"


@dataclass(frozen=True)
class IAISParts:
    """Vision-anchored and language-anchored addends of an alignment loss."""

    v: float
    l: float

    @property
    def total(self) -> float:
        return self.v + self.l


@dataclass(frozen=True)
class MirroredAttention:
    original: np.ndarray
    mirrored: np.ndarray
    anchor: str
    kind: str

    def __post_init__(self):
        if np.shape(self.original) != np.shape(self.mirrored):
            raise ValueError("mirrored matrix must match the original's shape")


def singular_mirror(s_src_intra, s_cross) -> np.ndarray:
    """Rebuild the anchor's self-attention by argmax lookup into the other modality.

    To mirror the visual block pass ``S_LL`` and ``S_VL``; for the linguistic
    block pass ``S_VV`` and ``S_LV``. ``out[i, j] = s_src[a[i], a[j]]`` with
    ``a = row_argmax(s_cross)``.
    """
    src = as_matrix(s_src_intra, "source intra-modal block")
    cross = as_matrix(s_cross, "cross-modal block")
    if src.shape[0] != src.shape[1]:
        raise ValueError(f"source block must be square, got {src.shape}")
    if cross.shape[1] != src.shape[0]:
        raise ValueError(f"cross block has {cross.shape[1]} columns, source block has size {src.shape[0]}")
    a = row_argmax(cross)
    return src[np.ix_(a, a)]


def distributed_mirror(s_vl, s_lv, scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """``(σ(S_VL) σ(S_LV), σ(S_LV) σ(S_VL))``; both products are row-stochastic."""
    s_vl = as_matrix(s_vl, "S_VL")
    s_lv = as_matrix(s_lv, "S_LV")
    if s_vl.shape[1] != s_lv.shape[0] or s_lv.shape[1] != s_vl.shape[0]:
        raise ValueError(f"inner dimensions do not match: S_VL {s_vl.shape}, S_LV {s_lv.shape}")
    p_vl = row_softmax(s_vl, scale)
    p_lv = row_softmax(s_lv, scale)
    return p_vl @ p_lv, p_lv @ p_vl


def mirrors(blocks: AttentionBlocks, kind: str, scale: float = 1.0) -> dict[str, MirroredAttention]:
    """Original/mirrored pairs for both anchors, keyed by modality tag."""
    if kind == SINGULAR:
        vv = singular_mirror(blocks.s_ll, blocks.s_vl)
        ll = singular_mirror(blocks.s_vv, blocks.s_lv)
        orig_v, orig_l = blocks.s_vv, blocks.s_ll
    elif kind == DISTRIBUTED:
        vv, ll = distributed_mirror(blocks.s_vl, blocks.s_lv, scale)
        orig_v, orig_l = row_softmax(blocks.s_vv, scale), row_softmax(blocks.s_ll, scale)
    else:
        raise ValueError(f"unknown alignment kind {kind!r}")
    return {
        VISUAL: MirroredAttention(orig_v, vv, VISUAL, kind),
        TEXT: MirroredAttention(orig_l, ll, TEXT, kind),
    }


# -- differentiable losses -------------------------------------------------------

def _argmax(t: ad.Tensor) -> np.ndarray:
    return np.argmax(t.data, axis=-1)


def singular_terms(s_ll, s_lv, s_vl, s_vv, scale: float = 1.0) -> tuple[ad.Tensor, ad.Tensor]:
    """Vision- and language-anchored singular losses as graph nodes.

    The argmax indices are constants; gradients flow through the gathered
    entries into the source block.
    """
    s_ll, s_lv, s_vl, s_vv = (ad.as_tensor(t) for t in (s_ll, s_lv, s_vl, s_vv))
    a_v = _argmax(s_vl)
    a_l = _argmax(s_lv)
    mirrored_vv = s_ll[a_v[:, None], a_v[None, :]]
    mirrored_ll = s_vv[a_l[:, None], a_l[None, :]]
    v = ad.sym_kl_rows(ad.softmax(s_vv, scale=scale), ad.softmax(mirrored_vv, scale=scale))
    l = ad.sym_kl_rows(ad.softmax(s_ll, scale=scale), ad.softmax(mirrored_ll, scale=scale))
    return v, l


def distributed_terms(s_ll, s_lv, s_vl, s_vv, scale: float = 1.0) -> tuple[ad.Tensor, ad.Tensor]:
    s_ll, s_lv, s_vl, s_vv = (ad.as_tensor(t) for t in (s_ll, s_lv, s_vl, s_vv))
    p_vl = ad.softmax(s_vl, scale=scale)
    p_lv = ad.softmax(s_lv, scale=scale)
    v = ad.sym_kl_rows(ad.softmax(s_vv, scale=scale), p_vl @ p_lv)
    l = ad.sym_kl_rows(ad.softmax(s_ll, scale=scale), p_lv @ p_vl)
    return v, l


TERMS = {SINGULAR: singular_terms, DISTRIBUTED: distributed_terms}


def alignment_terms(kind: str, s_ll, s_lv, s_vl, s_vv, scale: float = 1.0):
    try:
        fn = TERMS[kind]
    except KeyError:
        raise ValueError(f"unknown alignment kind {kind!r}") from None
    return fn(s_ll, s_lv, s_vl, s_vv, scale)


def _evaluate(kind: str, blocks: AttentionBlocks, scale: float) -> tuple[float, IAISParts]:
    v, l = alignment_terms(kind, blocks.s_ll, blocks.s_lv, blocks.s_vl, blocks.s_vv, scale)
    parts = IAISParts(v.item(), l.item())
    return parts.total, parts


def iais_singular(blocks: AttentionBlocks, scale: float = 1.0) -> tuple[float, IAISParts]:
    return _evaluate(SINGULAR, blocks, scale)


def iais_distributed(blocks: AttentionBlocks, scale: float = 1.0) -> tuple[float, IAISParts]:
    return _evaluate(DISTRIBUTED, blocks, scale)
