"""Relation-level alignment of multimodal self-attention."""

from .attention import AttentionBlocks, EncoderParams, ModalityLayout, compute_scores, encode_pair, split_blocks
from .isda import ObjectAnnotationSet, compress_by_objects, cps, ext_patch, isda
from .regularizer import distributed_mirror, iais_distributed, iais_singular, singular_mirror
from .tensor_ops import kl_div, m_kl, pearson, row_argmax, row_softmax

__version__ = "0.1.0"
