"""Single-stream joint attention and its four-block decomposition.

The joint sequence is ``[text tokens | image regions]``: linguistic
positions come first, visual positions after them. All block extraction in
the package relies on that order.

The encoder here is deliberately small: pre-layer-norm transformer layers,
learned modality-type embeddings, learned positions for tokens only (regions
are treated as a set), and no boundary tokens. Batches of pairs with
different lengths are right-padded and masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .tensor_ops import NonFiniteError, as_matrix

TEXT, VISUAL = "L", "V"


@dataclass(frozen=True)
class ModalityLayout:
    n_l: int
    n_v: int

    def __post_init__(self):
        if self.n_l < 1 or self.n_v < 1:
            raise ValueError(f"layout needs n_l >= 1 and n_v >= 1, got ({self.n_l}, {self.n_v})")

    @property
    def n(self) -> int:
        return self.n_l + self.n_v


@dataclass(frozen=True)
class AttentionBlocks:
    """The S_LL / S_LV / S_VL / S_VV sub-matrices of a joint N x N matrix."""

    s_ll: np.ndarray
    s_lv: np.ndarray
    s_vl: np.ndarray
    s_vv: np.ndarray
    layout: ModalityLayout

    def __post_init__(self):
        nl, nv = self.layout.n_l, self.layout.n_v
        expected = {"s_ll": (nl, nl), "s_lv": (nl, nv), "s_vl": (nv, nl), "s_vv": (nv, nv)}
        for name, shape in expected.items():
            got = np.shape(getattr(self, name))
            if got != shape:
                raise ValueError(f"{name} has shape {got}, layout requires {shape}")

    def assemble(self) -> np.ndarray:
        return np.block([[self.s_ll, self.s_lv], [self.s_vl, self.s_vv]])


def split_blocks(s, layout: ModalityLayout) -> AttentionBlocks:
    s = as_matrix(s, "joint scores")
    if s.shape != (layout.n, layout.n):
        raise ValueError(f"joint matrix is {s.shape}, layout ({layout.n_l}, {layout.n_v}) needs {(layout.n, layout.n)}")
    nl = layout.n_l
    return AttentionBlocks(
        s_ll=s[:nl, :nl].copy(),
        s_lv=s[:nl, nl:].copy(),
        s_vl=s[nl:, :nl].copy(),
        s_vv=s[nl:, nl:].copy(),
        layout=layout,
    )


def compute_scores(x, w_q, w_k) -> np.ndarray:
    """Raw attention scores ``(X W_Q)(X W_K)^T``; no scaling, no softmax."""
    x = as_matrix(x, "X")
    w_q = as_matrix(w_q, "W_Q")
    w_k = as_matrix(w_k, "W_K")
    if w_q.shape[0] != x.shape[1] or w_k.shape[0] != x.shape[1]:
        raise ValueError(f"projection rows must equal feature width {x.shape[1]}")
    if w_q.shape[1] != w_k.shape[1]:
        raise ValueError(f"query width {w_q.shape[1]} differs from key width {w_k.shape[1]}")
    return (x @ w_q) @ (x @ w_k).T


# -- parameters ----------------------------------------------------------------

@dataclass(frozen=True)
class EncoderParams:
    """Weights of the toy encoder and its similarity head.

    ``arrays`` maps parameter names to float64 arrays. The container is
    treated as immutable: optimizers build a new instance per step.
    """

    n_layers: int
    n_heads: int
    d_model: int
    d_in: int
    d_ff: int
    max_tokens: int
    arrays: Mapping[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def attention_scale(self) -> float:
        return 1.0 / math.sqrt(self.d_head)

    def names(self) -> list[str]:
        return list(self.arrays)

    def tensors(self, requires_grad: bool = True) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.arrays.items()}

    def replace(self, arrays: Mapping[str, np.ndarray]) -> "EncoderParams":
        return EncoderParams(self.n_layers, self.n_heads, self.d_model, self.d_in, self.d_ff,
                             self.max_tokens, dict(arrays))

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


def layer_param_names(layer: int) -> list[str]:
    p = f"l{layer}."
    return [p + n for n in ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")]


def init_params(rng: np.random.Generator, *, d_in: int, d_model: int = 16, n_layers: int = 2,
                n_heads: int = 2, d_ff: int | None = None, max_tokens: int = 32,
                qk_gain: float = 1.0) -> EncoderParams:
    """Random encoder parameters. ``qk_gain`` scales the query/key projections,
    so gains above 1 start the network with peaked, arbitrary attention."""
    d_ff = d_ff or 2 * d_model

    def normal(*shape, fan_in):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

    arrays: dict[str, np.ndarray] = {
        "w_in": normal(d_in, d_model, fan_in=d_in),
        "b_in": np.zeros(d_model),
        "type_emb": rng.normal(0.0, 0.1, size=(2, d_model)),
        "pos_emb": rng.normal(0.0, 0.1, size=(max_tokens, d_model)),
    }
    for layer in range(n_layers):
        p = f"l{layer}."
        arrays[p + "ln1_g"] = np.ones(d_model)
        arrays[p + "ln1_b"] = np.zeros(d_model)
        for w in ("wq", "wk", "wv", "wo"):
            arrays[p + w] = normal(d_model, d_model, fan_in=d_model)
        arrays[p + "wq"] *= qk_gain
        arrays[p + "wk"] *= qk_gain
        arrays[p + "ln2_g"] = np.ones(d_model)
        arrays[p + "ln2_b"] = np.zeros(d_model)
        arrays[p + "w1"] = normal(d_model, d_ff, fan_in=d_model)
        arrays[p + "b1"] = np.zeros(d_ff)
        arrays[p + "w2"] = normal(d_ff, d_model, fan_in=d_ff)
        arrays[p + "b2"] = np.zeros(d_model)
    arrays["head_w"] = normal(d_model, fan_in=d_model)
    arrays["head_b"] = np.zeros(1)
    return EncoderParams(n_layers, n_heads, d_model, d_in, d_ff, max_tokens, arrays)


# -- forward pass ----------------------------------------------------------------

@dataclass
class BatchEncoding:
    """Padded forward pass over a batch of pairs.

    ``scores[layer]`` has shape (B, H, Nmax, Nmax) and holds the raw
    pre-softmax scores each head used; ``probs[layer]`` the masked softmax.
    """

    hidden: ad.Tensor
    scores: list[ad.Tensor]
    probs: list[ad.Tensor]
    layouts: list[ModalityLayout]
    mask: np.ndarray  # (B, Nmax) True on real positions

    def pair_scores(self, b: int, layer: int = -1) -> np.ndarray:
        """Raw scores of pair ``b`` at ``layer``, shape (H, N, N)."""
        n = self.layouts[b].n
        return self.scores[layer].data[b, :, :n, :n]

    def pair_probs(self, b: int, layer: int = -1) -> np.ndarray:
        n = self.layouts[b].n
        return self.probs[layer].data[b, :, :n, :n]


@dataclass(frozen=True)
class EncodedPair:
    hidden: np.ndarray  # (N, d)
    scores: list[list[np.ndarray]]  # [layer][head] -> (N, N) raw scores
    layout: ModalityLayout
    attention_scale: float

    def last_layer_scores(self, reduce: str = "mean") -> np.ndarray:
        stacked = np.stack(self.scores[-1])
        if reduce == "mean":
            return stacked.mean(axis=0)
        if reduce == "sum":
            return stacked.sum(axis=0)
        raise ValueError(f"unknown head reduction {reduce!r}")


def _embed(features: Sequence[tuple[np.ndarray, np.ndarray]], p: Mapping[str, ad.Tensor],
           max_tokens: int):
    layouts = []
    for text, region in features:
        layouts.append(ModalityLayout(len(text), len(region)))
    n_max = max(lay.n for lay in layouts)
    d_in = p["w_in"].shape[0]
    batch = len(features)
    feats = np.zeros((batch, n_max, d_in))
    type_ids = np.zeros((batch, n_max), dtype=np.int64)
    pos_ids = np.zeros((batch, n_max), dtype=np.int64)
    text_mask = np.zeros((batch, n_max, 1))
    mask = np.zeros((batch, n_max), dtype=bool)
    for b, ((text, region), lay) in enumerate(zip(features, layouts)):
        text = np.asarray(text, dtype=np.float64)
        region = np.asarray(region, dtype=np.float64)
        if text.ndim != 2 or region.ndim != 2 or text.shape[1] != d_in or region.shape[1] != d_in:
            raise ValueError(f"pair {b}: features must be 2-D with width {d_in}")
        if lay.n_l > max_tokens:
            raise ValueError(f"pair {b}: {lay.n_l} tokens exceeds max_tokens={max_tokens}")
        feats[b, : lay.n_l] = text
        feats[b, lay.n_l : lay.n] = region
        type_ids[b, lay.n_l : lay.n] = 1
        pos_ids[b, : lay.n_l] = np.arange(lay.n_l)
        text_mask[b, : lay.n_l] = 1.0
        mask[b, : lay.n] = True
    if not np.all(np.isfinite(feats)):
        raise NonFiniteError("non-finite input features")
    x = ad.matmul(ad.Tensor(feats), p["w_in"]) + p["b_in"]
    x = x + p["type_emb"][type_ids]
    x = x + p["pos_emb"][pos_ids] * text_mask
    return x, layouts, mask


def _check_finite(t: ad.Tensor, layer: int, what: str, mask: np.ndarray) -> None:
    data = t.data
    if np.all(np.isfinite(data)):
        return
    # scores carry a head axis; locate the first offending head on a real position
    if data.ndim == 4:
        valid = mask[:, None, :, None] & mask[:, None, None, :]
        bad = np.argwhere(~np.isfinite(data) & valid)
        if bad.size:
            b, h = int(bad[0][0]), int(bad[0][1])
            raise NonFiniteError(f"non-finite {what} in layer {layer}, head {h} (pair {b})")
        return
    raise NonFiniteError(f"non-finite {what} in layer {layer}")


def encode_batch(features: Sequence[tuple[np.ndarray, np.ndarray]], params: EncoderParams,
                 tensors: Mapping[str, ad.Tensor] | None = None) -> BatchEncoding:
    """Forward pass over ``[(text_features, region_features), ...]``.

    Pass ``tensors`` (from :meth:`EncoderParams.tensors`) to record the graph
    for differentiation; otherwise constants are used.
    """
    p = tensors if tensors is not None else params.tensors(requires_grad=False)
    x, layouts, mask = _embed(features, p, params.max_tokens)
    batch, n_max, d = x.shape
    h_count, dh = params.n_heads, params.d_head
    key_mask = mask[:, None, None, :]
    scores, probs = [], []
    for layer in range(params.n_layers):
        q = f"l{layer}."
        y = ad.layer_norm(x, p[q + "ln1_g"], p[q + "ln1_b"])

        def heads(t):
            return t.reshape(batch, n_max, h_count, dh).transpose(0, 2, 1, 3)

        qh = heads(y @ p[q + "wq"])
        kh = heads(y @ p[q + "wk"])
        vh = heads(y @ p[q + "wv"])
        s = qh @ kh.T  # (B, H, N, N)
        _check_finite(s, layer, "attention scores", mask)
        a = ad.softmax(s, axis=-1, scale=params.attention_scale, mask=key_mask)
        scores.append(s)
        probs.append(a)
        ctx = (a @ vh).transpose(0, 2, 1, 3).reshape(batch, n_max, d)
        x = x + ctx @ p[q + "wo"]
        y = ad.layer_norm(x, p[q + "ln2_g"], p[q + "ln2_b"])
        x = x + ad.relu(y @ p[q + "w1"] + p[q + "b1"]) @ p[q + "w2"] + p[q + "b2"]
        _check_finite(x, layer, "hidden states", mask)
    return BatchEncoding(hidden=x, scores=scores, probs=probs, layouts=layouts, mask=mask)


def pooled_scores(enc: BatchEncoding, head_w, head_b) -> ad.Tensor:
    """Similarity scores, shape (B,): affine head on mean-pooled hidden states."""
    m = enc.mask[:, :, None].astype(np.float64)
    counts = m.sum(axis=1)  # (B, 1)
    pooled = (enc.hidden * m).sum(axis=1) / counts
    return (pooled @ ad.as_tensor(head_w).reshape(-1, 1)).reshape(-1) + head_b


def encode_pair(text, region, params: EncoderParams) -> EncodedPair:
    text = as_matrix(text, "text features")
    region = as_matrix(region, "region features")
    enc = encode_batch([(text, region)], params)
    lay = enc.layouts[0]
    return EncodedPair(
        hidden=enc.hidden.data[0, : lay.n].copy(),
        scores=[[enc.scores[l].data[0, h].copy() for h in range(params.n_heads)]
                for l in range(params.n_layers)],
        layout=lay,
        attention_scale=params.attention_scale,
    )


def similarity_score(pair: EncodedPair, head_w, head_b) -> float:
    w = np.asarray(head_w, dtype=np.float64).reshape(-1)
    if w.size != pair.hidden.shape[1]:
        raise ValueError(f"head width {w.size} does not match hidden width {pair.hidden.shape[1]}")
    return float(pair.hidden.mean(axis=0) @ w + float(np.asarray(head_b).reshape(-1)[0]))


def score_pairs(features: Sequence[tuple[np.ndarray, np.ndarray]], params: EncoderParams,
                chunk: int = 512) -> np.ndarray:
    """Similarity scores for many pairs without recording gradients."""
    out = []
    for start in range(0, len(features), chunk):
        enc = encode_batch(features[start : start + chunk], params)
        out.append(pooled_scores(enc, params.arrays["head_w"], params.arrays["head_b"]).data)
    return np.concatenate(out) if out else np.zeros(0)
