"""Multi-head self-attention encoder layers with navigation-specific masking.

The navigation trick is structural rather than a boolean mask: during
navigation the instruction tokens act as keys and values only, so the
query side of every layer simply excludes them. ``NavMask`` captures the
token layout (state / language / scene / object blocks), the query-row
selection per language-attention policy, and an optional boolean
query-by-key mask. A ``FlopCounter`` tallies multiply-accumulates so that
the memory-economy claim of the key/value-only design can be checked as an
exact operation-count ratio.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class LangAttnPolicy(enum.Enum):
    """How language tokens participate in self-attention during navigation.

    INIT_ONLY encodes the instruction once at episode start and reuses the
    frozen features as keys/values. The other three re-encode language every
    step and differ in what is fed back in: the raw word embeddings
    (EMB_ATTN), the frozen initialisation output (INIT_ATTN), or the previous
    step's language output (RE_ATTN).
    """

    EMB_ATTN = "emb_attn"
    INIT_ATTN = "init_attn"
    RE_ATTN = "re_attn"
    INIT_ONLY = "init_only"


@dataclass
class FlopCounter:
    """Multiply-accumulate counts per forward pass, by category."""

    attn_scores: int = 0
    value_mix: int = 0
    ffn: int = 0


@dataclass
class AttentionHeadParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor


@dataclass
class EncoderLayerParams:
    heads: list[AttentionHeadParams]
    wo: Tensor
    ffn_in: Tensor
    ffn_out: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    @property
    def head_dim(self) -> int:
        return self.heads[0].wq.shape[1]


def make_encoder_layer(rng: np.random.Generator, hidden: int, n_heads: int,
                       head_dim: int, ffn_dim: int) -> EncoderLayerParams:
    if hidden != n_heads * head_dim:
        raise ad.ShapeError(
            f"hidden dim {hidden} must equal heads*head_dim {n_heads}x{head_dim}")
    heads = [
        AttentionHeadParams(
            wq=ad.uniform_init(rng, hidden, head_dim),
            wk=ad.uniform_init(rng, hidden, head_dim),
            wv=ad.uniform_init(rng, hidden, head_dim),
        )
        for _ in range(n_heads)
    ]
    return EncoderLayerParams(
        heads=heads,
        wo=ad.uniform_init(rng, hidden, hidden),
        ffn_in=ad.uniform_init(rng, hidden, ffn_dim),
        ffn_out=ad.uniform_init(rng, ffn_dim, hidden),
        ln1_gain=ad.ones(hidden, requires_grad=True),
        ln1_bias=ad.zeros(hidden, requires_grad=True),
        ln2_gain=ad.ones(hidden, requires_grad=True),
        ln2_bias=ad.zeros(hidden, requires_grad=True),
    )


def attention_head(x_q: Tensor, x_kv: Tensor, head: AttentionHeadParams,
                   mask: Optional[np.ndarray] = None,
                   counter: Optional[FlopCounter] = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention for one head.

    Returns the mixed values and the pre-softmax score matrix; the raw
    scores feed the decision head downstream.
    """
    d_h = head.wq.shape[1]
    q = ad.matmul(x_q, head.wq)
    k = ad.matmul(x_kv, head.wk)
    v = ad.matmul(x_kv, head.wv)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d_h))
    weights = ad.softmax_rows(scores, mask)
    out = ad.matmul(weights, v)
    if counter is not None:
        n_q, n_k = scores.shape
        counter.attn_scores += n_q * n_k * d_h
        counter.value_mix += n_q * n_k * d_h
    return out, scores


def multi_head(x_q: Tensor, x_kv: Tensor, layer: EncoderLayerParams,
               mask: Optional[np.ndarray] = None,
               counter: Optional[FlopCounter] = None) -> tuple[Tensor, list[Tensor]]:
    """All heads concatenated and projected back to the hidden dimension."""
    outs, scores = [], []
    for head in layer.heads:
        h, s = attention_head(x_q, x_kv, head, mask, counter)
        outs.append(h)
        scores.append(s)
    mixed = ad.matmul(outs[0] if len(outs) == 1 else ad.concat_cols(outs), layer.wo)
    return mixed, scores


def encoder_layer(x_q: Tensor, x_kv: Tensor, layer: EncoderLayerParams,
                  mask: Optional[np.ndarray] = None,
                  counter: Optional[FlopCounter] = None,
                  dropout_rate: float = 0.0,
                  rng: Optional[np.random.Generator] = None
                  ) -> tuple[Tensor, list[Tensor]]:
    """One residual encoder block: attention, then a ReLU feed-forward net.

    Residual order: h1 = LN(attn + x_q); out = LN(h1 + FFN(h1)).
    """
    attn, scores = multi_head(x_q, x_kv, layer, mask, counter)
    if dropout_rate > 0.0:
        attn = ad.dropout(attn, dropout_rate, rng)
    h1 = ad.layer_norm(ad.add(attn, x_q), layer.ln1_gain, layer.ln1_bias)
    ff = ad.matmul(ad.relu(ad.matmul(h1, layer.ffn_in)), layer.ffn_out)
    if dropout_rate > 0.0:
        ff = ad.dropout(ff, dropout_rate, rng)
    if counter is not None:
        n_q = h1.shape[0]
        hidden = layer.ffn_in.shape[0]
        ffn_dim = layer.ffn_in.shape[1]
        counter.ffn += n_q * hidden * ffn_dim * 2
    return ad.layer_norm(ad.add(h1, ff), layer.ln2_gain, layer.ln2_bias), scores


# ---------------------------------------------------------------------------
# navigation token layout


@dataclass
class NavMask:
    """Token layout and query selection for one navigation step.

    Key-side order is always [state | language | scene | object]. The
    query side is either the same (language re-encoded each step) or the
    sequence with the language block removed (encode-once policy).
    ``matrix`` is the boolean query-by-key admissibility mask.
    """

    policy: LangAttnPolicy
    n_lang: int
    n_scene: int
    n_obj: int
    matrix: np.ndarray
    query_rows: np.ndarray  # key-side indices of each query row
    lang_keys: slice = field(init=False)
    scene_keys: slice = field(init=False)
    obj_keys: slice = field(init=False)

    def __post_init__(self):
        self.lang_keys = slice(1, 1 + self.n_lang)
        self.scene_keys = slice(1 + self.n_lang, 1 + self.n_lang + self.n_scene)
        self.obj_keys = slice(1 + self.n_lang + self.n_scene,
                              1 + self.n_lang + self.n_scene + self.n_obj)

    @property
    def n_keys(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_queries(self) -> int:
        return self.matrix.shape[0]

    def query_row_of_key(self, key_index: int) -> int:
        """Map a key-side token index to its query row, if it has one."""
        pos = np.nonzero(self.query_rows == key_index)[0]
        if pos.size == 0:
            raise ad.ContractError(f"token {key_index} is not a query row")
        return int(pos[0])


def build_nav_mask(n_lang: int, n_scene: int, n_obj: int,
                   policy: LangAttnPolicy, n_state: int = 1) -> NavMask:
    """Layout for one step over [state | language | scene | object] tokens."""
    if n_state != 1:
        raise ad.ContractError("exactly one state token is supported")
    if min(n_lang, n_scene, n_obj) < 0:
        raise ad.ContractError("token counts must be nonnegative")
    if n_scene < 1:
        raise ad.MaskError("at least one scene token (the stop token) is required")
    total = n_state + n_lang + n_scene + n_obj
    if policy is LangAttnPolicy.INIT_ONLY:
        query_rows = np.concatenate([
            np.arange(n_state),
            np.arange(n_state + n_lang, total),
        ])
    else:
        query_rows = np.arange(total)
    matrix = np.ones((query_rows.size, total), dtype=bool)
    if not matrix.any(axis=1).all():
        raise ad.MaskError("mask leaves a query row with zero keys")
    return NavMask(policy=policy, n_lang=n_lang, n_scene=n_scene, n_obj=n_obj,
                   matrix=matrix, query_rows=query_rows)


def full_self_attention_rows(n_tokens: int) -> np.ndarray:
    return np.arange(n_tokens)


def run_nav_encoder(sequence: Tensor, layers: Sequence[EncoderLayerParams],
                    mask: NavMask, counter: Optional[FlopCounter] = None,
                    dropout_rate: float = 0.0,
                    rng: Optional[np.random.Generator] = None):
    """Run the encoder stack over one navigation step's token sequence.

    Under the encode-once policy the language rows pass through every
    layer untouched (they participate only as keys/values), so their
    features stay bit-identical to the episode-initialisation output.

    Returns (final sequence, last-layer per-head scores, last-layer
    (x_q, x_kv) inputs for score-recomputation checks).
    """
    x = sequence
    scores: list[Tensor] = []
    final_inputs = (x, x)
    lang_lo, lang_hi = 1, 1 + mask.n_lang
    for layer in layers:
        if mask.policy is LangAttnPolicy.INIT_ONLY and mask.n_lang > 0:
            x_q = ad.concat_rows([
                ad.slice_rows(x, 0, 1),
                ad.slice_rows(x, lang_hi, mask.n_keys),
            ])
        else:
            x_q = x
        final_inputs = (x_q, x)
        y, scores = encoder_layer(x_q, x, layer, mask.matrix, counter,
                                  dropout_rate, rng)
        if mask.policy is LangAttnPolicy.INIT_ONLY and mask.n_lang > 0:
            x = ad.concat_rows([
                ad.slice_rows(y, 0, 1),
                ad.slice_rows(x, lang_lo, lang_hi),
                ad.slice_rows(y, 1, y.shape[0]),
            ])
        else:
            x = y
    return x, scores, final_inputs
