"""Model configuration and learnable parameters.

Parameters live in a nested structure but are addressable through flat
dotted paths (``encoder.0.head.2.wq``) for the optimizer, gradient
clipping and checkpoints.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .transformer import (
    AttentionHeadParams,
    EncoderLayerParams,
    LangAttnPolicy,
    make_encoder_layer,
)

TYPE_LANG, TYPE_SCENE, TYPE_OBJ = 0, 1, 2


@dataclass
class ModelConfig:
    vocab_size: int
    hidden: int = 32
    n_heads: int = 4
    head_dim: int = 8
    ffn_dim: int = 64
    n_layers: int = 2
    max_lang_len: int = 48
    scene_feat_dim: int = 32
    obj_feat_dim: int = 32
    dir_dim: int = 16
    dropout: float = 0.0
    variant: str = "one_stream"          # "one_stream" | "two_stream"
    lang_attn_policy: str = "init_only"  # LangAttnPolicy values
    cross_modal_matching: bool = True
    task: str = "r2r"                    # "r2r" | "reverie"
    # two-stream stack depths
    n_lang_layers: int = 2
    n_cross_layers: int = 1
    n_vis_layers: int = 1

    def __post_init__(self):
        if self.hidden != self.n_heads * self.head_dim:
            raise ContractError(
                f"hidden ({self.hidden}) must equal n_heads*head_dim "
                f"({self.n_heads}x{self.head_dim})")
        if self.variant not in ("one_stream", "two_stream"):
            raise ContractError(f"unknown variant {self.variant!r}")
        if self.task not in ("r2r", "reverie"):
            raise ContractError(f"unknown task {self.task!r}")
        self.policy  # validates
        if self.variant == "two_stream" and self.task == "reverie":
            raise ContractError("the two-stream variant supports the r2r task only")
        if self.variant == "two_stream" and self.policy is not LangAttnPolicy.INIT_ONLY:
            raise ContractError("the two-stream variant encodes language once; "
                                "use lang_attn_policy=init_only")

    @property
    def policy(self) -> LangAttnPolicy:
        try:
            return LangAttnPolicy(self.lang_attn_policy)
        except ValueError:
            raise ContractError(
                f"unknown lang_attn_policy {self.lang_attn_policy!r}; expected one of "
                f"{[p.value for p in LangAttnPolicy]}")

    @property
    def scene_in_dim(self) -> int:
        return self.scene_feat_dim + self.dir_dim

    @property
    def obj_in_dim(self) -> int:
        # appearance + projected box geometry + direction
        return self.obj_feat_dim + 2 * self.dir_dim

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CrossLayerParams:
    """One cross-modality block: attend to language, then self-attend, then FFN."""

    cross_heads: list[AttentionHeadParams]
    cross_wo: Tensor
    ln_cross_gain: Tensor
    ln_cross_bias: Tensor
    self_layer: EncoderLayerParams


class ModelParams:
    """All learnable tensors for either variant."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
        h = config.hidden

        self.word_emb = ad.uniform_init(rng, config.vocab_size, h)
        self.pos_emb = ad.uniform_init(rng, config.max_lang_len, h)
        self.type_emb = ad.uniform_init(rng, 3, h)

        self.scene_proj = ad.uniform_init(rng, config.scene_in_dim, h)
        self.object_proj = ad.uniform_init(rng, config.obj_in_dim, h)
        self.box_proj = ad.uniform_init(rng, 5, config.dir_dim)

        self.fuse_proj = ad.uniform_init(rng, 2 * h, h)
        self.action_proj = ad.uniform_init(rng, h + config.dir_dim, h)

        self.critic_hidden = ad.uniform_init(rng, h, h)
        self.critic_out = ad.uniform_init(rng, h, 1)

        def stack(n):
            return [make_encoder_layer(rng, h, config.n_heads, config.head_dim,
                                       config.ffn_dim) for _ in range(n)]

        if config.variant == "one_stream":
            self.encoder = stack(config.n_layers)
            self.lang_encoder = None
            self.cross_encoder = None
            self.vis_encoder = None
        else:
            self.encoder = None
            self.lang_encoder = stack(config.n_lang_layers)
            self.cross_encoder = []
            for _ in range(config.n_cross_layers):
                heads = [AttentionHeadParams(
                    wq=ad.uniform_init(rng, h, config.head_dim),
                    wk=ad.uniform_init(rng, h, config.head_dim),
                    wv=ad.uniform_init(rng, h, config.head_dim))
                    for _ in range(config.n_heads)]
                self.cross_encoder.append(CrossLayerParams(
                    cross_heads=heads,
                    cross_wo=ad.uniform_init(rng, h, h),
                    ln_cross_gain=ad.ones(h, requires_grad=True),
                    ln_cross_bias=ad.zeros(h, requires_grad=True),
                    self_layer=make_encoder_layer(rng, h, config.n_heads,
                                                  config.head_dim, config.ffn_dim)))
            self.vis_encoder = stack(config.n_vis_layers)

    # -- flat parameter addressing -------------------------------------------

    @staticmethod
    def _layer_entries(prefix: str, layer: EncoderLayerParams) -> Iterator[tuple[str, Tensor]]:
        for i, head in enumerate(layer.heads):
            yield f"{prefix}.head.{i}.wq", head.wq
            yield f"{prefix}.head.{i}.wk", head.wk
            yield f"{prefix}.head.{i}.wv", head.wv
        yield f"{prefix}.wo", layer.wo
        yield f"{prefix}.ffn_in", layer.ffn_in
        yield f"{prefix}.ffn_out", layer.ffn_out
        yield f"{prefix}.ln1_gain", layer.ln1_gain
        yield f"{prefix}.ln1_bias", layer.ln1_bias
        yield f"{prefix}.ln2_gain", layer.ln2_gain
        yield f"{prefix}.ln2_bias", layer.ln2_bias

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {
            "word_emb": self.word_emb,
            "pos_emb": self.pos_emb,
            "type_emb": self.type_emb,
            "scene_proj": self.scene_proj,
            "object_proj": self.object_proj,
            "box_proj": self.box_proj,
            "fuse_proj": self.fuse_proj,
            "action_proj": self.action_proj,
            "critic_hidden": self.critic_hidden,
            "critic_out": self.critic_out,
        }
        if self.encoder is not None:
            for i, layer in enumerate(self.encoder):
                out.update(self._layer_entries(f"encoder.{i}", layer))
        if self.lang_encoder is not None:
            for i, layer in enumerate(self.lang_encoder):
                out.update(self._layer_entries(f"lang.{i}", layer))
            for i, cl in enumerate(self.cross_encoder):
                for j, head in enumerate(cl.cross_heads):
                    out[f"cross.{i}.attn.head.{j}.wq"] = head.wq
                    out[f"cross.{i}.attn.head.{j}.wk"] = head.wk
                    out[f"cross.{i}.attn.head.{j}.wv"] = head.wv
                out[f"cross.{i}.attn.wo"] = cl.cross_wo
                out[f"cross.{i}.attn.ln_gain"] = cl.ln_cross_gain
                out[f"cross.{i}.attn.ln_bias"] = cl.ln_cross_bias
                out.update(self._layer_entries(f"cross.{i}.self", cl.self_layer))
            for i, layer in enumerate(self.vis_encoder):
                out.update(self._layer_entries(f"vis.{i}", layer))
        return out
