"""Two-stream variant: a language encoder at initialisation, then a
cross-modality stage and a vision-only stack during navigation.

The navigation-time cross-modality encoder drops its language branch:
[state | scene] tokens cross-attend to the frozen language features, then
self-attend among themselves. A final vision stack over the language-aware
tokens produces the new state and the decision. Cross-modal matching takes
its language weights from the cross stage (with respect to the pre-update
state) and its visual weights from the final vision stack (with respect to
the updated state).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .agent import (
    AgentState,
    NavigationAgent,
    StepDebug,
    StepOutput,
    _mean_query_scores,
    refine_state,
)
from .envsim import Observation
from .model import CrossLayerParams
from .transformer import attention_head, encoder_layer


def _cross_block(x: Tensor, lang: Tensor, layer: CrossLayerParams,
                 dropout_rate: float, rng) -> tuple[Tensor, list[Tensor]]:
    """Cross-attend x -> language, then a full self-attention block over x."""
    outs, scores = [], []
    for head in layer.cross_heads:
        h, s = attention_head(x, lang, head)
        outs.append(h)
        scores.append(s)
    mixed = ad.matmul(outs[0] if len(outs) == 1 else ad.concat_cols(outs),
                      layer.cross_wo)
    if dropout_rate > 0.0:
        mixed = ad.dropout(mixed, dropout_rate, rng)
    x1 = ad.layer_norm(ad.add(mixed, x), layer.ln_cross_gain, layer.ln_cross_bias)
    out, _ = encoder_layer(x1, x1, layer.self_layer, None, None, dropout_rate, rng)
    return out, scores


class TwoStreamAgent(NavigationAgent):
    """Language and vision processed by separate stacks, fused mid-way."""

    def _init_stack(self):
        return self.params.lang_encoder

    def step(self, state: AgentState, obs: Observation) -> StepOutput:
        if not obs.candidates:
            raise ContractError("empty candidate set")
        if self.config.task != "r2r":
            raise ContractError("two-stream navigation supports the r2r task only")
        cfg = self.config
        drop = self._dropout_rate()

        lang = state.lang_init
        scene_in = self._scene_tokens(obs)
        n_lang = lang.shape[0]
        n_scene = scene_in.shape[0]

        x = ad.concat_rows([state.state, scene_in])
        cross_scores: list[Tensor] = []
        for layer in self.params.cross_encoder:
            x, cross_scores = _cross_block(x, lang, layer, drop, self.rng)

        y = x
        vis_scores: list[Tensor] = []
        for layer in self.params.vis_encoder:
            y, vis_scores = encoder_layer(y, y, layer, None, self.flops, drop, self.rng)

        raw_state = ad.slice_rows(y, 0, 1)
        # Language weights come from the cross stage, visual weights from the
        # final vision stack.
        lang_mean = _mean_query_scores(cross_scores, query_row=0)
        attn_lang = ad.softmax_rows(lang_mean)
        vis_mean = _mean_query_scores(vis_scores, query_row=0)
        vis_sub = ad.slice_cols(vis_mean, 1, 1 + n_scene)
        attn_vis = ad.softmax_rows(vis_sub)
        p_a = attn_vis

        if cfg.cross_modal_matching:
            fused = refine_state(raw_state, attn_lang, attn_vis, lang, scene_in,
                                 self.params.fuse_proj, reverie=False)
        else:
            fused = raw_state

        head_scores = np.stack([s.data for s in vis_scores])
        cross_head_scores = np.stack([s.data for s in cross_scores])
        debug = StepDebug(
            head_scores=head_scores,
            mean_state_scores=vis_mean.data[0].copy(),
            mask=None,
            final_x_q=x.data.copy(),
            final_x_kv=x.data.copy(),
            cand_lang_scores=cross_head_scores[:, 1:, :].mean(axis=0),
            lang_input_data=lang.data.copy(),
            candidate_nodes=[c.node for c in obs.candidates],
            lang_scores_mean=lang_mean.data[0].copy(),
            scene_scores_mean=vis_mean.data[0][1:].copy(),
            obj_scores_mean=None,
        )
        return StepOutput(raw_state=raw_state, fused_state=fused, p_a=p_a, p_o=None,
                          attn_lang=attn_lang, attn_vis=attn_vis, attn_obj=None,
                          lang_out=None, lang_in=lang, scene_in=scene_in, debug=debug)
