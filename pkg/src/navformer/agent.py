"""The recurrent navigation agent.

One leading state token carries episode history. An episode starts by
encoding the framed instruction with full self-attention; the output at
the leading frame token becomes the initial state and the remaining
outputs become the language features. Each navigation step runs the same
encoder over [state | language | scene | objects], reads the action
distribution off the head-averaged attention of the state over the visual
tokens in the last layer, refines the state with attention-weighted raw
features (cross-modal matching), and finally folds the chosen action's
directional encoding back into the state token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericFault, Tensor
from .envsim import Observation
from .model import TYPE_LANG, TYPE_OBJ, TYPE_SCENE, ModelConfig, ModelParams
from .transformer import (
    FlopCounter,
    LangAttnPolicy,
    NavMask,
    build_nav_mask,
    encoder_layer,
    run_nav_encoder,
)


@dataclass
class AgentState:
    """Recurrent episode state. ``step`` never mutates it; ``advance``
    returns the successor."""

    state: Tensor                 # [1, hidden]
    lang_init: Tensor             # [n_lang, hidden], frozen initialisation output
    lang_current: Tensor          # language input for the next step (re-attend only)
    framed_ids: list[int]         # [CLS] u1..un [SEP] vocabulary ids
    t: int = 0
    episode_id: int = -1


@dataclass
class StepDebug:
    head_scores: np.ndarray          # [K, n_q, n_k] last-layer pre-softmax scores
    mean_state_scores: np.ndarray    # [n_k] head-averaged state-query scores
    mask: Optional[NavMask]
    final_x_q: np.ndarray
    final_x_kv: np.ndarray
    cand_lang_scores: np.ndarray     # [n_scene, n_lang] head-mean, per candidate query
    lang_input_data: np.ndarray      # layer-0 language inputs fed this step
    candidate_nodes: list[int]
    lang_scores_mean: Optional[np.ndarray] = None   # [n_lang] head-mean state row
    scene_scores_mean: Optional[np.ndarray] = None  # [n_scene]
    obj_scores_mean: Optional[np.ndarray] = None    # [n_obj]


@dataclass
class StepOutput:
    raw_state: Tensor                # state row after the last layer
    fused_state: Tensor              # after cross-modal matching (raw if disabled)
    p_a: Tensor                      # [1, n_actions], sums to 1
    p_o: Optional[Tensor]            # [1, n_obj] grounding distribution
    attn_lang: Tensor                # [1, n_lang]
    attn_vis: Tensor                 # [1, n_scene]
    attn_obj: Optional[Tensor]
    lang_out: Optional[Tensor]       # last-layer language rows (re-attend policies)
    lang_in: Tensor                  # layer-0 language inputs (weighted-raw source)
    scene_in: Tensor                 # layer-0 scene inputs (weighted-raw source)
    debug: StepDebug

    @property
    def n_actions(self) -> int:
        return self.p_a.shape[1]


class StopDecision(NamedTuple):
    stop: bool
    index: int  # grounded object index when stopping, else candidate index


def mean_head_attention(head_scores: Sequence[Tensor], cols: slice,
                        query_row: int = 0) -> tuple[Tensor, Tensor]:
    """Head-averaged scores of one query row, then softmax over a token subset.

    Averaging happens before the softmax. Returns (weights, subset scores).
    """
    if cols.stop - cols.start <= 0:
        raise ContractError("mean_head_attention over an empty token subset")
    mean = _mean_query_scores(head_scores, query_row)
    subset = ad.slice_cols(mean, cols.start, cols.stop)
    return ad.softmax_rows(subset), subset


def _mean_query_scores(head_scores: Sequence[Tensor], query_row: int) -> Tensor:
    rows = [ad.slice_rows(s, query_row, query_row + 1) for s in head_scores]
    total = rows[0]
    for r in rows[1:]:
        total = ad.add(total, r)
    return ad.scale(total, 1.0 / len(rows))


def refine_state(raw_state: Tensor, attn_lang: Tensor, attn_vis: Tensor,
                 lang_in: Tensor, scene_in: Tensor, fuse_proj: Tensor,
                 reverie: bool) -> Tensor:
    """Fuse attention-weighted raw features into the state.

    The weighted sums run over this step's layer-0 inputs. Navigation mode
    matches language and vision via an elementwise product; grounding mode
    forwards the visual summary alone.
    """
    weighted_vis = ad.matmul(attn_vis, scene_in)
    if reverie:
        fused = weighted_vis
    else:
        weighted_lang = ad.matmul(attn_lang, lang_in)
        fused = ad.mul(weighted_lang, weighted_vis)
    return ad.matmul(ad.concat_cols([raw_state, fused]), fuse_proj)


def record_decision(fused_state: Tensor, action_dir: np.ndarray,
                    action_proj: Tensor) -> Tensor:
    """Fold the chosen action's directional encoding into the state token."""
    return ad.matmul(ad.concat_cols([fused_state, Tensor(action_dir[None, :])]),
                     action_proj)


def select_action(p: np.ndarray, mode: str, rng: Optional[np.random.Generator] = None) -> int:
    """Greedy argmax (lowest index wins ties) or a categorical sample."""
    p = np.asarray(p, dtype=float).reshape(-1)
    if not np.isfinite(p).all():
        raise NumericFault(f"action distribution contains non-finite values: {p}")
    if mode == "greedy":
        return int(np.argmax(p))
    if mode == "sample":
        if rng is None:
            raise ContractError("sampling needs an rng")
        return int(rng.choice(p.size, p=p / p.sum()))
    raise ContractError(f"unknown selection mode {mode!r}")


def reverie_stop_rule(scene_weights: np.ndarray, obj_weights: np.ndarray) -> StopDecision:
    """Stop iff some object outweighs every scene direction (strictly)."""
    scene_weights = np.asarray(scene_weights).reshape(-1)
    obj_weights = np.asarray(obj_weights).reshape(-1)
    if scene_weights.size == 0 or obj_weights.size == 0:
        raise ContractError("stop rule needs non-empty scene and object subsets")
    if float(obj_weights.max()) > float(scene_weights.max()):
        return StopDecision(stop=True, index=int(np.argmax(obj_weights)))
    return StopDecision(stop=False, index=int(np.argmax(scene_weights)))


class NavigationAgent:
    """Single-encoder agent over the concatenated cross-modal sequence."""

    def __init__(self, params: ModelParams, train_mode: bool = False,
                 rng: Optional[np.random.Generator] = None):
        self.params = params
        self.config: ModelConfig = params.config
        self.train_mode = train_mode
        self.rng = rng
        self.flops: Optional[FlopCounter] = None

    # -- shared embedding helpers ---------------------------------------------

    def _type_row(self, type_id: int) -> Tensor:
        return ad.slice_rows(self.params.type_emb, type_id, type_id + 1)

    def _lang_layer0(self, ids: Sequence[int], pos_start: int) -> Tensor:
        emb = ad.embedding_lookup(self.params.word_emb, ids)
        pos = ad.slice_rows(self.params.pos_emb, pos_start, pos_start + len(ids))
        return ad.add(ad.add(emb, pos), self._type_row(TYPE_LANG))

    def _scene_tokens(self, obs: Observation) -> Tensor:
        v = ad.matmul(Tensor(obs.scene), self.params.scene_proj)
        return ad.add(v, self._type_row(TYPE_SCENE))

    def _object_tokens(self, obs: Observation) -> Optional[Tensor]:
        if not obs.objects:
            return None
        feats = Tensor(np.stack([o.feature for o in obs.objects]))
        boxes = Tensor(np.stack([o.box_encoding for o in obs.objects]))
        dirs = Tensor(np.stack([o.dir_encoding for o in obs.objects]))
        raw = ad.concat_cols([feats, ad.matmul(boxes, self.params.box_proj), dirs])
        o = ad.matmul(raw, self.params.object_proj)
        return ad.add(o, self._type_row(TYPE_OBJ))

    def _dropout_rate(self) -> float:
        return self.config.dropout if self.train_mode else 0.0

    def _init_stack(self):
        return self.params.encoder

    def _nav_stack(self):
        return self.params.encoder

    # -- episode lifecycle -----------------------------------------------------

    def init_episode(self, instruction_ids: Sequence[int], episode_id: int = -1,
                     cls_id: int = 0, sep_id: int = 1) -> AgentState:
        """Encode the framed instruction; the leading token's output becomes
        the initial state, the rest become the language features."""
        ids = [cls_id, *instruction_ids, sep_id]
        if len(instruction_ids) == 0:
            raise ContractError("empty instruction")
        if len(ids) > self.config.max_lang_len:
            raise ContractError(
                f"instruction of {len(ids)} tokens exceeds max_lang_len "
                f"{self.config.max_lang_len}")
        x = self._lang_layer0(ids, pos_start=0)
        for layer in self._init_stack():
            x, _ = encoder_layer(x, x, layer, None, self.flops,
                                 self._dropout_rate(), self.rng)
        s0 = ad.slice_rows(x, 0, 1)
        lang = ad.slice_rows(x, 1, len(ids))
        return AgentState(state=s0, lang_init=lang, lang_current=lang,
                          framed_ids=ids, t=0, episode_id=episode_id)

    def _lang_input(self, state: AgentState) -> Tensor:
        policy = self.config.policy
        if policy in (LangAttnPolicy.INIT_ONLY, LangAttnPolicy.INIT_ATTN):
            return state.lang_init
        if policy is LangAttnPolicy.RE_ATTN:
            return state.lang_current
        return self._lang_layer0(state.framed_ids[1:], pos_start=1)

    def step(self, state: AgentState, obs: Observation) -> StepOutput:
        """One navigation decision. Pure in (state, observation, parameters)."""
        if not obs.candidates:
            raise ContractError("empty candidate set")
        cfg = self.config
        reverie = cfg.task == "reverie"
        if reverie == obs.has_stop_row:
            raise ContractError(
                f"observation layout does not match task {cfg.task!r}")

        lang_in = self._lang_input(state)
        scene_in = self._scene_tokens(obs)
        obj_in = self._object_tokens(obs) if reverie else None

        n_lang = lang_in.shape[0]
        n_scene = scene_in.shape[0]
        n_obj = obj_in.shape[0] if obj_in is not None else 0

        blocks = [state.state, lang_in, scene_in]
        if obj_in is not None:
            blocks.append(obj_in)
        sequence = ad.concat_rows(blocks)
        mask = build_nav_mask(n_lang, n_scene, n_obj, cfg.policy)
        x, scores, (fx_q, fx_kv) = run_nav_encoder(
            sequence, self._nav_stack(), mask, self.flops,
            self._dropout_rate(), self.rng)

        raw_state = ad.slice_rows(x, 0, 1)
        mean_scores = _mean_query_scores(scores, query_row=0)
        attn_lang = ad.softmax_rows(
            ad.slice_cols(mean_scores, mask.lang_keys.start, mask.lang_keys.stop))
        vis_scores = ad.slice_cols(mean_scores, mask.scene_keys.start,
                                   mask.scene_keys.stop)
        attn_vis = ad.softmax_rows(vis_scores)

        attn_obj = None
        p_o = None
        if reverie:
            obj_scores = ad.slice_cols(mean_scores, mask.obj_keys.start,
                                       mask.obj_keys.stop)
            attn_obj = ad.softmax_rows(obj_scores)
            p_o = attn_obj
            # Action space is [move to candidate i ... , stop]; the stop
            # logit is the strongest object score, so choosing to stop and
            # grounding confidence are tied together.
            p_a = ad.softmax_rows(ad.concat_cols([vis_scores, ad.row_max(obj_scores)]))
        else:
            p_a = attn_vis

        if cfg.cross_modal_matching:
            fused = refine_state(raw_state, attn_lang, attn_vis, lang_in, scene_in,
                                 self.params.fuse_proj, reverie)
        else:
            fused = raw_state

        lang_out = None
        if cfg.policy is LangAttnPolicy.RE_ATTN:
            lang_out = ad.slice_rows(x, 1, 1 + n_lang)

        head_scores = np.stack([s.data for s in scores])
        cand_rows = [mask.query_row_of_key(mask.scene_keys.start + i)
                     for i in range(n_scene)]
        cand_lang = head_scores[:, cand_rows, mask.lang_keys].mean(axis=0)
        mean_row = mean_scores.data[0]
        debug = StepDebug(
            head_scores=head_scores,
            mean_state_scores=mean_row.copy(),
            mask=mask,
            final_x_q=fx_q.data.copy(),
            final_x_kv=fx_kv.data.copy(),
            cand_lang_scores=cand_lang,
            lang_input_data=lang_in.data.copy(),
            candidate_nodes=[c.node for c in obs.candidates],
            lang_scores_mean=mean_row[mask.lang_keys].copy(),
            scene_scores_mean=mean_row[mask.scene_keys].copy(),
            obj_scores_mean=mean_row[mask.obj_keys].copy() if reverie else None,
        )
        return StepOutput(raw_state=raw_state, fused_state=fused, p_a=p_a, p_o=p_o,
                          attn_lang=attn_lang, attn_vis=attn_vis, attn_obj=attn_obj,
                          lang_out=lang_out, lang_in=lang_in, scene_in=scene_in,
                          debug=debug)

    def action_direction(self, obs: Observation, action_index: int) -> np.ndarray:
        """Directional encoding of the chosen candidate; zeros for stop."""
        if action_index >= len(obs.candidates):
            return np.zeros(self.config.dir_dim)
        feat = obs.candidates[action_index].feature
        return feat[len(feat) - self.config.dir_dim:]

    def advance(self, state: AgentState, out: StepOutput, action_index: int,
                obs: Observation) -> AgentState:
        """Record the decision into the state token and tick the clock."""
        s_next = record_decision(out.fused_state,
                                 self.action_direction(obs, action_index),
                                 self.params.action_proj)
        lang_current = out.lang_out if out.lang_out is not None else state.lang_current
        return AgentState(state=s_next, lang_init=state.lang_init,
                          lang_current=lang_current, framed_ids=state.framed_ids,
                          t=state.t + 1, episode_id=state.episode_id)


def make_agent(params: ModelParams, train_mode: bool = False,
               rng: Optional[np.random.Generator] = None) -> NavigationAgent:
    if params.config.variant == "two_stream":
        from .two_stream import TwoStreamAgent
        return TwoStreamAgent(params, train_mode=train_mode, rng=rng)
    return NavigationAgent(params, train_mode=train_mode, rng=rng)
