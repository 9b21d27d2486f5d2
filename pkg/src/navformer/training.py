"""Mixed imitation / actor-critic training with shaped rewards.

Each update draws a batch of episodes: a configurable fraction rolls out
with sampled actions and collects shaped rewards (policy gradient with a
learned state-value baseline), the rest follows teacher actions and
contributes a cross-entropy term. Rewards combine a distance-progress
signal, a path-fidelity signal based on normalised dynamic time warping,
and a penalty for walking away from a nearly reached goal.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from functools import reduce
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericFault, Tensor
from .agent import NavigationAgent, select_action
from .envsim import Episode, EpisodeSuite, observe, take_action, teacher_action
from .model import ModelParams
from .optim import AdamW, clip_grad_norm

SUCCESS_RADIUS_M = 3.0


@dataclass
class TrainConfig:
    il_weight: float = 0.5        # weight of the teacher-forcing loss term
    discount: float = 0.9
    lr: float = 1e-3
    batch_size: int = 8
    rl_fraction: float = 0.5
    iterations: int = 1000
    grad_accum_steps: int = 1
    use_ndtw_reward: bool = True
    use_stop_penalty: bool = True
    reward_sign_verbatim: bool = False
    critic_detached: bool = False
    critic_weight: float = 0.5
    max_steps: int = 10
    eval_every: int = 100
    checkpoint_every: int = 500
    weight_decay: float = 0.0
    grad_clip: float = 40.0
    ndtw_threshold: float = SUCCESS_RADIUS_M
    sample_mode: str = "sample"

    def __post_init__(self):
        if self.il_weight < 0:
            raise ContractError("il_weight must be nonnegative")
        if not (0.0 < self.discount <= 1.0):
            raise ContractError("discount must lie in (0, 1]")
        if not (0.0 <= self.rl_fraction <= 1.0):
            raise ContractError("rl_fraction must lie in [0, 1]")
        if self.grad_accum_steps < 1 or self.batch_size < 1:
            raise ContractError("batch_size and grad_accum_steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# critic


def critic_value(state: Tensor, critic_hidden: Tensor, critic_out: Tensor,
                 detach: bool = False) -> Tensor:
    """Expected-return estimate from the updated state token; [1, 1]."""
    s = state.detach() if detach else state
    return ad.matmul(ad.relu(ad.matmul(s, critic_hidden)), critic_out)


# ---------------------------------------------------------------------------
# rewards


def progress_reward(d_prev: float, d_cur: float, is_stop: bool,
                    sign_verbatim: bool = False,
                    success_radius: float = SUCCESS_RADIUS_M) -> float:
    """Distance-progress reward.

    Stop: +2 on success (strictly inside the success radius), else -2.
    Non-stop: +/-1 keyed on the change of distance to goal. The default
    rewards approaching; ``sign_verbatim`` flips to rewarding a positive
    distance delta instead (the literal piecewise form; see ledger).
    """
    if d_prev < 0 or d_cur < 0:
        raise ContractError("distances must be nonnegative")
    if is_stop:
        return 2.0 if d_cur < success_radius else -2.0
    delta = d_cur - d_prev
    if sign_verbatim:
        return 1.0 if delta > 0.0 else -1.0
    return 1.0 if delta < 0.0 else -1.0


def fidelity_rewards(p_prev: float, p_cur: float, d_prev: float, d_cur: float,
                     is_stop: bool,
                     success_radius: float = SUCCESS_RADIUS_M) -> tuple[float, float]:
    """Path-fidelity reward pair (warping-score delta, stop penalty).

    Non-stop: the fidelity term is the change of the warping score; the
    penalty term fires only when leaving a goal that was within one meter
    (-2 * (1 - previous distance)). Stop: 2 * score on success, else zero;
    no penalty.
    """
    if is_stop:
        r_p = 2.0 * p_cur if d_cur < success_radius else 0.0
        return r_p, 0.0
    r_p = p_cur - p_prev
    r_s = 0.0
    if d_prev <= 1.0 and (d_cur - d_prev) > 0.0:
        r_s = -2.0 * (1.0 - d_prev)
    return r_p, r_s


def total_reward(r_d: float, r_p: float, r_s: float, is_stop: bool,
                 use_ndtw_reward: bool = True,
                 use_stop_penalty: bool = True) -> float:
    """Combine the shaped-reward components under the ablation toggles."""
    r = r_d
    if use_ndtw_reward:
        r += r_p
    if use_stop_penalty and not is_stop:
        r += r_s
    return r


def ndtw(predicted: Sequence, reference: Sequence,
         dist: Callable[[object, object], float],
         threshold: float = SUCCESS_RADIUS_M) -> float:
    """Normalised dynamic time warping similarity in [0, 1].

    exp(-DTW(pred, ref) / (|ref| * threshold)) with the warping cost found
    by the standard dynamic program over pairwise distances.
    """
    if len(predicted) == 0 or len(reference) == 0:
        raise ContractError("warping similarity needs non-empty paths")
    n, m = len(predicted), len(reference)
    cost = np.full((n + 1, m + 1), math.inf)
    cost[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d = dist(predicted[i - 1], reference[j - 1])
            cost[i, j] = d + min(cost[i - 1, j], cost[i, j - 1], cost[i - 1, j - 1])
    return math.exp(-cost[n, m] / (m * threshold))


def advantage_and_returns(rewards: Sequence[float], values: Sequence[float],
                          discount: float) -> tuple[list[float], list[float]]:
    """Discounted returns and their advantages over the critic baseline."""
    if len(rewards) != len(values):
        raise ContractError("rewards and critic values must align")
    returns: list[float] = [0.0] * len(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + discount * acc
        returns[t] = acc
    advantages = [g - v for g, v in zip(returns, values)]
    return returns, advantages


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class StepRecord:
    action: int
    teacher: int
    is_stop: bool
    d_prev: float
    d_cur: float
    p_prev: float
    p_cur: float
    reward: Optional[float] = None
    log_p_action: Optional[Tensor] = None
    log_p_teacher: Optional[Tensor] = None
    critic: Optional[Tensor] = None
    log_p_object: Optional[Tensor] = None
    # per-step attention dumps (numpy, final layer)
    p_a_data: Optional[np.ndarray] = None
    lang_weights: Optional[np.ndarray] = None
    lang_scores: Optional[np.ndarray] = None
    scene_weights: Optional[np.ndarray] = None
    scene_scores: Optional[np.ndarray] = None
    obj_weights: Optional[np.ndarray] = None
    obj_scores: Optional[np.ndarray] = None
    sel_lang_weights: Optional[np.ndarray] = None
    candidate_nodes: Optional[list[int]] = None
    state_checksum: float = 0.0


@dataclass
class EpisodeTrace:
    episode_id: int
    mode: str                      # "sample" | "teacher" | "greedy"
    trajectory: list[int]
    stopped: bool
    grounded_object: Optional[int]
    records: list[StepRecord] = field(default_factory=list)

    @property
    def final_node(self) -> int:
        return self.trajectory[-1]


def _np_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def rollout_episode(agent: NavigationAgent, suite: EpisodeSuite, episode: Episode,
                    mode: str, tcfg: TrainConfig,
                    rng: Optional[np.random.Generator] = None,
                    with_loss_terms: bool = True,
                    collect_attention: bool = False) -> EpisodeTrace:
    """Run one episode. ``mode`` picks the action source: "teacher" follows
    shortest-path supervision, "sample" draws from the policy, "greedy"
    takes the argmax. Rewards are filled for sampled rollouts only."""
    env = suite.env
    reverie = suite.reverie
    rl = mode == "sample"
    ref_path = episode.path
    geo = env.geodesic

    state = agent.init_episode(episode.instruction, episode.episode_id)
    pose = episode.start_pose()
    trajectory = [pose.node]
    trace = EpisodeTrace(episode_id=episode.episode_id, mode=mode,
                         trajectory=trajectory, stopped=False, grounded_object=None)
    p_prev = ndtw(trajectory, ref_path, geo, tcfg.ndtw_threshold)

    for _ in range(tcfg.max_steps):
        obs = observe(env, pose, reverie)
        out = agent.step(state, obs)
        teacher_idx = teacher_action(env, pose, episode.goal)
        if mode == "teacher":
            action = teacher_idx
        elif mode == "greedy":
            action = select_action(out.p_a.data, "greedy")
        else:
            action = select_action(out.p_a.data, "sample", rng)
        is_stop = action == obs.stop_index

        d_prev = geo(pose.node, episode.goal)
        if is_stop:
            new_pose = pose
        else:
            new_pose = take_action(env, pose, obs.candidates[action].node)
            trajectory.append(new_pose.node)
        d_cur = geo(new_pose.node, episode.goal)
        p_cur = ndtw(trajectory, ref_path, geo, tcfg.ndtw_threshold)

        rec = StepRecord(action=action, teacher=teacher_idx, is_stop=is_stop,
                         d_prev=d_prev, d_cur=d_cur, p_prev=p_prev, p_cur=p_cur)
        if with_loss_terms:
            if rl:
                rec.log_p_action = ad.log_clamped(
                    ad.slice_cols(out.p_a, action, action + 1))
            if mode == "teacher":
                rec.log_p_teacher = ad.log_clamped(
                    ad.slice_cols(out.p_a, teacher_idx, teacher_idx + 1))
                if reverie and episode.target_object is not None:
                    target_pos = [i for i, o in enumerate(obs.objects)
                                  if o.obj_id == episode.target_object]
                    if target_pos:
                        rec.log_p_object = ad.log_clamped(
                            ad.slice_cols(out.p_o, target_pos[0], target_pos[0] + 1))
        if rl:
            r_d = progress_reward(d_prev, d_cur, is_stop, tcfg.reward_sign_verbatim)
            r_p, r_s = fidelity_rewards(p_prev, p_cur, d_prev, d_cur, is_stop)
            rec.reward = total_reward(r_d, r_p, r_s, is_stop,
                                      tcfg.use_ndtw_reward, tcfg.use_stop_penalty)
        if collect_attention:
            dbg = out.debug
            rec.p_a_data = out.p_a.data[0].copy()
            rec.lang_weights = out.attn_lang.data[0].copy()
            rec.lang_scores = dbg.lang_scores_mean
            rec.scene_weights = out.attn_vis.data[0].copy()
            rec.scene_scores = dbg.scene_scores_mean
            rec.obj_weights = out.attn_obj.data[0].copy() if out.attn_obj is not None else None
            rec.obj_scores = dbg.obj_scores_mean
            rec.sel_lang_weights = (
                _np_softmax(dbg.cand_lang_scores[action])
                if action < dbg.cand_lang_scores.shape[0] else None)
            rec.candidate_nodes = list(dbg.candidate_nodes)

        state = agent.advance(state, out, action, obs)
        rec.state_checksum = float(np.abs(state.state.data).sum())
        if rl:
            rec.critic = critic_value(state.state, agent.params.critic_hidden,
                                      agent.params.critic_out,
                                      detach=tcfg.critic_detached)
        trace.records.append(rec)
        pose = new_pose

        if is_stop:
            trace.stopped = True
            if reverie and out.p_o is not None:
                best = int(np.argmax(out.p_o.data[0]))
                trace.grounded_object = obs.objects[best].obj_id
            break

    if rl and trace.records and not trace.stopped:
        # Ran out of steps: settle the episode with the final-stop reward at
        # the current position.
        rec = trace.records[-1]
        r_d = progress_reward(rec.d_cur, rec.d_cur, True, tcfg.reward_sign_verbatim)
        r_p, _ = fidelity_rewards(rec.p_cur, rec.p_cur, rec.d_cur, rec.d_cur, True)
        rec.reward += total_reward(r_d, r_p, 0.0, True,
                                   tcfg.use_ndtw_reward, tcfg.use_stop_penalty)
    return trace


def _sum_terms(terms: list[Tensor]) -> Optional[Tensor]:
    if not terms:
        return None
    return reduce(ad.add, terms)


def navigation_loss(rl_traces: Sequence[EpisodeTrace],
                    il_traces: Sequence[EpisodeTrace],
                    tcfg: TrainConfig) -> tuple[Tensor, dict]:
    """Combined objective over one batch of rollouts.

    policy term: -sum_t log p(a_t) * A_t with the advantage held constant;
    teacher term: -sum_t log p(a*_t), weighted by il_weight (plus the
    grounding cross-entropy when object supervision is present);
    critic term: squared return-regression error, weighted separately.
    """
    n = len(rl_traces) + len(il_traces)
    if n == 0:
        raise ContractError("navigation_loss needs at least one trace")
    policy_terms: list[Tensor] = []
    critic_terms: list[Tensor] = []
    il_terms: list[Tensor] = []

    for trace in rl_traces:
        rewards = [r.reward for r in trace.records]
        values = [r.critic.item() for r in trace.records]
        returns, advantages = advantage_and_returns(rewards, values, tcfg.discount)
        for rec, g, a in zip(trace.records, returns, advantages):
            policy_terms.append(ad.scale(rec.log_p_action, -a))
            diff = ad.add(rec.critic, Tensor(np.array([[-g]])))
            critic_terms.append(ad.mul(diff, diff))

    for trace in il_traces:
        for rec in trace.records:
            il_terms.append(ad.scale(rec.log_p_teacher, -1.0))
            if rec.log_p_object is not None:
                il_terms.append(ad.scale(rec.log_p_object, -1.0))

    zero = Tensor(np.zeros((1, 1)), requires_grad=True)
    policy = _sum_terms(policy_terms)
    critic = _sum_terms(critic_terms)
    il = _sum_terms(il_terms)

    loss = ad.scale(zero, 0.0)
    if policy is not None:
        loss = ad.add(loss, ad.scale(policy, 1.0 / n))
    if il is not None:
        loss = ad.add(loss, ad.scale(il, tcfg.il_weight / n))
    if critic is not None:
        loss = ad.add(loss, ad.scale(critic, tcfg.critic_weight / n))

    parts = {
        "loss_rl": (policy.item() / n) if policy is not None else 0.0,
        "loss_il": (il.item() * tcfg.il_weight / n) if il is not None else 0.0,
        "loss_critic": (critic.item() * tcfg.critic_weight / n) if critic is not None else 0.0,
    }
    return loss, parts


# ---------------------------------------------------------------------------
# evaluation helpers (shared by the trainer and the CLI)


def greedy_traces(agent: NavigationAgent, suite: EpisodeSuite, tcfg: TrainConfig,
                  collect_attention: bool = False,
                  episodes: Optional[Sequence[Episode]] = None) -> list[EpisodeTrace]:
    out = []
    with ad.no_grad():
        for ep in (episodes if episodes is not None else suite.episodes):
            out.append(rollout_episode(agent, suite, ep, "greedy", tcfg,
                                       with_loss_terms=False,
                                       collect_attention=collect_attention))
    return out


def random_walk_success_rate(suite: EpisodeSuite, max_steps: int, trials: int,
                             seed: int,
                             success_radius: float = SUCCESS_RADIUS_M) -> float:
    """Monte-Carlo success rate of a uniform random policy on the suite."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3,)))
    env = suite.env
    hits = 0
    total = 0
    for ep in suite.episodes:
        for _ in range(trials):
            pose = ep.start_pose()
            for _ in range(max_steps):
                n_actions = len(env.neighbors[pose.node]) + 1
                a = int(rng.integers(0, n_actions))
                if a == n_actions - 1:
                    break
                pose = take_action(env, pose, env.neighbors[pose.node][a])
            total += 1
            if suite.reverie:
                visible = any(o.obj_id == ep.target_object
                              for o in env.objects[pose.node])
                hits += int(visible)
            else:
                hits += int(env.geodesic(pose.node, ep.goal) < success_radius)
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    def __init__(self, params: ModelParams, train_suite: EpisodeSuite,
                 val_suite: Optional[EpisodeSuite], tcfg: TrainConfig, seed: int,
                 out_dir: Optional[Path] = None):
        from .agent import make_agent

        self.params = params
        self.train_suite = train_suite
        self.val_suite = val_suite
        self.tcfg = tcfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.named = params.named()
        self.opt = AdamW(self.named, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
        self.rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
        self.agent = make_agent(params, train_mode=True, rng=self.rng)
        self.eval_agent = make_agent(params, train_mode=False)
        self.best_val_spl = -1.0
        self.last_eval: dict[str, float] = {}

    def _micro_batch(self) -> tuple[list[EpisodeTrace], list[EpisodeTrace]]:
        episodes = self.train_suite.episodes
        idx = self.rng.integers(0, len(episodes), size=self.tcfg.batch_size)
        rl_count = int(round(self.tcfg.batch_size * self.tcfg.rl_fraction))
        rl, il = [], []
        for pos, episode_index in enumerate(idx):
            ep = episodes[int(episode_index)]
            if pos < rl_count:
                rl.append(rollout_episode(self.agent, self.train_suite, ep,
                                          self.tcfg.sample_mode, self.tcfg,
                                          rng=self.rng))
            else:
                il.append(rollout_episode(self.agent, self.train_suite, ep,
                                          "teacher", self.tcfg))
        return rl, il

    def train_iteration(self, iteration: int) -> dict:
        """One optimizer step (possibly over several accumulated batches)."""
        self.opt.zero_grad()
        parts_acc = {"loss_rl": 0.0, "loss_il": 0.0, "loss_critic": 0.0}
        for _ in range(self.tcfg.grad_accum_steps):
            rl, il = self._micro_batch()
            loss, parts = navigation_loss(rl, il, self.tcfg)
            if not np.isfinite(loss.data).all():
                self._nan_snapshot(iteration, parts)
                raise NumericFault(f"non-finite loss at iteration {iteration}")
            ad.backward(ad.scale(loss, 1.0 / self.tcfg.grad_accum_steps))
            for k in parts_acc:
                parts_acc[k] += parts[k] / self.tcfg.grad_accum_steps
        clip_grad_norm(self.named, self.tcfg.grad_clip)
        self.opt.step()
        return parts_acc

    def _nan_snapshot(self, iteration: int, parts: dict) -> None:
        if self.out_dir is None:
            return
        snap = {"iteration": iteration, "parts": parts,
                "param_norms": {k: float(np.abs(p.data).max())
                                for k, p in self.named.items()}}
        with open(self.out_dir / "nan_snapshot.json", "w", encoding="utf-8") as fh:
            json.dump(snap, fh, indent=1)

    def evaluate(self) -> dict[str, float]:
        from . import metrics as mt

        out: dict[str, float] = {}
        train_traces = greedy_traces(self.eval_agent, self.train_suite, self.tcfg)
        train_results = [mt.evaluate_trajectory(self.train_suite, tr) for tr in train_traces]
        out["train_SR"] = float(np.mean([r.success for r in train_results]))
        if self.val_suite is not None:
            val_traces = greedy_traces(self.eval_agent, self.val_suite, self.tcfg)
            val_results = [mt.evaluate_trajectory(self.val_suite, tr) for tr in val_traces]
            out["val_SR"] = float(np.mean([r.success for r in val_results]))
            out["val_SPL"] = float(np.mean([r.spl for r in val_results]))
            out["val_nDTW"] = float(np.mean([r.ndtw for r in val_results]))
        else:
            out["val_SR"] = out["val_SPL"] = out["val_nDTW"] = 0.0
        self.last_eval = out
        return out


def format_float(x: float) -> str:
    return f"{x:.10g}"


STATS_COLUMNS = ["iteration", "loss_rl", "loss_il", "loss_critic",
                 "train_SR", "val_SR", "val_SPL", "val_nDTW"]


def train_loop(trainer: Trainer, out_dir: Path,
               checkpoint_writer: Optional[Callable[[ModelParams, Path], None]] = None,
               log: Callable[[str], None] = lambda s: None) -> dict:
    """Full training run: stats CSV, periodic checkpoints, best-by-val-SPL."""
    tcfg = trainer.tcfg
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats_path = out_dir / "stats.csv"
    trainer.evaluate()
    best_iteration = 0
    with open(stats_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(STATS_COLUMNS)
        for it in range(1, tcfg.iterations + 1):
            parts = trainer.train_iteration(it)
            if it % tcfg.eval_every == 0 or it == tcfg.iterations:
                ev = trainer.evaluate()
                if checkpoint_writer is not None and ev["val_SPL"] >= trainer.best_val_spl:
                    trainer.best_val_spl = ev["val_SPL"]
                    best_iteration = it
                    checkpoint_writer(trainer.params, out_dir / "ckpt_best.bin")
                log(f"iter {it}: loss_il={parts['loss_il']:.4f} "
                    f"train_SR={ev['train_SR']:.3f} val_SPL={ev['val_SPL']:.3f}")
            if checkpoint_writer is not None and it % tcfg.checkpoint_every == 0:
                checkpoint_writer(trainer.params, out_dir / f"ckpt_{it:06d}.bin")
            row = [str(it)] + [format_float(parts[c]) for c in STATS_COLUMNS[1:4]] \
                + [format_float(trainer.last_eval[c]) for c in STATS_COLUMNS[4:]]
            writer.writerow(row)
        if checkpoint_writer is not None:
            checkpoint_writer(trainer.params, out_dir / "ckpt_final.bin")
    return {"best_val_spl": trainer.best_val_spl, "best_iteration": best_iteration,
            "final_eval": dict(trainer.last_eval)}
