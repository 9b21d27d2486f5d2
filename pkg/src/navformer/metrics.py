"""Navigation and grounding evaluation.

Per-episode: trajectory length, navigation error, success, success
weighted by normalised inverse path length, oracle success, and in
grounding mode remote-grounding success with its path-weighted variant.
Plus the attention-progress statistic: the centroid of the language
attention per step and its rank correlation with time.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats as sps

from .autodiff import ContractError
from .envsim import Episode, EpisodeSuite
from .training import SUCCESS_RADIUS_M, EpisodeTrace, ndtw


@dataclass
class EvalResult:
    episode_id: int
    tl: float
    ne: float
    success: bool
    spl: float
    oracle_success: bool
    rgs: bool
    rgspl: float
    ndtw: float
    stopped: bool
    final_node: int

    def __post_init__(self):
        if not (0.0 <= self.spl <= 1.0):
            raise ContractError(f"path-weighted success {self.spl} outside [0, 1]")
        if self.spl > float(self.success):
            raise ContractError("path-weighted success exceeds the success indicator")


def _target_visible(suite: EpisodeSuite, episode: Episode, node: int) -> bool:
    return any(o.obj_id == episode.target_object for o in suite.env.objects[node])


def evaluate_trajectory(suite: EpisodeSuite, trace: EpisodeTrace,
                        success_radius: float = SUCCESS_RADIUS_M) -> EvalResult:
    """Pure scoring of one rolled-out trajectory against its episode."""
    env = suite.env
    episode = suite.episodes[trace.episode_id] if (
        0 <= trace.episode_id < len(suite.episodes)
        and suite.episodes[trace.episode_id].episode_id == trace.episode_id) else None
    if episode is None:
        matches = [e for e in suite.episodes if e.episode_id == trace.episode_id]
        if not matches:
            raise ContractError(f"episode {trace.episode_id} not in suite")
        episode = matches[0]
    traj = trace.trajectory
    if not traj or traj[0] != episode.start:
        raise ContractError("trajectory does not start at the episode start")

    tl = 0.0
    for a, b in zip(traj[:-1], traj[1:]):
        if (a, b) not in env.edge_len:
            raise ContractError(f"trajectory uses non-edge {a}-{b}")
        tl += env.edge_len[(a, b)]
    final = traj[-1]
    ne = env.geodesic(final, episode.goal)

    if suite.reverie:
        succeeded = _target_visible(suite, episode, final)
        oracle = any(_target_visible(suite, episode, n) for n in traj)
    else:
        succeeded = ne < success_radius
        oracle = any(env.geodesic(n, episode.goal) < success_radius for n in traj)

    ideal = env.geodesic(episode.start, episode.goal)
    denom = max(tl, ideal)
    weight = ideal / denom if denom > 0 else 1.0
    spl = float(succeeded) * weight

    rgs = bool(succeeded and trace.grounded_object is not None
               and trace.grounded_object == episode.target_object)
    rgspl = float(rgs) * weight

    fidelity = ndtw(traj, episode.path, env.geodesic)
    return EvalResult(episode_id=trace.episode_id, tl=tl, ne=ne, success=succeeded,
                      spl=spl, oracle_success=oracle, rgs=rgs, rgspl=rgspl,
                      ndtw=fidelity, stopped=trace.stopped, final_node=final)


# ---------------------------------------------------------------------------
# attention progress


def spearman_rho(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    """Rank correlation; ties collapse to 0, fewer than 2 points to None."""
    if len(xs) < 2:
        return None
    if len(set(float(x) for x in xs)) < 2 or len(set(float(y) for y in ys)) < 2:
        return 0.0
    rho = sps.spearmanr(xs, ys).statistic
    return 0.0 if np.isnan(rho) else float(rho)


def attention_centroid(weights: np.ndarray) -> float:
    """Expected language position under an attention distribution."""
    w = np.asarray(weights, dtype=float).reshape(-1)
    return float(np.dot(np.arange(w.size), w))


@dataclass
class ProgressStat:
    centroids: list[float]
    rho: Optional[float]
    selected_centroids: list[float]
    selected_rho: Optional[float]


def attention_progress_stat(trace: EpisodeTrace) -> ProgressStat:
    """Centroid-vs-step series for the state's language attention, plus the
    same statistic for the selected action's language attention."""
    cents, sel_cents = [], []
    for rec in trace.records:
        if rec.lang_weights is None:
            raise ContractError("trace lacks attention dumps")
        cents.append(attention_centroid(rec.lang_weights))
        if rec.sel_lang_weights is not None:
            sel_cents.append(attention_centroid(rec.sel_lang_weights))
    steps = list(range(1, len(cents) + 1))
    rho = spearman_rho(steps, cents)
    sel_rho = spearman_rho(list(range(1, len(sel_cents) + 1)), sel_cents)
    return ProgressStat(centroids=cents, rho=rho,
                        selected_centroids=sel_cents, selected_rho=sel_rho)


# ---------------------------------------------------------------------------
# aggregation

TABLE_COLUMNS = ["TL", "NE", "SR", "SPL", "OSR", "RGS", "RGSPL", "nDTW"]


def aggregate(results: Sequence[EvalResult], reverie: bool = False) -> dict[str, float]:
    """Suite-level means; rate metrics as percentages."""
    if not results:
        raise ContractError("nothing to aggregate")
    out = {
        "TL": float(np.mean([r.tl for r in results])),
        "NE": float(np.mean([r.ne for r in results])),
        "SR": 100.0 * float(np.mean([r.success for r in results])),
        "SPL": 100.0 * float(np.mean([r.spl for r in results])),
        "OSR": 100.0 * float(np.mean([r.oracle_success for r in results])),
        "RGS": 100.0 * float(np.mean([r.rgs for r in results])) if reverie else None,
        "RGSPL": 100.0 * float(np.mean([r.rgspl for r in results])) if reverie else None,
        "nDTW": 100.0 * float(np.mean([r.ndtw for r in results])),
    }
    return out


def table_csv(agg: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(TABLE_COLUMNS)
    writer.writerow(["" if agg[c] is None else f"{agg[c]:.2f}" for c in TABLE_COLUMNS])
    return buf.getvalue()


def table_text(agg: dict) -> str:
    header = "  ".join(f"{c:>7}" for c in TABLE_COLUMNS)
    vals = "  ".join(f"{'-':>7}" if agg[c] is None else f"{agg[c]:>7.2f}"
                     for c in TABLE_COLUMNS)
    return header + "\n" + vals + "\n"
