"""Synthetic graph-navigation environments.

Stands in for a building-scan simulator at desk scale: viewpoints are
random points in a square, connected by a proximity graph repaired to a
single component. Each node carries a landmark identity that seeds a
deterministic pseudo visual feature; instructions are synthesised from
the ground-truth path so that sub-instructions align monotonically with
sub-paths. Everything is a pure function of the generation seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from .autodiff import ContractError

SUITE_FORMAT = "navsuite-v1"

# Heading bins for synthesised turn words: 8 sectors of 45 degrees.
N_TURN_BINS = 8


class GenerationError(RuntimeError):
    """Environment or episode generation could not satisfy its constraints."""


@dataclass
class Vocab:
    """Word/id mapping shared by instruction synthesis and the agent."""

    words: list[str]
    index: dict[str, int] = field(init=False)

    CLS = "[CLS]"
    SEP = "[SEP]"

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        return self.index[word]

    @classmethod
    def build(cls, n_landmarks: int, n_object_classes: int = 0) -> "Vocab":
        words = [cls.CLS, cls.SEP]
        words += [f"turn{i}" for i in range(N_TURN_BINS)]
        words += ["stop"]
        words += [f"lm{i}" for i in range(n_landmarks)]
        words += [f"obj{i}" for i in range(n_object_classes)]
        return cls(words)


@dataclass
class EnvObject:
    obj_id: int
    cls_id: int
    box: tuple[float, float, float, float]  # x_tl, y_tl, x_br, y_br
    view_heading: float


@dataclass
class AgentPose:
    node: int
    heading: float  # radians in [0, 2*pi)
    elevation: float = 0.0


@dataclass
class CandidateView:
    node: int
    rel_heading: float
    rel_elevation: float
    feature: np.ndarray  # [feat_dim + dir_dim]


@dataclass
class ObjectView:
    obj_id: int
    cls_id: int
    feature: np.ndarray        # [feat_dim] appearance part
    box_encoding: np.ndarray   # [5] normalised box geometry
    dir_encoding: np.ndarray   # [dir_dim]


@dataclass
class Observation:
    """What the agent sees at a pose: candidate moves plus, in grounding
    mode, the objects visible at the node. In navigation mode the stop
    choice appears as a trailing all-zero scene row."""

    candidates: list[CandidateView]
    scene: np.ndarray           # [n_cand(+1), feat_dim + dir_dim]
    objects: list[ObjectView]
    has_stop_row: bool

    @property
    def n_actions(self) -> int:
        return len(self.candidates) + 1

    @property
    def stop_index(self) -> int:
        return len(self.candidates)


def directional_encoding(heading: float, elevation: float, rep_factor: int) -> np.ndarray:
    """(cos h, sin h, cos e, sin e) tiled rep_factor times."""
    if rep_factor < 1:
        raise ContractError("rep_factor must be >= 1")
    base = np.array([math.cos(heading), math.sin(heading),
                     math.cos(elevation), math.sin(elevation)])
    return np.tile(base, rep_factor)


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a > math.pi:
        a -= 2.0 * math.pi
    elif a <= -math.pi:
        a += 2.0 * math.pi
    return a


def heading_bin(rel_heading: float) -> int:
    width = 2.0 * math.pi / N_TURN_BINS
    return int(round(wrap_angle(rel_heading) / width)) % N_TURN_BINS


class Environment:
    """Immutable connectivity graph with synthetic visual identity."""

    def __init__(self, seed: int, positions: np.ndarray, edges: list[tuple[int, int]],
                 landmarks: np.ndarray, objects: list[list[EnvObject]],
                 feat_dim: int = 32, rep_factor: int = 4,
                 image_wh: tuple[float, float] = (640.0, 480.0),
                 view_noise: float = 0.05):
        self.seed = int(seed)
        self.positions = np.asarray(positions, dtype=float)
        self.edges = sorted(tuple(sorted(e)) for e in edges)
        self.landmarks = np.asarray(landmarks, dtype=int)
        self.objects = objects
        self.feat_dim = int(feat_dim)
        self.rep_factor = int(rep_factor)
        self.image_wh = (float(image_wh[0]), float(image_wh[1]))
        self.view_noise = float(view_noise)

        n = self.positions.shape[0]
        self.neighbors: list[list[int]] = [[] for _ in range(n)]
        w = np.zeros((n, n))
        for a, b in self.edges:
            d = float(np.linalg.norm(self.positions[a] - self.positions[b]))
            self.neighbors[a].append(b)
            self.neighbors[b].append(a)
            w[a, b] = w[b, a] = d
        for lst in self.neighbors:
            lst.sort()
        self.edge_len = {}
        for a, b in self.edges:
            self.edge_len[(a, b)] = self.edge_len[(b, a)] = w[a, b]
        graph = csr_matrix(w)
        ncomp, _ = connected_components(graph, directed=False)
        if ncomp != 1:
            raise GenerationError(f"graph has {ncomp} components after repair")
        self.dist = shortest_path(graph, method="D", directed=False)

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def dir_dim(self) -> int:
        return 4 * self.rep_factor

    # -- synthetic appearance ------------------------------------------------

    def _feature_rng(self, tag: int, *keys: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(
            entropy=self.seed, spawn_key=(tag, *keys)))

    def landmark_feature(self, landmark_id: int) -> np.ndarray:
        v = self._feature_rng(0, landmark_id).standard_normal(self.feat_dim)
        return v / np.linalg.norm(v)

    def view_feature(self, from_node: int, to_node: int) -> np.ndarray:
        """Unit landmark vector plus small per-view noise; edge-keyed."""
        base = self.landmark_feature(int(self.landmarks[to_node]))
        noise = self._feature_rng(1, from_node, to_node).standard_normal(self.feat_dim)
        return base + self.view_noise * noise

    def object_class_feature(self, cls_id: int) -> np.ndarray:
        v = self._feature_rng(2, cls_id).standard_normal(self.feat_dim)
        return v / np.linalg.norm(v)

    # -- geometry ------------------------------------------------------------

    def bearing(self, from_node: int, to_node: int) -> float:
        d = self.positions[to_node] - self.positions[from_node]
        return math.atan2(d[1], d[0])

    def geodesic(self, a: int, b: int) -> float:
        return float(self.dist[a, b])

    def shortest_path_nodes(self, start: int, goal: int) -> list[int]:
        """Greedy descent on exact geodesic distances; lowest-id tie-break."""
        if not math.isfinite(self.dist[start, goal]):
            raise ContractError(f"goal {goal} unreachable from {start}")
        path = [start]
        node = start
        while node != goal:
            node = self.next_hop(node, goal)
            path.append(node)
        return path

    def next_hop(self, node: int, goal: int) -> int:
        best, best_cost = None, math.inf
        for nb in self.neighbors[node]:
            cost = self.edge_len[(node, nb)] + self.dist[nb, goal]
            if cost < best_cost - 1e-12:
                best, best_cost = nb, cost
        if best is None:
            raise ContractError(f"node {node} has no neighbors")
        return best


def box_geometry(box: tuple[float, float, float, float],
                 image_wh: tuple[float, float]) -> np.ndarray:
    """Normalised [x_tl/W, y_tl/H, x_br/W, y_br/H, area fraction]."""
    x_tl, y_tl, x_br, y_br = box
    w_img, h_img = image_wh
    w, h = x_br - x_tl, y_br - y_tl
    return np.array([x_tl / w_img, y_tl / h_img, x_br / w_img, y_br / h_img,
                     (w * h) / (w_img * h_img)])


def generate_environment(seed: int, n_nodes: int = 20, avg_degree: float = 4.0,
                         extent_m: float = 20.0, n_landmarks: int = 24,
                         objects_per_node: int = 0, n_object_classes: int = 8,
                         feat_dim: int = 32, rep_factor: int = 4) -> Environment:
    """Random geometric graph with spanning repair; deterministic in seed."""
    if n_nodes < 2:
        raise GenerationError("need at least 2 nodes")
    if avg_degree <= 0 or extent_m <= 0 or n_landmarks < 1:
        raise GenerationError("avg_degree, extent_m and n_landmarks must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(10,)))
    pos2 = rng.uniform(0.0, extent_m, size=(n_nodes, 2))
    positions = np.column_stack([pos2, np.zeros(n_nodes)])

    # Edge threshold set from the pairwise-distance quantile that yields the
    # requested mean degree exactly (before repair).
    diffs = pos2[:, None, :] - pos2[None, :, :]
    dmat = np.sqrt((diffs ** 2).sum(-1))
    iu = np.triu_indices(n_nodes, k=1)
    pair_d = np.sort(dmat[iu])
    want_edges = min(len(pair_d), max(1, int(round(n_nodes * avg_degree / 2.0))))
    threshold = pair_d[want_edges - 1]
    edges = {(int(a), int(b)) for a, b in zip(*iu) if dmat[a, b] <= threshold}

    # Spanning repair: greedily connect components via their closest node pair.
    parent = list(range(n_nodes))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in edges:
        parent[find(a)] = find(b)
    while True:
        roots = {find(i) for i in range(n_nodes)}
        if len(roots) == 1:
            break
        comp_of = [find(i) for i in range(n_nodes)]
        best = None
        for i in range(n_nodes):
            for j in range(i + 1, n_nodes):
                if comp_of[i] != comp_of[j]:
                    if best is None or dmat[i, j] < best[0]:
                        best = (dmat[i, j], i, j)
        _, i, j = best
        edges.add((min(i, j), max(i, j)))
        parent[find(i)] = find(j)

    if n_landmarks >= n_nodes:
        landmarks = rng.permutation(n_landmarks)[:n_nodes]
    else:
        landmarks = rng.integers(0, n_landmarks, size=n_nodes)

    objects: list[list[EnvObject]] = []
    next_id = 0
    w_img, h_img = 640.0, 480.0
    for _ in range(n_nodes):
        node_objects = []
        for _ in range(objects_per_node):
            cls_id = int(rng.integers(0, n_object_classes))
            x1, x2 = np.sort(rng.uniform(0, w_img, 2))
            y1, y2 = np.sort(rng.uniform(0, h_img, 2))
            node_objects.append(EnvObject(
                obj_id=next_id, cls_id=cls_id,
                box=(float(x1), float(y1), float(x2), float(y2)),
                view_heading=float(rng.uniform(0, 2 * math.pi))))
            next_id += 1
        objects.append(node_objects)

    return Environment(seed=seed, positions=positions, edges=sorted(edges),
                       landmarks=landmarks, objects=objects,
                       feat_dim=feat_dim, rep_factor=rep_factor)


# ---------------------------------------------------------------------------
# observations


def scene_features(env: Environment, pose: AgentPose,
                   include_stop: bool = True) -> tuple[list[CandidateView], np.ndarray]:
    """Per-neighbor direction-aware features, stop row appended last."""
    views = []
    rows = []
    for nb in env.neighbors[pose.node]:
        rel = wrap_angle(env.bearing(pose.node, nb) - pose.heading)
        d = directional_encoding(rel, 0.0 - pose.elevation, env.rep_factor)
        f = env.view_feature(pose.node, nb)
        views.append(CandidateView(node=nb, rel_heading=rel, rel_elevation=0.0,
                                   feature=np.concatenate([f, d])))
        rows.append(views[-1].feature)
    mat = np.stack(rows) if rows else np.zeros((0, env.feat_dim + env.dir_dim))
    if include_stop:
        mat = np.vstack([mat, np.zeros(env.feat_dim + env.dir_dim)])
    return views, mat


def object_features(env: Environment, pose: AgentPose) -> list[ObjectView]:
    """Raw object token parts at the current node; the model composes them
    with its learned box projection before encoding."""
    out = []
    for obj in env.objects[pose.node]:
        rel = wrap_angle(obj.view_heading - pose.heading)
        out.append(ObjectView(
            obj_id=obj.obj_id, cls_id=obj.cls_id,
            feature=env.object_class_feature(obj.cls_id),
            box_encoding=box_geometry(obj.box, env.image_wh),
            dir_encoding=directional_encoding(rel, 0.0, env.rep_factor)))
    return out


def observe(env: Environment, pose: AgentPose, reverie: bool = False) -> Observation:
    views, scene = scene_features(env, pose, include_stop=not reverie)
    if not views:
        raise ContractError(f"node {pose.node} has no navigable neighbors")
    objects = object_features(env, pose) if reverie else []
    if reverie and not objects:
        raise ContractError(f"node {pose.node} has no objects in grounding mode")
    return Observation(candidates=views, scene=scene, objects=objects,
                       has_stop_row=not reverie)


def take_action(env: Environment, pose: AgentPose, action_node: Optional[int]) -> AgentPose:
    """Move to a neighbor (heading follows the motion) or stay put on stop."""
    if action_node is None:
        return pose
    if action_node not in env.neighbors[pose.node]:
        raise ContractError(f"{action_node} is not a neighbor of {pose.node}")
    return AgentPose(node=action_node,
                     heading=env.bearing(pose.node, action_node) % (2 * math.pi),
                     elevation=pose.elevation)


def distance_to_goal(env: Environment, pose: AgentPose, goal: int) -> float:
    return env.geodesic(pose.node, goal)


def teacher_action(env: Environment, pose: AgentPose, goal: int) -> int:
    """Index of the next shortest-path hop among sorted candidates; the
    index one past the candidates means stop."""
    if not math.isfinite(env.dist[pose.node, goal]):
        raise ContractError(f"goal {goal} unreachable from {pose.node}")
    nbs = env.neighbors[pose.node]
    if pose.node == goal:
        return len(nbs)
    return nbs.index(env.next_hop(pose.node, goal))


# ---------------------------------------------------------------------------
# episodes and instruction synthesis


@dataclass
class Episode:
    episode_id: int
    start: int
    goal: int
    start_heading: float
    path: list[int]
    instruction: list[int]
    target_object: Optional[int] = None

    def start_pose(self) -> AgentPose:
        return AgentPose(node=self.start, heading=self.start_heading)


def synthesize_instruction(env: Environment, path: Sequence[int],
                           start_heading: float, vocab: Vocab,
                           reverie: bool = False,
                           target_object: Optional[int] = None) -> list[int]:
    """Word ids for a path. Step-by-step mode emits one (turn word,
    landmark word) pair per hop plus a final stop word; goal-directed mode
    emits just the goal landmark and target object class."""
    if reverie:
        if target_object is None:
            raise ContractError("grounding instruction needs a target object")
        goal = path[-1]
        obj = next(o for o in env.objects[goal] if o.obj_id == target_object)
        return [vocab.id(f"lm{env.landmarks[goal]}"), vocab.id(f"obj{obj.cls_id}")]
    tokens = []
    heading = start_heading
    for a, b in zip(path[:-1], path[1:]):
        bearing = env.bearing(a, b)
        tokens.append(vocab.id(f"turn{heading_bin(bearing - heading)}"))
        tokens.append(vocab.id(f"lm{env.landmarks[b]}"))
        heading = bearing
    tokens.append(vocab.id("stop"))
    return tokens


@dataclass
class EpisodeSuite:
    env: Environment
    vocab: Vocab
    episodes: list[Episode]
    mode: str  # "r2r" | "reverie"
    seed: int
    baseline_sr: Optional[float] = None

    @property
    def reverie(self) -> bool:
        return self.mode == "reverie"


def generate_episodes(env: Environment, vocab: Vocab, seed: int, count: int,
                      mode: str = "r2r", min_hops: int = 2, max_hops: int = 4,
                      min_dist: float = 5.0) -> list[Episode]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(20,)))
    episodes = []
    attempts = 0
    while len(episodes) < count:
        attempts += 1
        if attempts > count * 200:
            raise GenerationError(
                f"could not sample {count} episodes with {min_hops}-{max_hops} hops "
                f"and geodesic >= {min_dist} m")
        start, goal = (int(x) for x in rng.integers(0, env.n_nodes, 2))
        if start == goal:
            continue
        path = env.shortest_path_nodes(start, goal)
        hops = len(path) - 1
        if not (min_hops <= hops <= max_hops) or env.geodesic(start, goal) < min_dist:
            continue
        heading = float(rng.uniform(0, 2 * math.pi))
        target = None
        if mode == "reverie":
            objs = env.objects[goal]
            if not objs:
                continue
            target = objs[int(rng.integers(0, len(objs)))].obj_id
        instruction = synthesize_instruction(env, path, heading, vocab,
                                             reverie=(mode == "reverie"),
                                             target_object=target)
        episodes.append(Episode(episode_id=len(episodes), start=start, goal=goal,
                                start_heading=heading, path=path,
                                instruction=instruction, target_object=target))
    return episodes


def make_suite(seed: int, n_nodes: int = 20, n_episodes: int = 200,
               mode: str = "r2r", avg_degree: float = 4.0, extent_m: float = 20.0,
               n_landmarks: int = 29, objects_per_node: int = 0,
               n_object_classes: int = 8, feat_dim: int = 32, rep_factor: int = 4,
               episode_seed: Optional[int] = None, min_hops: int = 2,
               max_hops: int = 4, min_dist: float = 5.0) -> EpisodeSuite:
    if mode not in ("r2r", "reverie"):
        raise GenerationError(f"unknown mode {mode!r}")
    if mode == "reverie" and objects_per_node < 1:
        objects_per_node = 3
    env = generate_environment(seed, n_nodes=n_nodes, avg_degree=avg_degree,
                               extent_m=extent_m, n_landmarks=n_landmarks,
                               objects_per_node=objects_per_node,
                               n_object_classes=n_object_classes,
                               feat_dim=feat_dim, rep_factor=rep_factor)
    vocab = Vocab.build(n_landmarks, n_object_classes if mode == "reverie" else 0)
    episodes = generate_episodes(env, vocab, episode_seed if episode_seed is not None
                                 else seed, n_episodes, mode=mode, min_hops=min_hops,
                                 max_hops=max_hops, min_dist=min_dist)
    return EpisodeSuite(env=env, vocab=vocab, episodes=episodes, mode=mode, seed=seed)


# ---------------------------------------------------------------------------
# serialization


def suite_to_dict(suite: EpisodeSuite) -> dict:
    env = suite.env
    return {
        "format": SUITE_FORMAT,
        "mode": suite.mode,
        "seed": suite.seed,
        "baseline_sr": suite.baseline_sr,
        "vocab": suite.vocab.words,
        "env": {
            "seed": env.seed,
            "feat_dim": env.feat_dim,
            "rep_factor": env.rep_factor,
            "view_noise": env.view_noise,
            "image_wh": list(env.image_wh),
            "positions": [[float(x) for x in p] for p in env.positions],
            "edges": [list(e) for e in env.edges],
            "landmarks": env.landmarks.tolist(),
            "objects": [
                [{"obj_id": o.obj_id, "cls_id": o.cls_id, "box": list(o.box),
                  "view_heading": o.view_heading} for o in node_objs]
                for node_objs in env.objects
            ],
        },
        "episodes": [
            {"episode_id": e.episode_id, "start": e.start, "goal": e.goal,
             "start_heading": e.start_heading, "path": e.path,
             "instruction": e.instruction, "target_object": e.target_object}
            for e in suite.episodes
        ],
    }


def suite_from_dict(data: dict) -> EpisodeSuite:
    if data.get("format") != SUITE_FORMAT:
        raise ContractError(f"unsupported suite format {data.get('format')!r}")
    ed = data["env"]
    env = Environment(
        seed=ed["seed"],
        positions=np.array(ed["positions"]),
        edges=[tuple(e) for e in ed["edges"]],
        landmarks=np.array(ed["landmarks"]),
        objects=[
            [EnvObject(obj_id=o["obj_id"], cls_id=o["cls_id"],
                       box=tuple(o["box"]), view_heading=o["view_heading"])
             for o in node_objs]
            for node_objs in ed["objects"]
        ],
        feat_dim=ed["feat_dim"], rep_factor=ed["rep_factor"],
        image_wh=tuple(ed["image_wh"]), view_noise=ed["view_noise"])
    episodes = [
        Episode(episode_id=e["episode_id"], start=e["start"], goal=e["goal"],
                start_heading=e["start_heading"], path=list(e["path"]),
                instruction=list(e["instruction"]),
                target_object=e["target_object"])
        for e in data["episodes"]
    ]
    suite = EpisodeSuite(env=env, vocab=Vocab(list(data["vocab"])), episodes=episodes,
                         mode=data["mode"], seed=data["seed"])
    suite.baseline_sr = data.get("baseline_sr")
    return suite


def save_suite(suite: EpisodeSuite, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(suite_to_dict(suite), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_suite(path) -> EpisodeSuite:
    with open(path, "r", encoding="utf-8") as fh:
        return suite_from_dict(json.load(fh))
