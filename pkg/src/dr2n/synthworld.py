"""Seeded multi-agent episodes standing in for detector proposals + features.

Agents sit at fixed positions in the unit square and follow a Markov chain
over action classes. Pairwise rules override the chain when two agents are
within ``radius`` of each other, which is the signal a relational model can
exploit and a per-actor model cannot. Distractor nodes (false-positive
proposals) carry random boxes and noise-only features and are supervised as
background.

``single-actor-clip`` mode instead emits one actor observed over
``clip_length`` frames whose appearance firms up frame by frame, plus a few
object nodes, one of which usually hints at the clip class.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

MODES = ("multi-actor", "single-actor-clip")


class DatasetFormatError(ValueError):
    """A dataset record violates the JSONL schema."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        prefix = f"line {lineno}: " if lineno is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class Rule:
    """Agents in classes ``a`` and ``b`` within range both switch to ``result`` for ``duration`` steps."""

    a: int
    b: int
    result: int
    duration: int = 1


def default_solo_table(num_classes: int) -> list[list[float]]:
    """Sticky chain drifting to the next class; per-class stay probabilities differ."""
    A = num_classes
    rows = []
    for k in range(A):
        stay = 0.55 + 0.1 * (k % 3)
        row = np.full(A, 0.0)
        if A == 1:
            rows.append([1.0])
            continue
        rest = 1.0 - stay
        row[k] = stay
        row[(k + 1) % A] += 0.7 * rest
        others = [j for j in range(A) if j not in (k, (k + 1) % A)]
        if others:
            row[others] += 0.3 * rest / len(others)
        else:
            row[(k + 1) % A] += 0.3 * rest
        rows.append(row.tolist())
    return rows


def default_rules(num_classes: int) -> list[Rule]:
    """Each class in the lower half pairs with its successor into an upper-half class."""
    A = num_classes
    half = A // 2
    if half < 1:
        return []
    return [Rule(k, (k + 1) % half, half + k, 2) for k in range(half)]


@dataclass
class WorldConfig:
    num_classes: int = 8
    n_true: tuple[int, int] = (2, 6)
    n_fake: tuple[int, int] = (2, 8)
    radius: float = 0.5
    horizon: int = 5
    feature_dim: int = 64
    noise: float = 0.3
    actor_scale: float = 1.0
    position_scale: float = 0.5
    distractor_scale: float = 1.0
    box_jitter: float = 0.08
    solo_transitions: list[list[float]] | None = None
    rules: list[Rule] | None = None
    interactions: bool = True
    mode: str = "multi-actor"
    clip_length: int = 10
    context_prob: float = 0.6
    context_scale: float = 1.0
    appearance_seed: int = 1234

    def __post_init__(self):
        self.n_true = tuple(self.n_true)
        self.n_fake = tuple(self.n_fake)
        if self.solo_transitions is None:
            self.solo_transitions = default_solo_table(self.num_classes)
        if self.rules is None:
            self.rules = default_rules(self.num_classes)
        self.rules = [r if isinstance(r, Rule) else Rule(*r) for r in self.rules]
        self.validate()

    def validate(self) -> None:
        A = self.num_classes
        if A < 1:
            raise ValueError("num_classes must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        lo, hi = self.n_true
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid n_true range {self.n_true}")
        lo, hi = self.n_fake
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid n_fake range {self.n_fake}")
        P = np.asarray(self.solo_transitions, dtype=np.float64)
        if P.shape != (A, A):
            raise ValueError(f"transition table must be {A}x{A}, got {P.shape}")
        if (P < 0).any() or not np.allclose(P.sum(axis=1), 1.0, atol=1e-9):
            bad = int(np.argmax(np.abs(P.sum(axis=1) - 1.0) + (P < 0).any(axis=1)))
            raise ValueError(f"transition row {bad} is not a probability vector")
        for r in self.rules:
            if not all(0 <= c < A for c in (r.a, r.b, r.result)) or r.duration < 1:
                raise ValueError(f"invalid rule {r}")
        if self.clip_length < 1:
            raise ValueError("clip_length must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["n_true"] = list(self.n_true)
        d["n_fake"] = list(self.n_fake)
        d["rules"] = [[r.a, r.b, r.result, r.duration] for r in self.rules]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())

    def stationary_distribution(self) -> np.ndarray:
        """Stationary law of the solo chain (left eigenvector for eigenvalue 1)."""
        P = np.asarray(self.solo_transitions)
        A = P.shape[0]
        M = np.vstack([P.T - np.eye(A), np.ones((1, A))])
        rhs = np.zeros(A + 1)
        rhs[-1] = 1.0
        pi, *_ = np.linalg.lstsq(M, rhs, rcond=None)
        return pi


def high_distractor_world(**overrides) -> WorldConfig:
    """Default ablation world: up to 8 false positives next to 2-6 actors."""
    return WorldConfig(**overrides)


def clip_world(**overrides) -> WorldConfig:
    """Early-classification analog: one actor, a few objects, one-step horizon."""
    base = dict(mode="single-actor-clip", n_true=(1, 1), n_fake=(1, 3), horizon=1, noise=1.0,
                rules=[], interactions=False)
    base.update(overrides)
    return WorldConfig(**base)


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_flat_config(path: str | os.PathLike) -> dict:
    """Read a flat JSON object of ``key: value`` pairs."""
    with open(path) as fh:
        d = json.load(fh)
    if not isinstance(d, dict) or any(isinstance(v, dict) for v in d.values()):
        raise ValueError(f"{path}: expected a flat key-value JSON object")
    return d


@dataclass
class Episode:
    """One sample. Actors are the non-distractor nodes, in node order."""

    seed: int
    boxes: np.ndarray
    features: np.ndarray
    distractor: np.ndarray
    gt_boxes: np.ndarray
    labels: np.ndarray
    clip_label: int | None = None
    feature_seq: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.distractor = np.asarray(self.distractor, dtype=bool)
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.feature_seq is not None:
            self.feature_seq = np.asarray(self.feature_seq, dtype=np.float64)

    @property
    def num_nodes(self) -> int:
        return self.boxes.shape[0]

    @property
    def num_actors(self) -> int:
        return self.gt_boxes.shape[0]

    @property
    def horizon(self) -> int:
        return self.labels.shape[1] - 1

    @property
    def actor_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.distractor)

    def node_targets(self, background: int) -> np.ndarray:
        """(T+1, N) supervision: actor labels, ``background`` for distractors."""
        tgt = np.full((self.horizon + 1, self.num_nodes), background, dtype=np.int64)
        tgt[:, self.actor_nodes] = self.labels.T
        return tgt

    def at_frame(self, frame: int) -> "Episode":
        """Copy whose node features are those of clip frame ``frame``."""
        if self.feature_seq is None:
            raise ValueError("episode has no per-frame features")
        return dataclasses.replace(self, features=self.feature_seq[:, frame].copy())

    def equals(self, other: "Episode") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is b
            return a.shape == b.shape and np.array_equal(a, b)
        return (self.seed == other.seed and self.clip_label == other.clip_label
                and same(self.boxes, other.boxes) and same(self.features, other.features)
                and same(self.distractor, other.distractor) and same(self.gt_boxes, other.gt_boxes)
                and same(self.labels, other.labels) and same(self.feature_seq, other.feature_seq))


# ---------------------------------------------------------------- generation

class _Appearance:
    """Fixed per-world embedding tables (shared by every episode of a world)."""

    def __init__(self, cfg: WorldConfig):
        rng = np.random.default_rng(cfg.appearance_seed)
        d = cfg.feature_dim
        self.classes = rng.normal(size=(cfg.num_classes, d))
        self.actor = rng.normal(size=d)
        self.freq = rng.normal(scale=3.0, size=(2, d))
        self.phase = rng.uniform(0, 2 * np.pi, size=d)
        self.context = rng.normal(size=(cfg.num_classes, d))

    def position_code(self, centers: np.ndarray) -> np.ndarray:
        return np.cos(centers @ self.freq + self.phase)


_APPEARANCE_CACHE: dict[str, _Appearance] = {}


def class_embeddings(cfg: WorldConfig) -> np.ndarray:
    return _appearance(cfg).classes


def _appearance(cfg: WorldConfig) -> _Appearance:
    key = f"{cfg.appearance_seed}:{cfg.num_classes}:{cfg.feature_dim}"
    app = _APPEARANCE_CACHE.get(key)
    if app is None:
        app = _APPEARANCE_CACHE[key] = _Appearance(cfg)
    return app


def _random_box(rng: np.random.Generator, size_range=(0.1, 0.2)) -> np.ndarray:
    w, h = rng.uniform(*size_range, size=2)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return np.array([cx, cy, w, h])


def clip_box(box: np.ndarray) -> np.ndarray:
    """Keep a center-size box inside the unit square."""
    cx, cy, w, h = box
    w = float(np.clip(w, 1e-3, 1.0))
    h = float(np.clip(h, 1e-3, 1.0))
    cx = float(np.clip(cx, w / 2, 1 - w / 2))
    cy = float(np.clip(cy, h / 2, 1 - h / 2))
    return np.array([cx, cy, w, h])


def _jitter(rng: np.random.Generator, box: np.ndarray, amount: float) -> np.ndarray:
    cx, cy, w, h = box
    cx = cx + rng.normal(0, amount) * w
    cy = cy + rng.normal(0, amount) * h
    w = w * np.exp(rng.normal(0, amount))
    h = h * np.exp(rng.normal(0, amount))
    return clip_box(np.array([cx, cy, w, h]))


def evolve_labels(cfg: WorldConfig, rng: np.random.Generator, first: np.ndarray,
                  centers: np.ndarray) -> np.ndarray:
    """Roll labels forward ``cfg.horizon`` steps; returns (n_agents, T+1).

    Updates are simultaneous: rules read the states at ``t``. An agent held
    by an earlier rule keeps its class until the hold runs out.
    """
    P = np.asarray(cfg.solo_transitions)
    n = first.shape[0]
    labels = np.zeros((n, cfg.horizon + 1), dtype=np.int64)
    labels[:, 0] = first
    hold = np.zeros(n, dtype=np.int64)
    held_class = np.zeros(n, dtype=np.int64)
    dist = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
    near = (dist < cfg.radius) & ~np.eye(n, dtype=bool)
    for t in range(cfg.horizon):
        cur = labels[:, t]
        nxt = np.empty(n, dtype=np.int64)
        new_hold = hold.copy()
        for i in range(n):
            u = rng.random()
            if hold[i] > 0:
                nxt[i] = held_class[i]
                new_hold[i] = hold[i] - 1
                continue
            fired = None
            if cfg.interactions:
                for rule in cfg.rules:
                    partners = near[i] & (hold == 0)
                    if cur[i] == rule.a and np.any(partners & (cur == rule.b)):
                        fired = rule
                        break
                    if cur[i] == rule.b and np.any(partners & (cur == rule.a)):
                        fired = rule
                        break
            if fired is not None:
                nxt[i] = fired.result
                held_class[i] = fired.result
                new_hold[i] = fired.duration - 1
            else:
                nxt[i] = min(int(np.searchsorted(np.cumsum(P[cur[i]]), u, side="right")), P.shape[0] - 1)
        labels[:, t + 1] = nxt
        hold = new_hold
    return labels


def generate(cfg: WorldConfig, seed: int) -> Episode:
    """Deterministic in ``(cfg, seed)``."""
    cfg.validate()
    if cfg.mode == "single-actor-clip":
        return _generate_clip(cfg, seed)
    rng = np.random.default_rng([seed, 0x5EED])
    app = _appearance(cfg)
    d = cfg.feature_dim
    n_true = int(rng.integers(cfg.n_true[0], cfg.n_true[1] + 1))
    n_fake = int(rng.integers(cfg.n_fake[0], cfg.n_fake[1] + 1))

    gt = np.stack([_random_box(rng) for _ in range(n_true)])
    pi = cfg.stationary_distribution()
    first = rng.choice(cfg.num_classes, size=n_true, p=pi / pi.sum())
    labels = evolve_labels(cfg, rng, first, gt[:, :2])

    actor_feats = (app.classes[labels[:, 0]] + cfg.actor_scale * app.actor
                   + cfg.position_scale * app.position_code(gt[:, :2])
                   + cfg.noise * rng.normal(size=(n_true, d)))
    actor_boxes = np.stack([_jitter(rng, b, cfg.box_jitter) for b in gt])
    fake_boxes = np.stack([_random_box(rng, (0.05, 0.3)) for _ in range(n_fake)]) if n_fake else np.zeros((0, 4))
    fake_feats = cfg.distractor_scale * rng.normal(size=(n_fake, d))

    order = rng.permutation(n_true + n_fake)
    boxes = np.concatenate([actor_boxes, fake_boxes])[order]
    feats = np.concatenate([actor_feats, fake_feats])[order]
    distractor = np.concatenate([np.zeros(n_true, bool), np.ones(n_fake, bool)])[order]
    # actors are listed in node order
    actor_rank = order[~distractor]
    return Episode(seed=seed, boxes=boxes, features=feats, distractor=distractor,
                   gt_boxes=gt[actor_rank], labels=labels[actor_rank])


def _generate_clip(cfg: WorldConfig, seed: int) -> Episode:
    rng = np.random.default_rng([seed, 0xC11B])
    app = _appearance(cfg)
    d, L = cfg.feature_dim, cfg.clip_length
    label = int(rng.integers(cfg.num_classes))
    n_obj = int(rng.integers(cfg.n_fake[0], cfg.n_fake[1] + 1))

    gt = _random_box(rng, (0.2, 0.4))
    ramp = (np.arange(L) + 1) / L
    actor_seq = (ramp[:, None] * app.classes[label] + cfg.actor_scale * app.actor
                 + cfg.noise * rng.normal(size=(L, d)))
    obj_seqs, obj_boxes = [], []
    for k in range(n_obj):
        if k == 0:
            hint = label if rng.random() < cfg.context_prob else int(rng.integers(cfg.num_classes))
            base = cfg.context_scale * app.context[hint]
        else:
            base = np.zeros(d)
        # objects are static: one appearance, per-frame sensor noise
        obj_seqs.append(base + cfg.distractor_scale * rng.normal(size=d) * 0.5
                        + cfg.noise * rng.normal(size=(L, d)) * 0.5)
        obj_boxes.append(_random_box(rng, (0.05, 0.3)))

    seqs = np.stack([actor_seq] + obj_seqs)
    boxes = np.stack([_jitter(rng, gt, cfg.box_jitter)] + obj_boxes)
    distractor = np.array([False] + [True] * n_obj)
    order = rng.permutation(1 + n_obj)
    seqs, boxes, distractor = seqs[order], boxes[order], distractor[order]
    labels = np.full((1, cfg.horizon + 1), label, dtype=np.int64)
    return Episode(seed=seed, boxes=boxes, features=seqs[:, -1].copy(), distractor=distractor,
                   gt_boxes=gt[None], labels=labels, clip_label=label, feature_seq=seqs)


def generate_many(cfg: WorldConfig, seeds: Iterable[int]) -> list[Episode]:
    return [generate(cfg, int(s)) for s in seeds]


def split_seeds(seed: int, split: str, count: int) -> list[int]:
    """Disjoint, reproducible episode seeds for a named split of a run."""
    tag = {"train": 1, "eval": 2, "test": 3}.get(split)
    if tag is None:
        raise ValueError(f"unknown split {split!r}")
    ss = np.random.SeedSequence([seed, tag])
    return [int(x) for x in ss.generate_state(count, dtype=np.uint32)]


# ---------------------------------------------------------------- JSONL

def episode_to_record(ep: Episode) -> dict:
    nodes = []
    for n in range(ep.num_nodes):
        node = {"box": ep.boxes[n].tolist(), "feat": ep.features[n].tolist(),
                "distractor": bool(ep.distractor[n])}
        if ep.feature_seq is not None:
            node["feat_seq"] = ep.feature_seq[n].tolist()
        nodes.append(node)
    actors = [{"gt_box": ep.gt_boxes[k].tolist(), "labels": ep.labels[k].tolist()}
              for k in range(ep.num_actors)]
    rec = {"seed": int(ep.seed), "nodes": nodes, "actors": actors}
    if ep.clip_label is not None:
        rec["clip_label"] = int(ep.clip_label)
    if ep.meta:
        rec["meta"] = ep.meta
    return rec


def serialize(ep: Episode) -> str:
    return json.dumps(episode_to_record(ep), separators=(",", ":"))


def _require(cond: bool, msg: str, lineno: int | None) -> None:
    if not cond:
        raise DatasetFormatError(msg, lineno)


def record_to_episode(rec: dict, lineno: int | None = None) -> Episode:
    _require(isinstance(rec, dict), "record must be a JSON object", lineno)
    for key in ("seed", "nodes", "actors"):
        _require(key in rec, f"missing field {key!r}", lineno)
    nodes, actors = rec["nodes"], rec["actors"]
    _require(isinstance(nodes, list) and len(nodes) > 0, "nodes must be a non-empty list", lineno)
    _require(isinstance(actors, list) and len(actors) > 0, "actors must be a non-empty list", lineno)
    for n, node in enumerate(nodes):
        _require(isinstance(node, dict) and {"box", "feat", "distractor"} <= set(node),
                 f"node {n} needs box, feat, distractor", lineno)
        _require(len(node["box"]) == 4, f"node {n} box must have 4 numbers", lineno)
    n_actor_nodes = sum(1 for node in nodes if not node["distractor"])
    _require(n_actor_nodes == len(actors),
             f"{len(actors)} actors but {n_actor_nodes} non-distractor nodes", lineno)
    lengths = {len(a.get("labels", [])) for a in actors}
    _require(len(lengths) == 1 and 0 not in lengths, "actors must share a non-empty label horizon", lineno)
    for k, a in enumerate(actors):
        _require("gt_box" in a and len(a["gt_box"]) == 4, f"actor {k} gt_box must have 4 numbers", lineno)
    has_seq = ["feat_seq" in node for node in nodes]
    _require(all(has_seq) or not any(has_seq), "feat_seq must be present on all nodes or none", lineno)
    try:
        return Episode(
            seed=int(rec["seed"]),
            boxes=[node["box"] for node in nodes],
            features=[node["feat"] for node in nodes],
            distractor=[bool(node["distractor"]) for node in nodes],
            gt_boxes=[a["gt_box"] for a in actors],
            labels=[a["labels"] for a in actors],
            clip_label=rec.get("clip_label"),
            feature_seq=[node["feat_seq"] for node in nodes] if all(has_seq) else None,
            meta=rec.get("meta", {}),
        )
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"bad field values: {exc}", lineno) from exc


def deserialize(line: str, lineno: int | None = None) -> Episode:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"invalid JSON: {exc.msg}", lineno) from exc
    return record_to_episode(rec, lineno)


def write_jsonl(path: str | os.PathLike, episodes: Iterable[Episode], meta: dict | None = None) -> None:
    with open(path, "w") as fh:
        for ep in episodes:
            if meta:
                ep = dataclasses.replace(ep, meta={**ep.meta, **meta})
            fh.write(serialize(ep))
            fh.write("\n")


def iter_jsonl(path: str | os.PathLike) -> Iterator[Episode]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield deserialize(line, lineno)


def read_jsonl(path: str | os.PathLike) -> list[Episode]:
    return list(iter_jsonl(path))
