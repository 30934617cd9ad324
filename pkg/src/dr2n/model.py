"""Forecasting model: t=0 classification, graph-coupled GRU rollout, losses.

The rollout never sees ground-truth labels. Each step feeds the previous
step's raw logits back into the GRU:

    h^0 = v                      a^0 = cls(h^0)
    h~^{t-1} = graph(h^{t-1})    h^t = gru(h~^{t-1}, a^{t-1})    a^t = cls(h^t)

``gru`` skips the graph step; ``single-head`` and ``multi-head`` read every
horizon directly off ``v`` with per-step heads.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Tensor
from .recurrent import GruCell, GruState, init_state
from .relational import VARIANTS as RELATIONAL_VARIANTS
from .relational import EdgeAttention, NodeSet, RelationalLayer
from .synthworld import Episode, config_hash

MODEL_VARIANTS = ("single-head", "multi-head", "gru", "rn", "gat", "dr2n")
LOSS_MODES = ("exclusive-softmax", "multilabel-sigmoid")
CHECKPOINT_FORMAT = "dr2n-checkpoint/1"


@dataclass
class ModelConfig:
    variant: str = "dr2n"
    num_classes: int = 8
    horizon: int = 5
    history: int = 10
    hidden: int = 64
    edge_dim: int | None = None
    loss_mode: str = "exclusive-softmax"
    loc_weight: float = 1.0
    beta_start: float = 1.0
    beta_end: float = 0.5
    feature_adapter: bool = True
    feature_grad_multiplier: float = 0.01
    edge_activation: str = "relu"
    node_activation: str = "tanh"
    init_std: float = 0.1
    init_seed: int = 0

    def __post_init__(self):
        if self.variant not in MODEL_VARIANTS:
            raise ValueError(f"variant must be one of {MODEL_VARIANTS}, got {self.variant!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.beta_start <= 0 or self.beta_end <= 0:
            raise ValueError("beta schedule endpoints must be positive")

    @property
    def background(self) -> int:
        return self.num_classes

    @property
    def relational(self) -> bool:
        return self.variant in RELATIONAL_VARIANTS

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def beta_schedule(horizon: int, start: float = 1.0, end: float = 0.5) -> list[float]:
    """Per-step classification weights, linear from ``start`` at t=0 to ``end`` at t=T."""
    return [start + (end - start) * t / horizon for t in range(horizon + 1)]


@dataclass
class Batch:
    """Episodes padded to a common node count."""

    features: np.ndarray      # (B, N, d)
    boxes: np.ndarray         # (B, N, 4)
    mask: np.ndarray          # (B, N) real node
    actor: np.ndarray         # (B, N) real node that is a true actor
    targets: np.ndarray       # (T+1, B, N) class index, background for distractors/padding
    gt_boxes: np.ndarray      # (B, N, 4), zeros off-actor
    counts: np.ndarray        # (B,) real nodes per episode

    @property
    def size(self) -> int:
        return self.features.shape[0]


def make_batch(episodes: Sequence[Episode], background: int, horizon: int | None = None) -> Batch:
    if not episodes:
        raise ValueError("empty batch")
    B = len(episodes)
    N = max(max(ep.num_nodes for ep in episodes), 1)
    d = episodes[0].features.shape[-1]
    T = episodes[0].horizon if horizon is None else horizon
    feats = np.zeros((B, N, d))
    boxes = np.tile(np.array([0.5, 0.5, 1.0, 1.0]), (B, N, 1))
    mask = np.zeros((B, N), bool)
    actor = np.zeros((B, N), bool)
    targets = np.full((T + 1, B, N), background, dtype=np.int64)
    gt = np.zeros((B, N, 4))
    for b, ep in enumerate(episodes):
        n = ep.num_nodes
        if ep.features.shape[-1] != d:
            raise ValueError("episodes disagree on feature width")
        if ep.num_actors and ep.horizon < T:
            raise ValueError(f"episode horizon {ep.horizon} < model horizon {T}")
        feats[b, :n] = ep.features
        boxes[b, :n] = ep.boxes
        mask[b, :n] = True
        nodes = ep.actor_nodes
        actor[b, nodes] = True
        if n:
            targets[:, b, :n] = ep.node_targets(background)[: T + 1]
        gt[b, nodes] = ep.gt_boxes
    return Batch(feats, boxes, mask, actor, targets, gt, mask.sum(axis=1))


@dataclass
class Prediction:
    """Per-episode model output.

    ``boxes`` is (N, 4) center-size; ``logits`` is (T+1, N, A+1) with the
    last column the background class. ``step_boxes`` (T+1, N, 4) is set when
    each horizon has its own box head.
    """

    boxes: np.ndarray
    logits: np.ndarray
    loss_mode: str = "exclusive-softmax"
    attention: list[np.ndarray] | None = None
    step_boxes: np.ndarray | None = None

    @property
    def num_nodes(self) -> int:
        return self.boxes.shape[0]

    def box_at(self, t: int) -> np.ndarray:
        return self.boxes if self.step_boxes is None else self.step_boxes[t]

    def scores(self, t: int) -> np.ndarray:
        """(N, A+1) class scores: softmax probabilities or per-class sigmoids."""
        x = self.logits[t]
        if self.loss_mode == "exclusive-softmax":
            e = np.exp(x - x.max(axis=-1, keepdims=True))
            return e / e.sum(axis=-1, keepdims=True)
        return 1.0 / (1.0 + np.exp(-x))

    def to_record(self) -> dict:
        rec = {"boxes": self.boxes.tolist(), "logits": self.logits.tolist(), "loss_mode": self.loss_mode}
        if self.step_boxes is not None:
            rec["step_boxes"] = self.step_boxes.tolist()
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Prediction":
        sb = rec.get("step_boxes")
        return cls(np.asarray(rec["boxes"], float).reshape(-1, 4),
                   np.asarray(rec["logits"], float), rec.get("loss_mode", "exclusive-softmax"),
                   step_boxes=None if sb is None else np.asarray(sb, float))


@dataclass
class BatchOutput:
    """Differentiable rollout output for a batch."""

    boxes: list[Tensor]              # one (B, N, 4) per box head; len 1 or T+1
    logits: list[Tensor]             # (B, N, A+1) for t = 0..T
    attention: list[EdgeAttention] = field(default_factory=list)


class Model:
    """Parameters plus forward/loss for one variant."""

    def __init__(self, config: ModelConfig, feature_dim: int | None = None, params: ParamStore | None = None):
        self.config = cfg = config
        d = cfg.hidden
        if feature_dim is not None and feature_dim != d:
            raise ValueError(f"feature width {feature_dim} must equal hidden size {d}")
        self.params = params if params is not None else ParamStore(seed=cfg.init_seed, init_std=cfg.init_std)
        P = self.params
        C = cfg.num_classes + 1
        T = cfg.horizon
        self.relational: RelationalLayer | None = None
        self.gru: GruCell | None = None
        if cfg.variant == "single-head":
            prefixes = [f"head{t}." for t in range(T + 1)]
            for pre in prefixes:
                self._build_adapter(pre)
                self._build_box(pre)
                P.get(pre + "cls.w1", (d, d)); P.get(pre + "cls.b1", (d,), init="zeros")
                P.get(pre + "cls.w2", (d, C)); P.get(pre + "cls.b2", (C,), init="zeros")
        elif cfg.variant == "multi-head":
            self._build_adapter("")
            self._build_box("")
            P.get("cls.w1", (d, d)); P.get("cls.b1", (d,), init="zeros")
            for t in range(T + 1):
                P.get(f"head{t}.w2", (d, C)); P.get(f"head{t}.b2", (C,), init="zeros")
        else:
            self._build_adapter("")
            self._build_box("")
            P.get("cls.w1", (d, d)); P.get("cls.b1", (d,), init="zeros")
            P.get("cls.w2", (d, C)); P.get("cls.b2", (C,), init="zeros")
            self.gru = GruCell(P, input_dim=C, hidden=d, prefix="gru")
            if cfg.relational:
                self.relational = RelationalLayer(P, cfg.variant, d, cfg.edge_dim,
                                                  cfg.edge_activation, cfg.node_activation, prefix="rel")

    def _build_adapter(self, pre: str) -> None:
        if self.config.feature_adapter:
            d = self.config.hidden
            self.params.get(pre + "feat.w", (d, d), init="eye", grad_multiplier=self.config.feature_grad_multiplier)
            self.params.get(pre + "feat.b", (d,), init="zeros", grad_multiplier=self.config.feature_grad_multiplier)

    def _build_box(self, pre: str) -> None:
        self.params.get(pre + "box.w", (self.config.hidden + 4, 4), init="zeros")
        self.params.get(pre + "box.b", (4,), init="zeros")

    # -------------------------------------------------------------- pieces

    def features(self, x, pre: str = "") -> Tensor:
        """Visual features v: the raw node features through the (optional) adapter."""
        x = dc.as_tensor(x)
        if not self.config.feature_adapter:
            return x
        return dc.add_bias(x @ self.params[pre + "feat.w"], self.params[pre + "feat.b"])

    def classify(self, h, pre: str = "", out: str | None = None) -> Tensor:
        """Two-layer MLP from hidden state to A+1 logits, shared across actors and steps."""
        P = self.params
        hid = dc.relu(dc.add_bias(dc.as_tensor(h) @ P[pre + "cls.w1"], P[pre + "cls.b1"]))
        out = out if out is not None else pre + "cls"
        return dc.add_bias(hid @ P[out + ".w2"], P[out + ".b2"])

    def refine_box(self, h, proposal, pre: str = "") -> Tensor:
        """Proposal plus predicted (dcx, dcy, dw, dh) deltas."""
        P = self.params
        proposal = dc.as_tensor(proposal)
        delta = dc.add_bias(dc.concat(dc.as_tensor(h), proposal, axis=-1) @ P[pre + "box.w"], P[pre + "box.b"])
        return proposal + delta

    # -------------------------------------------------------------- rollout

    def forward(self, batch: Batch) -> BatchOutput:
        cfg = self.config
        T = cfg.horizon
        if cfg.variant == "single-head":
            logits, boxes = [], []
            for t in range(T + 1):
                pre = f"head{t}."
                v = self.features(batch.features, pre)
                logits.append(self.classify(v, pre))
                boxes.append(self.refine_box(v, batch.boxes, pre))
            return BatchOutput(boxes, logits)
        v = self.features(batch.features)
        boxes = [self.refine_box(v, batch.boxes)]
        if cfg.variant == "multi-head":
            return BatchOutput(boxes, [self.classify(v, "", out=f"head{t}") for t in range(T + 1)])
        state = init_state(v, cfg.hidden)
        logits = [self.classify(state.h)]
        attention = []
        for t in range(1, T + 1):
            h = state.h
            if self.relational is not None:
                h, attn = self.relational(NodeSet(h, batch.mask))
                attention.append(attn)
            state = self.gru.step(GruState(h), logits[-1])
            logits.append(self.classify(state.h))
        return BatchOutput(boxes, logits, attention)

    def rollout(self, features, boxes) -> Prediction:
        """Single-episode forward pass from (N, d) features and (N, 4) proposals."""
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] == 0:
            T = self.config.horizon
            return Prediction(np.zeros((0, 4)), np.zeros((T + 1, 0, self.config.num_classes + 1)),
                              self.config.loss_mode)
        ep = Episode(seed=0, boxes=boxes, features=features, distractor=np.ones(features.shape[0], bool),
                     gt_boxes=np.zeros((0, 4)), labels=np.zeros((0, self.config.horizon + 1)))
        return self.predict([ep])[0]

    def predict(self, episodes: Sequence[Episode], batch_size: int = 64) -> list[Prediction]:
        out: list[Prediction] = []
        with dc.no_grad():
            for s in range(0, len(episodes), batch_size):
                chunk = episodes[s:s + batch_size]
                batch = make_batch(chunk, self.config.background, self.config.horizon)
                res = self.forward(batch)
                logits = np.stack([l.values for l in res.logits], axis=1)   # (B, T+1, N, C)
                boxes = np.stack([b.values for b in res.boxes], axis=1)     # (B, H, N, 4)
                for b, ep in enumerate(chunk):
                    n = ep.num_nodes
                    attn = [a.alpha.values[b, :n, :n].copy() for a in res.attention] or None
                    step_boxes = boxes[b, :, :n].copy() if boxes.shape[1] > 1 else None
                    out.append(Prediction(boxes[b, 0, :n].copy(), logits[b, :, :n].copy(),
                                          self.config.loss_mode, attn, step_boxes))
        return out

    # -------------------------------------------------------------- loss

    def loss_terms(self, out: BatchOutput, batch: Batch) -> tuple[list[Tensor], list[Tensor]]:
        """Per-box-head localisation losses and per-step classification losses.

        Each is averaged over the relevant nodes of an episode, then over
        episodes.
        """
        cfg = self.config
        C = cfg.num_classes + 1
        n_act = batch.actor.sum(axis=1)
        # empty episodes contribute nothing, not even to the denominator
        loc_w = np.where(batch.actor, 1.0 / np.maximum(n_act, 1)[:, None], 0.0) / max(int((n_act > 0).sum()), 1)
        cls_w = np.where(batch.mask, 1.0 / np.maximum(batch.counts, 1)[:, None], 0.0) / max(
            int((batch.counts > 0).sum()), 1)
        loc_terms = []
        for boxes in out.boxes:
            per = dc.smooth_l1(boxes, batch.gt_boxes)
            loc_terms.append(dc.sum(per * np.broadcast_to(loc_w[..., None], per.shape).copy()))
        cls_terms = []
        flat_w = cls_w.reshape(-1)
        for t, logits in enumerate(out.logits):
            flat = dc.reshape(logits, (-1, C))
            tgt = batch.targets[t].reshape(-1)
            if cfg.loss_mode == "exclusive-softmax":
                cls_terms.append(dc.softmax_cross_entropy(flat, tgt, flat_w))
            else:
                onehot = np.zeros((tgt.size, C))
                onehot[np.arange(tgt.size), tgt] = 1.0
                cls_terms.append(dc.sigmoid_cross_entropy(flat, onehot, flat_w))
        return loc_terms, cls_terms

    def loss(self, out: BatchOutput, batch: Batch) -> Tensor:
        """``loc_weight * L_loc + sum_t beta_t * L_cls_t``.

        With one box head per horizon (single-head) every head pays its own
        localisation term.
        """
        cfg = self.config
        loc_terms, cls_terms = self.loss_terms(out, batch)
        betas = beta_schedule(cfg.horizon, cfg.beta_start, cfg.beta_end)
        total = dc.scale(cls_terms[0], betas[0])
        for t in range(1, len(cls_terms)):
            total = total + dc.scale(cls_terms[t], betas[t])
        if cfg.loc_weight:
            for term in loc_terms:
                total = total + dc.scale(term, cfg.loc_weight)
        return total

    def episode_loss(self, episodes: Sequence[Episode]) -> Tensor:
        batch = make_batch(episodes, self.config.background, self.config.horizon)
        return self.loss(self.forward(batch), batch)

    # -------------------------------------------------------------- checkpoints

    def save(self, path: str | os.PathLike, extra: dict | None = None) -> None:
        save_checkpoint(path, self, extra)


def save_checkpoint(path: str | os.PathLike, model: Model, extra: dict | None = None) -> None:
    """JSON map name -> (shape, float64 values); floats use shortest round-trip repr."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "config_hash": model.config.config_hash(),
        "params": {name: {"shape": list(p.shape), "values": p.values.reshape(-1).tolist(),
                          "grad_multiplier": model.params.grad_multiplier(name)}
                   for name, p in model.params.items()},
    }
    if extra:
        doc.update(extra)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[Model, dict]:
    """Rebuild the model; returns it with the checkpoint's extra fields."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a model checkpoint")
    model = Model(ModelConfig.from_dict(doc["model_config"]))
    state = {name: np.asarray(e["values"], dtype=np.float64).reshape(e["shape"])
             for name, e in doc["params"].items()}
    model.params.load_state_dict(state, strict=True)
    for name, e in doc["params"].items():
        model.params.set_grad_multiplier(name, e.get("grad_multiplier", 1.0))
    extra = {k: v for k, v in doc.items() if k not in ("format", "model_config", "params")}
    return model, extra
