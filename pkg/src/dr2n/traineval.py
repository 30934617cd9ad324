"""SGD with warmup + cosine decay, mAP / accuracy@K metrics, ablation runner."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore
from .model import MODEL_VARIANTS, Model, ModelConfig, Prediction, make_batch
from .synthworld import Episode, WorldConfig, config_hash, generate_many, split_seeds

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """A non-finite gradient or loss showed up during training."""

    def __init__(self, message: str, step: int | None = None, param: str | None = None):
        super().__init__(message)
        self.step = step
        self.param = param


# ---------------------------------------------------------------- schedule

@dataclass
class Schedule:
    """Linear warmup from ``lr_start`` to ``lr_peak`` over ``warmup_steps``,
    then half-cosine from ``lr_peak`` to zero over ``cosine_steps``."""

    warmup_steps: int = 200
    cosine_steps: int = 5000
    lr_start: float = 0.008
    lr_peak: float = 0.08

    def lr(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be >= 0")
        if step < self.warmup_steps:
            return self.lr_start + (self.lr_peak - self.lr_start) * step / self.warmup_steps
        s = step - self.warmup_steps
        if s >= self.cosine_steps:
            return 0.0
        return self.lr_peak * 0.5 * (1.0 + math.cos(math.pi * s / self.cosine_steps))

    @property
    def total_steps(self) -> int:
        return self.warmup_steps + self.cosine_steps

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def sgd_step(params: ParamStore, schedule: Schedule, step: int) -> float:
    """``p -= lr(step) * multiplier * grad`` for every parameter, then clear grads.

    Raises :class:`DivergenceError` naming the first parameter whose gradient
    (or updated value) is not finite; no parameter is touched in that case.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise DivergenceError(f"non-finite gradient in {name!r} at step {step}", step, name)
    lr = schedule.lr(step)
    updated = {}
    with np.errstate(over="ignore", invalid="ignore"):
        for name, p in params.items():
            if p.grad is not None:
                new = p.values - lr * params.scaled_grad(name)
                if not np.all(np.isfinite(new)):
                    raise DivergenceError(f"parameter {name!r} overflowed at step {step}", step, name)
                updated[name] = new
    for name, new in updated.items():
        params[name].values = new
    params.zero_grad()
    return lr


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 16
    seed: int = 0
    schedule: Schedule = field(default_factory=Schedule)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Batch for ``step`` depends only on (seed, step), so runs resume exactly."""
    rng = np.random.default_rng([seed, step, 0xBA7C])
    return rng.choice(n, size=min(batch_size, n), replace=False)


def training_batch(episodes: Sequence[Episode], seed: int, step: int, batch_size: int) -> list[Episode]:
    idx = batch_indices(seed, step, len(episodes), batch_size)
    chosen = [episodes[i] for i in idx]
    if chosen and chosen[0].feature_seq is not None:
        # clip data: one random frame per clip
        rng = np.random.default_rng([seed, step, 0xF4A3])
        chosen = [ep.at_frame(int(rng.integers(ep.feature_seq.shape[1]))) for ep in chosen]
    return chosen


def train(model: Model, episodes: Sequence[Episode], cfg: TrainConfig, start_step: int = 0,
          on_step: Callable[[int, float, float], None] | None = None) -> list[float]:
    """Run ``cfg.steps - start_step`` SGD steps; returns the loss per step.

    Loss is recorded before the update of the same step.
    """
    if not episodes:
        raise ValueError("no training episodes")
    losses = []
    for step in range(start_step, cfg.steps):
        chunk = training_batch(episodes, cfg.seed, step, cfg.batch_size)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss = model.episode_loss(chunk)
        except FloatingPointError as exc:
            raise DivergenceError(f"{exc} at step {step}", step) from exc
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss at step {step}", step)
        model.params.zero_grad()
        loss.backward()
        lr = sgd_step(model.params, cfg.schedule, step)
        losses.append(value)
        if on_step is not None:
            on_step(step, value, lr)
    return losses


# ---------------------------------------------------------------- metrics

def iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two center-size boxes."""
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return float(inter / union) if union > 0 else 0.0


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """Area under the precision envelope for detections already sorted by score."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _detections(preds: Sequence[Prediction], t: int, c: int):
    dets = []
    for e, p in enumerate(preds):
        s = p.scores(t)[:, c]
        boxes = p.box_at(t)
        for n in range(p.num_nodes):
            dets.append((float(s[n]), e, n, boxes[n]))
    # stable: equal scores keep episode/node order
    dets.sort(key=lambda d: -d[0])
    return dets


def match_class(preds: Sequence[Prediction], episodes: Sequence[Episode], t: int, c: int,
                iou_thresh: float = 0.5) -> tuple[np.ndarray, int]:
    """Greedy matching in score order; returns the TP flags and the GT count.

    A detection claims the unmatched same-episode GT of class ``c`` at time
    ``t`` with the largest IoU, provided that IoU exceeds ``iou_thresh``.
    """
    gts = {}
    n_gt = 0
    for e, ep in enumerate(episodes):
        rows = [k for k in range(ep.num_actors) if t < ep.labels.shape[1] and ep.labels[k, t] == c]
        gts[e] = (rows, np.zeros(len(rows), bool))
        n_gt += len(rows)
    flags = []
    for _, e, _, box in _detections(preds, t, c):
        rows, used = gts[e]
        best, best_iou = -1, iou_thresh
        for r, k in enumerate(rows):
            if used[r]:
                continue
            o = iou(box, episodes[e].gt_boxes[k])
            if o > best_iou:
                best, best_iou = r, o
        if best >= 0:
            used[best] = True
            flags.append(1.0)
        else:
            flags.append(0.0)
    return np.asarray(flags), n_gt


def map_at_t(preds: Sequence[Prediction], episodes: Sequence[Episode], t: int,
             iou_thresh: float = 0.5, num_classes: int | None = None) -> tuple[dict[int, float], float]:
    """Per-class AP and their unweighted mean over classes that have ground truth at ``t``."""
    if not episodes:
        raise ValueError("empty evaluation set")
    if len(preds) != len(episodes):
        raise ValueError(f"{len(preds)} predictions for {len(episodes)} episodes")
    if num_classes is None:
        num_classes = preds[0].logits.shape[-1] - 1
    per_class = {}
    for c in range(num_classes):
        flags, n_gt = match_class(preds, episodes, t, c, iou_thresh)
        if n_gt:
            per_class[c] = average_precision(flags, n_gt)
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean_ap


def frames_for_k(k_percent: float, length: int) -> int:
    """``ceil(K% * length)`` without float round-off, at least one frame."""
    if not 0 < k_percent <= 100:
        raise ValueError(f"K must lie in (0, 100], got {k_percent}")
    return max(1, math.ceil(round(k_percent * length / 100.0, 9)))


def clip_scores(model: Model, episode: Episode, n_frames: int, t_index: int = -1) -> np.ndarray:
    """(n_frames, A) actor class scores from each of the first ``n_frames`` frames."""
    frames = [episode.at_frame(s) for s in range(n_frames)]
    preds = model.predict(frames)
    actor = int(episode.actor_nodes[0])
    A = model.config.num_classes
    return np.stack([p.scores(t_index)[actor, :A] for p in preds])


def accuracy_at_k(model, episodes: Sequence[Episode], k_percent: float, t_index: int = -1) -> float:
    """Fraction of clips whose most confident prediction over the first K% frames is correct.

    ``model`` is a :class:`Model` or any callable ``(episode, n_frames) ->
    (n_frames, A) scores``.
    """
    if not episodes:
        raise ValueError("empty evaluation set")
    score_fn = model if callable(model) and not isinstance(model, Model) else (
        lambda ep, n: clip_scores(model, ep, n, t_index))
    correct = 0
    for ep in episodes:
        if ep.clip_label is None or ep.feature_seq is None:
            raise ValueError("accuracy@K needs single-actor clip episodes")
        n = frames_for_k(k_percent, ep.feature_seq.shape[1])
        s = np.asarray(score_fn(ep, n))
        frame, cls = np.unravel_index(int(np.argmax(s)), s.shape)
        correct += int(cls == ep.clip_label)
    return correct / len(episodes)


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    map_per_t: dict[int, float] = field(default_factory=dict)
    ap_per_class: dict[int, dict[int, float]] = field(default_factory=dict)
    accuracy_at_k: dict[float, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "metadata": self.metadata,
            "map_per_t": {str(t): v for t, v in self.map_per_t.items()},
            "ap_per_class": {str(t): {str(c): v for c, v in d.items()} for t, d in self.ap_per_class.items()},
            "accuracy_at_k": {str(k): v for k, v in self.accuracy_at_k.items()},
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        return cls(
            map_per_t={int(t): v for t, v in doc["map_per_t"].items()},
            ap_per_class={int(t): {int(c): v for c, v in d.items()} for t, d in doc["ap_per_class"].items()},
            accuracy_at_k={float(k): v for k, v in doc["accuracy_at_k"].items()},
            metadata=doc.get("metadata", {}),
        )

    def to_csv(self) -> str:
        """One row: metadata columns, then ``map_t{t}`` and ``acc_k{K}`` columns."""
        buf = io.StringIO()
        w = csv.writer(buf)
        meta_keys = [k for k in ("variant", "seed", "config_hash") if k in self.metadata]
        header = meta_keys + [f"map_t{t}" for t in self.map_per_t] + [f"acc_k{_fmt_k(k)}" for k in self.accuracy_at_k]
        w.writerow(header)
        w.writerow([self.metadata[k] for k in meta_keys] + [repr(v) for v in self.map_per_t.values()]
                   + [repr(v) for v in self.accuracy_at_k.values()])
        return buf.getvalue()


def _fmt_k(k: float) -> str:
    return str(int(k)) if float(k).is_integer() else str(k)


def evaluate(model: Model, episodes: Sequence[Episode], t_list: Iterable[int] | None = None,
             k_list: Iterable[float] | None = None, metadata: dict | None = None,
             preds: Sequence[Prediction] | None = None) -> EvalReport:
    report = EvalReport(metadata=dict(metadata or {}))
    if t_list is not None:
        t_list = list(t_list)
        if preds is None:
            preds = model.predict(episodes)
        for t in t_list:
            per_class, m = map_at_t(preds, episodes, t, num_classes=model.config.num_classes)
            report.map_per_t[t] = m
            report.ap_per_class[t] = per_class
    if k_list is not None:
        for k in k_list:
            report.accuracy_at_k[float(k)] = accuracy_at_k(model, episodes, k)
    return report


# ---------------------------------------------------------------- ablation

@dataclass
class AblationSettings:
    """Everything a (variant, seed) run needs besides the variant itself."""

    world: WorldConfig = field(default_factory=WorldConfig)
    n_train: int = 1200
    n_eval: int = 300
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        steps=1200, batch_size=16, schedule=Schedule(warmup_steps=100, cosine_steps=1100)))
    model_overrides: dict = field(default_factory=dict)
    k_list: tuple[float, ...] = (10, 20, 30, 40, 50)

    def model_config(self, variant: str, seed: int) -> ModelConfig:
        w = self.world
        d = dict(variant=variant, num_classes=w.num_classes, horizon=w.horizon, hidden=w.feature_dim,
                 init_seed=seed)
        d.update(self.model_overrides)
        return ModelConfig(**d)

    def to_dict(self) -> dict:
        return {"world": self.world.to_dict(), "n_train": self.n_train, "n_eval": self.n_eval,
                "train": self.train.to_dict(), "model_overrides": dict(self.model_overrides),
                "k_list": list(self.k_list)}

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def run_single(variant: str, seed: int, settings: AblationSettings) -> EvalReport:
    """Train one variant on the seed's data and evaluate it; divergence is recorded, not raised."""
    w = settings.world
    train_eps = generate_many(w, split_seeds(seed, "train", settings.n_train))
    eval_eps = generate_many(w, split_seeds(seed, "eval", settings.n_eval))
    model = Model(settings.model_config(variant, seed))
    tcfg = dataclasses.replace(settings.train, seed=seed)
    meta = {"variant": variant, "seed": seed, "config_hash": settings.config_hash()}
    started = time.perf_counter()
    try:
        losses = train(model, train_eps, tcfg)
    except DivergenceError as exc:
        meta.update(diverged=True, error=str(exc))
        return EvalReport(metadata=meta)
    meta.update(diverged=False, final_loss=float(np.mean(losses[-50:])),
                train_seconds=round(time.perf_counter() - started, 2))
    if w.mode == "single-actor-clip":
        return evaluate(model, eval_eps, k_list=settings.k_list, metadata=meta)
    return evaluate(model, eval_eps, t_list=range(w.horizon + 1), metadata=meta)


def _run_job(args):
    return run_single(*args)


@dataclass
class AblationResult:
    variants: list[str]
    seeds: list[int]
    reports: dict[str, dict[int, EvalReport]]

    def _metric_table(self, variant: str) -> np.ndarray:
        """(seeds, columns) of mAP per t or accuracy per K."""
        rows = []
        for s in self.seeds:
            r = self.reports[variant][s]
            vals = r.map_per_t if r.map_per_t else r.accuracy_at_k
            rows.append([vals[k] for k in sorted(vals)] if vals else [])
        width = max((len(r) for r in rows), default=0)
        return np.array([r if len(r) == width else [np.nan] * width for r in rows], dtype=np.float64)

    def columns(self) -> list:
        for v in self.variants:
            for s in self.seeds:
                r = self.reports[v][s]
                if r.map_per_t:
                    return sorted(r.map_per_t)
                if r.accuracy_at_k:
                    return sorted(r.accuracy_at_k)
        return []

    def seed_values(self, variant: str) -> np.ndarray:
        return self._metric_table(variant)

    def mean_grid(self) -> np.ndarray:
        """(variants, columns) seed-mean; diverged runs are excluded."""
        return np.stack([np.nanmean(self._metric_table(v), axis=0) for v in self.variants])

    def stderr_grid(self) -> np.ndarray:
        out = []
        for v in self.variants:
            tab = self._metric_table(v)
            n = np.sum(np.isfinite(tab), axis=0)
            out.append(np.nanstd(tab, axis=0, ddof=1) / np.sqrt(np.maximum(n, 1)))
        return np.stack(out)

    def grid_csv(self) -> str:
        cols = self.columns()
        kind = "t" if any(self.reports[self.variants[0]][s].map_per_t for s in self.seeds) else "k"
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["variant"] + [f"{kind}={_fmt_k(c)}" for c in cols] + ["n_seeds"])
        means = self.mean_grid()
        for v, row in zip(self.variants, means):
            n = int(np.sum(np.isfinite(self._metric_table(v)[:, 0]))) if cols else 0
            w.writerow([v] + [f"{x:.6f}" for x in row] + [n])
        return buf.getvalue()

    def class_ap(self, variant: str, t: int) -> dict[int, float]:
        """Seed-mean AP per class at ``t``."""
        acc: dict[int, list[float]] = {}
        for s in self.seeds:
            for c, ap in self.reports[variant][s].ap_per_class.get(t, {}).items():
                acc.setdefault(c, []).append(ap)
        return {c: float(np.mean(v)) for c, v in sorted(acc.items())}

    def horizon_delta(self, variant: str, t0: int = 0, t1: int = 1) -> dict[int, float]:
        """AP(t0) - AP(t1) per class: which actions are hardest to forecast."""
        a, b = self.class_ap(variant, t0), self.class_ap(variant, t1)
        return {c: a[c] - b[c] for c in a if c in b}

    def variant_delta(self, variant: str, baseline: str, t: int) -> dict[int, float]:
        """AP(variant) - AP(baseline) per class at ``t``."""
        a, b = self.class_ap(variant, t), self.class_ap(baseline, t)
        return {c: a[c] - b[c] for c in a if c in b}

    def delta_csv(self, deltas: dict[int, float], label: str) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["class", label])
        for c, v in sorted(deltas.items(), key=lambda kv: -kv[1]):
            w.writerow([c, f"{v:.6f}"])
        return buf.getvalue()


def run_ablation(variants: Sequence[str], settings: AblationSettings, seeds: Sequence[int],
                 workers: int | None = None, min_seeds: int = 3) -> AblationResult:
    """Train/evaluate every (variant, seed) pair on identical per-seed data."""
    if len(seeds) < min_seeds:
        raise ValueError(f"need at least {min_seeds} seeds, got {len(seeds)}")
    for v in variants:
        if v not in MODEL_VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    jobs = [(v, int(s), settings) for v in variants for s in seeds]
    if workers is None:
        workers = int(os.environ.get("DR2N_WORKERS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    reports: dict[str, dict[int, EvalReport]] = {v: {} for v in variants}
    for (v, s, _), r in zip(jobs, results):
        reports[v][s] = r
    return AblationResult(list(variants), [int(s) for s in seeds], reports)
