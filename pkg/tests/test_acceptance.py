"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 7-9 train every variant over five seeds and take roughly a quarter
of an hour on one CPU core. Run just this gate with

    pytest tests/test_acceptance.py -v -s
"""
import sys
import time

import numpy as np
import pytest

from dr2n import diffcore as dc
from dr2n.diffcore import ParamStore, Tensor
from dr2n.model import MODEL_VARIANTS, Model, ModelConfig, beta_schedule, load_checkpoint
from dr2n.relational import NodeSet, RelationalLayer, admissible_mask, attention_weights, node_update
from dr2n.synthworld import WorldConfig, clip_world, generate, generate_many, high_distractor_world, read_jsonl, write_jsonl
from dr2n.traineval import (
    AblationSettings, Schedule, TrainConfig, accuracy_at_k, map_at_t, run_ablation, train,
)

from conftest import check_grads
from oracles import brute_force_map, hand_accuracy_at_k, random_map_instance

RESULTS: dict[int, str] = {}
SEEDS = [0, 1, 2, 3, 4]


def record(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {title}: {detail}"
    RESULTS[n] = line
    print(line, file=sys.stderr)
    assert ok, line


# ---------------------------------------------------------------- 1

def _op_losses(rng):
    a = Tensor(rng.normal(size=(3, 4)) * 2, requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    m = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    bias = Tensor(rng.normal(size=4), requires_grad=True)
    w = rng.normal(size=(3, 4))
    mask = rng.random((3, 4)) < 0.7
    mask[:, 0] = True
    tgt = rng.integers(0, 4, size=3)
    wts = rng.random(3)
    cases = {
        "matmul": lambda: dc.sum(dc.tanh(a @ m)),
        "concat": lambda: dc.sum(dc.concat(a, b, axis=1) * np.hstack([w, w])),
        "add": lambda: dc.sum(dc.add(a, b) * w),
        "sub": lambda: dc.sum(dc.sub(a, b) * w),
        "mul": lambda: dc.sum(dc.mul(a, b) * w),
        "scale": lambda: dc.sum(dc.scale(a, 0.3) * w),
        "add_bias": lambda: dc.sum(dc.add_bias(a, bias) * w),
        "sigmoid": lambda: dc.sum(dc.sigmoid(a) * w),
        "tanh": lambda: dc.sum(dc.tanh(a) * w),
        "relu": lambda: dc.sum(dc.relu(a) * w),
        "mean": lambda: dc.mean(dc.mul(a, b)),
        "reshape": lambda: dc.sum(dc.reshape(a, (4, 3)) * w.reshape(4, 3)),
        "getitem": lambda: dc.sum(a[1:, ::2] * w[1:, ::2]),
        "pairwise_add": lambda: dc.sum(dc.tanh(dc.pairwise_add(a, b))),
        "smooth_l1": lambda: dc.sum(dc.smooth_l1(a, b) * w),
        "softmax": lambda: dc.sum(dc.softmax(a, mask) * w),
        "softmax_ce": lambda: dc.softmax_cross_entropy(a, tgt, wts),
        "sigmoid_ce": lambda: dc.sigmoid_cross_entropy(a, np.eye(4)[tgt], wts),
    }
    return cases, [a, b, m, bias]


def test_criterion_01_gradient_integrity():
    world = WorldConfig(num_classes=4, feature_dim=8, horizon=2, n_true=(2, 2), n_fake=(1, 1))
    worst_op, worst_model = 0.0, 0.0
    started = time.perf_counter()
    failures = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cases, tensors = _op_losses(rng)
        for name, fn in cases.items():
            try:
                worst_op = max(worst_op, check_grads(fn, tensors, tol=1e-4))
            except AssertionError as exc:
                failures.append(f"{name}/seed {seed}: {exc}")
        model = Model(ModelConfig(variant="dr2n", num_classes=4, horizon=2, hidden=8, init_seed=seed))
        for _, p in model.params.items():
            p.values = p.values + rng.normal(scale=0.2, size=p.shape)
        ep = [generate(world, seed)]
        assert ep[0].num_nodes == 3
        try:
            worst_model = max(worst_model, check_grads(lambda: model.episode_loss(ep),
                                                       [p for _, p in model.params.items()], tol=1e-4))
        except AssertionError as exc:
            failures.append(f"dr2n loss/seed {seed}: {exc}")
    elapsed = time.perf_counter() - started
    ok = not failures and elapsed < 60
    record(1, "gradient integrity", ok,
           f"20 seeds, worst rel. err ops {worst_op:.1e}, end-to-end {worst_model:.1e} (tol 1e-4), "
           f"{elapsed:.1f}s (< 60s){'; ' + failures[0] if failures else ''}")


# ---------------------------------------------------------------- 2

def test_criterion_02_attention_invariants():
    worst_row, worst_perm, worst_shift = 0.0, 0.0, 0.0
    mask_exact = True
    for trial in range(60):
        rng = np.random.default_rng(1000 + trial)
        variant = ("dr2n", "rn", "gat")[trial % 3]
        store = ParamStore(seed=trial)
        layer = RelationalLayer(store, variant, 6)
        for _, p in store.items():
            p.values = p.values + rng.normal(scale=0.3, size=p.shape)
        n = int(rng.integers(2, 9))
        H = rng.normal(size=(n, 6))
        mask = rng.random(n) < 0.8
        mask[:2] = True
        out, attn = layer(NodeSet(H, mask))
        alpha = attn.alpha.values
        rows = attn.admissible.any(axis=1)
        worst_row = max(worst_row, np.abs(alpha[rows].sum(axis=1) - 1).max())
        mask_exact &= bool(np.all(alpha[~attn.admissible] == 0))
        # padded nodes must be invisible to real ones, bit for bit
        junk = H.copy()
        junk[~mask] = rng.normal(scale=100, size=((~mask).sum(), 6))
        out2, _ = layer(NodeSet(junk, mask))
        mask_exact &= bool(np.array_equal(out.values[mask], out2.values[mask]))
        real = np.flatnonzero(mask)
        sub_out, _ = layer(NodeSet(H[real], np.ones(real.size, bool)))
        mask_exact &= bool(np.array_equal(sub_out.values, out.values[real]))
        perm = rng.permutation(n)
        out_p, attn_p = layer(NodeSet(H[perm], mask[perm]))
        worst_perm = max(worst_perm, np.abs(out_p.values - out.values[perm]).max(),
                         np.abs(attn_p.alpha.values - alpha[np.ix_(perm, perm)]).max())
        x = rng.normal(size=n) * 10
        m = rng.random(n) < 0.7
        m[0] = True
        c = rng.normal() * 100
        worst_shift = max(worst_shift, np.abs(dc.softmax(x + c, m).values - dc.softmax(x, m).values).max())
    ok = worst_row < 1e-12 and mask_exact and worst_perm < 1e-10 and worst_shift < 1e-12
    record(2, "attention invariants", ok,
           f"60 random NodeSets: |row sum - 1| {worst_row:.1e} (<1e-12), mask exact={mask_exact}, "
           f"permutation {worst_perm:.1e} (<1e-10), softmax shift {worst_shift:.1e}")


# ---------------------------------------------------------------- 3

def test_criterion_03_variant_semantics():
    rng = np.random.default_rng(3)
    rn_exact = True
    for n in range(2, 9):
        a = attention_weights(None, np.ones(n, bool), "rn").alpha.values
        off = ~np.eye(n, dtype=bool)
        rn_exact &= bool(np.all(a[off] == 1.0 / (n - 1)) and np.all(np.diag(a) == 0))
    store = ParamStore(seed=2)
    gat = RelationalLayer(store, "gat", 6)
    H = rng.normal(size=(5, 6))
    z = Tensor(rng.normal(size=(5, 6)))
    base = node_update(NodeSet(H, np.ones(5, bool)), z, "gat", gat.w_node, gat.b_node).values
    H2 = H + rng.normal(size=H.shape)
    moved = node_update(NodeSet(H2, np.ones(5, bool)), z, "gat", gat.w_node, gat.b_node).values
    gat_inv = bool(np.array_equal(base, moved))
    assert admissible_mask(np.ones(3, bool), include_self=True).all()

    world = WorldConfig(num_classes=5, feature_dim=8, horizon=4)
    gru = Model(ModelConfig(variant="gru", num_classes=5, horizon=4, hidden=8, node_activation="identity"))
    dr2n = Model(ModelConfig(variant="dr2n", num_classes=5, horizon=4, hidden=8, node_activation="identity"))
    for name, p in gru.params.items():
        p.values = p.values + rng.normal(scale=0.3, size=p.shape)
        dr2n.params[name].values = p.values.copy()
    dr2n.params["rel.node.w"].values = np.vstack([np.eye(8), np.zeros((8, 8))])
    dr2n.params["rel.node.b"].values[:] = 0
    dr2n.relational.detach_attention = True
    eps = generate_many(world, range(20))
    nest = max(np.abs(a.logits - b.logits).max() for a, b in zip(gru.predict(eps), dr2n.predict(eps)))
    ok = rn_exact and gat_inv and nest < 1e-10
    record(3, "variant semantics", ok,
           f"RN exactly 1/(n-1)={rn_exact}, GAT invariant to h_i={gat_inv}, "
           f"pass-through DR2N vs GRU max diff {nest:.1e} (<1e-10)")


# ---------------------------------------------------------------- 4

def test_criterion_04_no_teacher_forcing():
    world = WorldConfig(num_classes=5, feature_dim=8, horizon=3)
    eps = generate_many(world, range(10))
    identical = True
    rng = np.random.default_rng(4)
    for variant in MODEL_VARIANTS:
        m = Model(ModelConfig(variant=variant, num_classes=5, horizon=3, hidden=8))
        for _, p in m.params.items():
            p.values = p.values + rng.normal(scale=0.3, size=p.shape)
        before = m.predict(eps)
        for ep in eps:
            ep.labels = rng.integers(0, 5, size=ep.labels.shape)
        after = m.predict(eps)
        identical &= all(a.logits.tobytes() == b.logits.tobytes() and a.boxes.tobytes() == b.boxes.tobytes()
                         for a, b in zip(before, after))
    record(4, "no teacher forcing", identical,
           f"future labels scrambled, predictions bit-identical for all {len(MODEL_VARIANTS)} variants: {identical}")


# ---------------------------------------------------------------- 5

def test_criterion_05_schedule_fidelity():
    s = Schedule()
    vals = (s.lr(0), s.lr(s.warmup_steps), s.lr(s.warmup_steps + s.cosine_steps))
    betas = beta_schedule(5)
    ok = (abs(vals[0] - 0.008) < 1e-12 and abs(vals[1] - 0.08) < 1e-12 and abs(vals[2]) < 1e-12
          and np.allclose(betas, [1.0, 0.9, 0.8, 0.7, 0.6, 0.5], atol=1e-12, rtol=0))
    record(5, "schedule fidelity", ok,
           f"lr(0)={vals[0]!r}, lr(T_w)={vals[1]!r}, lr(T_w+T_c)={vals[2]:.1e}, "
           f"beta={[round(b, 12) for b in betas]}")


# ---------------------------------------------------------------- 6

def test_criterion_06_metric_correctness():
    worst = 0.0
    for seed in range(20):
        eps, preds = random_map_instance(seed)
        assert sum(p.num_nodes for p in preds) <= 10
        for t in range(3):
            per_class, m = map_at_t(preds, eps, t, num_classes=3)
            oracle, oracle_m = brute_force_map(preds, eps, t, 3)
            assert per_class.keys() == oracle.keys()
            worst = max([worst, abs(m - oracle_m)] + [abs(per_class[c] - oracle[c]) for c in oracle])
    clips = generate_many(clip_world(feature_dim=8), range(10))
    model = Model(ModelConfig(variant="dr2n", num_classes=8, horizon=1, hidden=8, init_seed=6))
    rng = np.random.default_rng(6)
    for _, p in model.params.items():
        p.values = p.values + rng.normal(scale=0.5, size=p.shape)
    acc_match = all(accuracy_at_k(model, clips, k) == hand_accuracy_at_k(model, clips, k)
                    for k in (10, 20, 30, 40, 50, 100))
    ok = worst < 1e-9 and acc_match
    record(6, "metric correctness", ok,
           f"mAP vs all-cutoffs oracle on 20 instances: max diff {worst:.1e} (<1e-9); "
           f"accuracy@K equals hand loop: {acc_match}")


# ---------------------------------------------------------------- 7, 8

@pytest.fixture(scope="module")
def ablation():
    settings = AblationSettings(world=high_distractor_world())
    started = time.perf_counter()
    result = run_ablation(list(MODEL_VARIANTS), settings, SEEDS)
    elapsed = time.perf_counter() - started
    print("\n" + result.grid_csv(), file=sys.stderr)
    return result, elapsed


def _mean_t1_to_T(result, variant):
    return np.nanmean(result.seed_values(variant)[:, 1:], axis=1)


def test_criterion_07_ablation_ordering(ablation):
    result, elapsed = ablation
    per_seed = {v: _mean_t1_to_T(result, v) for v in ("dr2n", "rn", "gru")}
    means = {v: float(np.mean(x)) for v, x in per_seed.items()}
    diff = per_seed["dr2n"] - per_seed["rn"]
    gap = float(np.mean(diff))
    n = len(SEEDS)
    se_paired = float(np.std(diff, ddof=1) / np.sqrt(n))
    se_unpaired = float(np.sqrt(np.var(per_seed["dr2n"], ddof=1) / n + np.var(per_seed["rn"], ddof=1) / n))
    ok = (means["dr2n"] > means["rn"] and means["dr2n"] > means["gru"]
          and gap > max(se_paired, se_unpaired) and elapsed < 30 * 60)
    record(7, "ablation ordering", ok,
           f"mean mAP t=1..5 over {n} seeds: DR2N {means['dr2n']:.4f}, RN {means['rn']:.4f}, GRU {means['gru']:.4f}; "
           f"DR2N-RN gap {gap:.4f} > SE (paired {se_paired:.4f}, unpaired {se_unpaired:.4f}); "
           f"grid of {len(MODEL_VARIANTS)} variants took {elapsed / 60:.1f} min (< 30)")


def test_criterion_08_horizon_decay(ablation):
    result, _ = ablation
    grid = result.mean_grid()
    T = grid.shape[1] - 1
    drops = {v: (grid[i, 0], grid[i, T]) for i, v in enumerate(result.variants)}
    ok = all(a >= b for a, b in drops.values())
    record(8, "horizon decay", ok,
           "seed-mean mAP t=0 -> t=%d: " % T + ", ".join(f"{v} {a:.3f}->{b:.3f}" for v, (a, b) in drops.items()))


# ---------------------------------------------------------------- 9

def test_criterion_09_early_classification():
    settings = AblationSettings(world=clip_world(), n_train=1200, n_eval=300,
                                train=TrainConfig(steps=600, batch_size=16, schedule=Schedule(100, 500)),
                                k_list=(10, 20, 30, 40, 50))
    result = run_ablation(["gru", "gat", "dr2n"], settings, SEEDS)
    print("\n" + result.grid_csv(), file=sys.stderr)
    grid = dict(zip(result.variants, result.mean_grid()))
    monotone = {v: bool(np.all(np.diff(row) >= 0)) for v, row in grid.items()}
    ok = all(monotone.values()) and grid["dr2n"][0] >= grid["gru"][0]
    record(9, "early classification", ok,
           f"accuracy@10%: DR2N {grid['dr2n'][0]:.3f} vs GRU {grid['gru'][0]:.3f} (GAT {grid['gat'][0]:.3f}); "
           f"non-decreasing in K: {monotone}")


# ---------------------------------------------------------------- 10

def test_criterion_10_determinism_and_round_trips(tmp_path):
    world = WorldConfig(num_classes=5, feature_dim=8, horizon=3)
    eps = generate_many(world, range(60))
    cfg = TrainConfig(steps=25, batch_size=8, seed=3, schedule=Schedule(5, 20))
    runs = []
    for _ in range(2):
        m = Model(ModelConfig(variant="dr2n", num_classes=5, horizon=3, hidden=8, init_seed=3))
        runs.append((train(m, eps, cfg), m))
    same_losses = runs[0][0] == runs[1][0]
    m = runs[0][1]
    m.save(tmp_path / "ck.json")
    loaded, _ = load_checkpoint(tmp_path / "ck.json")
    ck_exact = all(loaded.params[n].values.tobytes() == p.values.tobytes() for n, p in m.params.items())
    write_jsonl(tmp_path / "d.jsonl", eps)
    data_exact = all(a.equals(b) for a, b in zip(eps, read_jsonl(tmp_path / "d.jsonl")))
    regen_exact = all(a.equals(b) for a, b in zip(eps, generate_many(world, range(60))))
    ok = same_losses and ck_exact and data_exact and regen_exact
    record(10, "determinism and round-trips", ok,
           f"loss curves bit-identical={same_losses}, checkpoint lossless={ck_exact}, "
           f"dataset lossless={data_exact}, regeneration identical={regen_exact}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
