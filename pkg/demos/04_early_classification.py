"""Classify whole clips from their first K percent of frames and watch accuracy grow with K."""
from dr2n import Model, ModelConfig, Schedule, TrainConfig, accuracy_at_k, clip_world, generate_many, train
from dr2n.synthworld import split_seeds

world = clip_world()
train_eps = generate_many(world, split_seeds(0, "train", 1200))
eval_eps = generate_many(world, split_seeds(0, "eval", 300))
print(f"{len(train_eps)} training clips of {train_eps[0].feature_seq.shape[1]} frames, {world.num_classes} classes")

cfg = TrainConfig(steps=600, batch_size=16, schedule=Schedule(warmup_steps=100, cosine_steps=500))
for variant in ("gru", "dr2n"):
    model = Model(ModelConfig(variant=variant, num_classes=world.num_classes, horizon=world.horizon,
                              hidden=world.feature_dim))
    train(model, train_eps, cfg)
    accs = {k: accuracy_at_k(model, eval_eps, k) for k in (10, 20, 30, 40, 50)}
    print(f"{variant:5s} " + " ".join(f"K={k}%: {a:.3f}" for k, a in accs.items())
          + f"  (chance {1 / world.num_classes:.3f})")
