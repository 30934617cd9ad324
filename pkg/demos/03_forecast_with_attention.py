"""Train a plain GRU and the relational model briefly, compare mAP over the horizon, inspect attention."""
from dr2n import Model, ModelConfig, Schedule, TrainConfig, WorldConfig, evaluate, generate_many, train
from dr2n.relational import top_k_edges
from dr2n.synthworld import split_seeds

world = WorldConfig()
train_eps = generate_many(world, split_seeds(0, "train", 600))
eval_eps = generate_many(world, split_seeds(0, "eval", 200))
cfg = TrainConfig(steps=400, batch_size=16, schedule=Schedule(warmup_steps=40, cosine_steps=360))
horizon = range(world.horizon + 1)

models = {}
for variant in ("gru", "dr2n"):
    model = Model(ModelConfig(variant=variant, num_classes=world.num_classes, horizon=world.horizon,
                              hidden=world.feature_dim))
    losses = train(model, train_eps, cfg)
    report = evaluate(model, eval_eps, t_list=horizon)
    models[variant] = model
    print(f"{variant:5s} final loss {losses[-1]:.3f}  mAP per step "
          + " ".join(f"t{t}={report.map_per_t[t]:.3f}" for t in horizon))

# Where does actor 0 of the first eval episode look during the rollout?
ep = eval_eps[0]
pred = models["dr2n"].predict([ep])[0]
node = int(ep.actor_nodes[0])
for step, alpha in enumerate(pred.attention, start=1):
    edges = top_k_edges(alpha, node, k=2, step=step)
    print(f"step {step}: node {node} attends to "
          + ", ".join(f"{e['j']} ({e['weight']:.2f}{', distractor' if ep.distractor[e['j']] else ''})" for e in edges))
