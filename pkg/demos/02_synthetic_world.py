"""Generate episodes from the synthetic Markov world and look at one of them."""
import numpy as np

from dr2n import WorldConfig, generate, generate_many

cfg = WorldConfig()
ep = generate(cfg, seed=7)
print(f"{ep.num_nodes} nodes, {ep.num_actors} actors, horizon {ep.horizon}, feature width {ep.features.shape[1]}")
for k, node in enumerate(ep.actor_nodes):
    print(f"actor {k} at node {node}: box {np.round(ep.gt_boxes[k], 3)}, labels over time {ep.labels[k].tolist()}")
print(f"distractor nodes: {np.flatnonzero(ep.distractor).tolist()}")

# The same seed always yields the same episode.
assert generate(cfg, seed=7).equals(ep)

# How often do labels change over the horizon? Proximity rules make this depend on neighbours.
eps = generate_many(cfg, range(500))
changed = np.mean([np.mean(e.labels[:, -1] != e.labels[:, 0]) for e in eps])
print(f"fraction of actors whose label changes by the last step: {changed:.3f}")
