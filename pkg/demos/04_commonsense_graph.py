#!/usr/bin/env python3
"""Concept-graph loading, two-hop neighborhoods, and path aggregation."""

import numpy as np

from mwpgen.autodiff import Tensor
from mwpgen.dataset import sample_edges_path
from mwpgen.gat import edge_scores, gat_pretrain
from mwpgen.knowledge import (
    aggregate_paths,
    bfs_two_hop,
    build_path_vectors,
    load_graph,
)

graph = load_graph(sample_edges_path())
print(f"graph: {graph.num_nodes} nodes, {len(graph.edges)} edges, "
      f"relations {graph.relations}")

# the decoder conditions each step on the previous word's two-hop
# neighborhood; hops are ranked by edge weight with deterministic ties
bundle = bfs_two_hop(graph, "coin", first_cap=4, second_cap=4)
name = graph.node_names.__getitem__
print("first hop of 'coin': ", [name(n) for n, _ in bundle.first_hop])
print("second hop (via):    ",
      [f"{name(n)} (via {name(v)})" for n, v, _ in bundle.second_hop])

# pretrained node embeddings score the held edges higher than random pairs
emb = gat_pretrain(graph, layers=1, dim=16, heads=2, epochs=30, seed=0)
pos = [(h, t) for h, _, t, _ in graph.edges[:5]]
rng = np.random.default_rng(0)
neg = [(int(rng.integers(graph.num_nodes)), int(rng.integers(graph.num_nodes)))
       for _ in range(5)]
print("edge scores, real pairs:  ", np.round(edge_scores(emb, pos), 3))
print("edge scores, random pairs:", np.round(edge_scores(emb, neg), 3))

# path vectors for the bundle, pooled by attention into one state update
d = emb.shape[1]
prng = np.random.default_rng(1)
params = {
    "W_g": Tensor(prng.normal(0, 0.5, (2 * d, d))),
    "b_g": Tensor(np.zeros((1, d))),
    "U": Tensor(prng.normal(0, 0.5, (d, d))),
    "W_b": Tensor(prng.normal(0, 0.5, (d, d))),
}
table = {i: Tensor(emb[i].reshape(1, -1)) for i in range(graph.num_nodes)}
vectors = build_path_vectors(bundle, table, params)
g, nonempty = aggregate_paths(table[bundle.source], vectors, params)
print("aggregated path state:", g.data.shape, "nonempty:", nonempty)
