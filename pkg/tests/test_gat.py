"""Node-embedding pretraining tests: shapes, isolation, determinism, link AUC."""

import numpy as np
import pytest

from mwpgen.gat import GatError, edge_scores, gat_pretrain
from mwpgen.knowledge import ConceptGraph


def make_graph(num_nodes, edges):
    names = [f"n{i}" for i in range(num_nodes)]
    return ConceptGraph(
        nodes={name: i for i, name in enumerate(names)},
        node_names=names,
        relations=["RelatedTo"],
        edges=[(h, 0, t, w) for h, t, w in edges],
    )


def auc(pos_scores, neg_scores):
    wins = ties = 0
    for p in pos_scores:
        for n in neg_scores:
            if p > n:
                wins += 1
            elif p == n:
                ties += 1
    return (wins + 0.5 * ties) / (len(pos_scores) * len(neg_scores))


def two_cluster_graph(per_cluster=8, holdout_per_cluster=3, seed=4):
    """Dense intra-cluster edges with a few held out for evaluation."""
    rng = np.random.default_rng(seed)
    n = 2 * per_cluster
    intra = []
    for base in (0, per_cluster):
        members = range(base, base + per_cluster)
        intra += [(i, j) for i in members for j in members if i < j]
    rng.shuffle(intra)
    held = intra[: 2 * holdout_per_cluster]
    train = intra[2 * holdout_per_cluster:]
    cross = [(i, j) for i in range(per_cluster) for j in range(per_cluster, n)]
    negatives = [cross[int(k)] for k in rng.choice(len(cross), 20, replace=False)]
    graph = make_graph(n, [(h, t, 1.0) for h, t in train])
    return graph, held, negatives


class TestPretrain:
    def test_output_shape_and_dtype(self):
        g = make_graph(4, [(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)])
        emb = gat_pretrain(g, layers=1, dim=8, heads=2, epochs=2, seed=0)
        assert emb.shape == (4, 8)
        assert emb.dtype == np.float64
        assert np.all(np.isfinite(emb))

    def test_deterministic(self):
        g = make_graph(4, [(0, 1, 1.0), (1, 2, 1.0)])
        a = gat_pretrain(g, layers=1, dim=8, heads=2, epochs=3, seed=7)
        b = gat_pretrain(g, layers=1, dim=8, heads=2, epochs=3, seed=7)
        assert np.array_equal(a, b)

    def test_isolated_node_keeps_initial_embedding(self):
        # node 3 has no edges: it passes through every layer untouched and
        # receives no gradient, so training cannot move it
        g = make_graph(4, [(0, 1, 1.0), (1, 2, 1.0)])
        init = gat_pretrain(g, layers=2, dim=8, heads=2, epochs=0, seed=3)
        trained = gat_pretrain(g, layers=2, dim=8, heads=2, epochs=4, seed=3)
        assert np.array_equal(init[3], trained[3])
        assert not np.array_equal(init[0], trained[0])

    def test_dim_heads_divisibility(self):
        g = make_graph(2, [(0, 1, 1.0)])
        with pytest.raises(GatError):
            gat_pretrain(g, dim=5, heads=2, epochs=1)

    def test_empty_graph_rejected(self):
        g = make_graph(2, [])
        with pytest.raises(GatError):
            gat_pretrain(g, dim=4, heads=1, epochs=1)

    def test_self_loops_only_rejected(self):
        g = make_graph(2, [(0, 0, 1.0), (1, 1, 1.0)])
        with pytest.raises(GatError):
            gat_pretrain(g, dim=4, heads=1, epochs=1)

    def test_edge_subsampling_path(self):
        g = make_graph(5, [(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (3, 4, 1.0)])
        emb = gat_pretrain(g, layers=1, dim=4, heads=1, epochs=2, seed=0,
                           edges_per_epoch=2)
        assert emb.shape == (5, 4)

    def test_heldout_link_auc(self):
        graph, held, negatives = two_cluster_graph()
        emb = gat_pretrain(graph, layers=2, dim=16, heads=2, epochs=60, seed=0)
        pos_scores = edge_scores(emb, held)
        neg_scores = edge_scores(emb, negatives)
        assert auc(pos_scores, neg_scores) >= 0.9


class TestEdgeScores:
    def test_hand_value(self):
        emb = np.array([[1.0, 0.0], [2.0, 0.0]])
        got = edge_scores(emb, [(0, 1)])
        assert got[0] == pytest.approx(1.0 / (1.0 + np.exp(-2.0)), abs=1e-15)

    def test_extreme_dot_products_stable(self):
        emb = np.array([[1e4, 0.0], [1e4, 0.0], [-1e4, 0.0]])
        with np.errstate(over="raise"):
            scores = edge_scores(emb, [(0, 1), (0, 2)])
        assert scores[0] == 1.0
        assert scores[1] == pytest.approx(0.0, abs=1e-300)
        assert all(0.0 <= s <= 1.0 for s in scores)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        emb = rng.normal(size=(3, 4))
        assert edge_scores(emb, [(0, 2)]) == edge_scores(emb, [(2, 0)])
