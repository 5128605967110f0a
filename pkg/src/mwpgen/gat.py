"""Graph-attention pretraining of concept node embeddings.

Two multi-head attention layers propagate messages over the (undirected)
concept graph, with relation embeddings as edge features in the attention
scores. Training is self-supervised link prediction: true edges must
score above tail-corrupted negatives. Nodes with no neighbors pass
through the layers untouched, so an isolated node keeps its initial
embedding.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    NonFiniteError,
    Tape,
    Tensor,
    concat,
    embedding,
    log,
    matmul,
    mul,
    reduce_sum,
    sigmoid,
    softmax,
    tanh,
    tile_rows,
    transpose,
)

EPS = 1e-12


class GatError(RuntimeError):
    pass


def _neighbor_index(graph):
    """node -> sorted [(neighbor, relation id)], both edge directions."""
    idx = {i: set() for i in range(graph.num_nodes)}
    for h, r, t, _ in graph.edges:
        if h != t:
            idx[h].add((t, r))
            idx[t].add((h, r))
    return {i: sorted(pairs) for i, pairs in idx.items()}


class _Gat:
    def __init__(self, graph, dim, layers, heads, rng):
        if dim % heads:
            raise GatError(f"dim {dim} not divisible by {heads} heads")
        self.graph = graph
        self.dim = dim
        self.layers = layers
        self.heads = heads
        self.head_dim = dim // heads
        self.neighbors = _neighbor_index(graph)
        self.self_rel = len(graph.relations)  # extra relation row for self-loops
        self.params = {}
        self._init(rng)

    def _init(self, rng):
        def add(name, shape, scale=None):
            fan = shape[0]
            data = rng.normal(0.0, 0.1, shape) if scale == "emb" \
                else rng.uniform(-1.0 / np.sqrt(fan), 1.0 / np.sqrt(fan), shape)
            self.params[name] = Tensor(data, requires_grad=True, name=name)

        add("gat.X", (self.graph.num_nodes, self.dim), "emb")
        add("gat.rel", (self.self_rel + 1, self.dim), "emb")
        for layer in range(self.layers):
            for head in range(self.heads):
                tag = f"gat.l{layer}.h{head}"
                add(f"{tag}.W", (self.dim, self.head_dim))
                add(f"{tag}.Wr", (self.dim, self.head_dim))
                add(f"{tag}.a", (3 * self.head_dim, 1))

    def forward(self):
        """Run the attention layers; returns the (N, dim) output tensor."""
        x = self.params["gat.X"]
        for layer in range(self.layers):
            rows = []
            for i in range(self.graph.num_nodes):
                nbrs = self.neighbors[i]
                if not nbrs:
                    rows.append(embedding(x, [i]))
                    continue
                idx = [j for j, _ in nbrs] + [i]
                rels = [r for _, r in nbrs] + [self.self_rel]
                heads_out = []
                for head in range(self.heads):
                    tag = f"gat.l{layer}.h{head}"
                    w, wr, a = (self.params[f"{tag}.{n}"] for n in ("W", "Wr", "a"))
                    keys = matmul(embedding(x, idx), w)
                    rel_f = matmul(embedding(self.params["gat.rel"], rels), wr)
                    query = tile_rows(matmul(embedding(x, [i]), w), len(idx))
                    scores = tanh(matmul(concat([query, keys, rel_f], axis=1), a))
                    att = softmax(transpose(scores))
                    heads_out.append(tanh(matmul(att, keys)))
                rows.append(concat(heads_out, axis=1))
            x = concat(rows, axis=0)
        return x

    def link_loss(self, emb, pos_pairs, neg_pairs):
        """Binary cross-entropy on dot-product edge scores."""
        def score(pairs):
            heads = embedding(emb, [h for h, _ in pairs])
            tails = embedding(emb, [t for _, t in pairs])
            return sigmoid(reduce_sum(mul(heads, tails), axis=1, keepdims=True))

        p_pos = score(pos_pairs)
        p_neg = score(neg_pairs)
        loss_pos = -reduce_sum(log(p_pos + EPS)) * (1.0 / len(pos_pairs))
        loss_neg = -reduce_sum(log(((-p_neg) + 1.0) + EPS)) * (1.0 / len(neg_pairs))
        return loss_pos + loss_neg


def gat_pretrain(graph, layers=2, dim=256, heads=2, epochs=50, lr=0.01,
                 seed=0, edges_per_epoch=None):
    """Pretrain node embeddings; returns an (N, dim) float64 array.

    Negative edges corrupt the tail with a random non-isolated node.
    Divergence (non-finite loss) aborts with the failing epoch.
    """
    from .training import Adam  # deferred: training also hosts the optimizer

    if not graph.edges:
        raise GatError("cannot pretrain on an empty graph")
    rng = np.random.default_rng(seed)
    net = _Gat(graph, dim, layers, heads, rng)
    opt = Adam(net.params, learning_rate=lr)

    pos_all = sorted({(h, t) for h, _, t, _ in graph.edges if h != t})
    if not pos_all:
        raise GatError("graph has only self-loops")
    candidates = sorted({n for pair in pos_all for n in pair})

    for epoch in range(epochs):
        if edges_per_epoch and len(pos_all) > edges_per_epoch:
            chosen = rng.choice(len(pos_all), size=edges_per_epoch, replace=False)
            pos = [pos_all[int(i)] for i in chosen]
        else:
            pos = pos_all
        neg = []
        existing = set(pos_all)
        for h, t in pos:
            for _ in range(20):
                cand = candidates[int(rng.integers(len(candidates)))]
                if cand != t and (h, cand) not in existing and (cand, h) not in existing:
                    neg.append((h, cand))
                    break
            else:
                neg.append((h, t))  # dense toy graph: fall back to a repeat
        try:
            with Tape() as tape:
                emb = net.forward()
                loss = net.link_loss(emb, pos, neg)
            tape.backward(loss)
        except NonFiniteError as exc:
            raise GatError(f"training diverged at epoch {epoch}: {exc}") from None
        opt.step(net.params)
        for p in net.params.values():
            p.grad = None

    from .autodiff import no_grad
    with no_grad():
        final = net.forward()
    return final.data.copy()


def edge_scores(embeddings, pairs):
    """Sigmoid dot-product link scores for (head, tail) id pairs."""
    emb = np.asarray(embeddings)
    out = []
    for h, t in pairs:
        s = float(emb[h] @ emb[t])
        out.append(1.0 / (1.0 + np.exp(-s)) if s >= 0 else np.exp(s) / (1.0 + np.exp(s)))
    return out
