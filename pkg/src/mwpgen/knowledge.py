"""Concept graph: edge-list loading, two-hop BFS bundles, path encoders.

The graph is a ConceptNet-style edge list (head, relation, tail, weight).
BFS treats edges as undirected. Path representations and their attention
aggregation are differentiable and operate on autodiff tensors with row
vector convention (vectors are 1 x d).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, matmul, reduce_sum, sigmoid, softmax, tanh, transpose

MAX_RELATIONS = 34
FIRST_HOP_CAP = 32
SECOND_HOP_CAP = 64
DEFAULT_ALPHA = 0.7


class GraphError(ValueError):
    pass


@dataclass
class ConceptGraph:
    """Deduplicated undirected concept graph with weighted typed edges."""

    nodes: dict              # concept -> node id
    node_names: list         # node id -> concept
    relations: list          # relation id -> name
    edges: list              # (head id, relation id, tail id, weight)
    adjacency: dict = field(default_factory=dict)  # node id -> {other id: weight}
    skipped_malformed: int = 0
    skipped_relations: int = 0

    def __post_init__(self):
        if not self.adjacency:
            adj = {i: {} for i in range(len(self.node_names))}
            for h, _, t, w in self.edges:
                if t != h:
                    adj[h][t] = max(adj[h].get(t, 0.0), w)
                    adj[t][h] = max(adj[t].get(h, 0.0), w)
            self.adjacency = adj

    @property
    def num_nodes(self):
        return len(self.node_names)

    def node_id(self, concept):
        return self.nodes.get(concept)

    def neighbors(self, node_id):
        """(neighbor id, weight) pairs in ascending id order."""
        return sorted(self.adjacency.get(node_id, {}).items())


def load_graph(path, vocab=None, max_relations=MAX_RELATIONS, allow_new_relations=False):
    """Read a TSV edge file (head, relation, tail, weight per line).

    When vocab is given, only edges touching at least one in-vocabulary
    concept are kept; the other endpoint survives as a neighbor node.
    Duplicate (head, relation, tail) rows collapse to their max weight.
    Rows that would push the relation vocabulary past max_relations are
    rejected and counted unless allow_new_relations is set.
    """
    nodes = {}
    node_names = []
    relations = []
    rel_ids = {}
    edge_weights = {}
    malformed = 0
    rejected_rel = 0

    def intern(concept):
        if concept not in nodes:
            nodes[concept] = len(node_names)
            node_names.append(concept)
        return nodes[concept]

    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise GraphError(f"cannot read {path}: {exc}") from None
    with fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                malformed += 1
                continue
            head, rel, tail, weight_text = (p.strip() for p in parts)
            try:
                weight = float(weight_text)
            except ValueError:
                malformed += 1
                continue
            if not head or not rel or not tail or not np.isfinite(weight):
                malformed += 1
                continue
            if vocab is not None and head not in vocab and tail not in vocab:
                continue
            if rel not in rel_ids:
                if len(relations) >= max_relations and not allow_new_relations:
                    rejected_rel += 1
                    continue
                rel_ids[rel] = len(relations)
                relations.append(rel)
            key = (intern(head), rel_ids[rel], intern(tail))
            edge_weights[key] = max(edge_weights.get(key, weight), weight)

    edges = [(h, r, t, edge_weights[(h, r, t)]) for (h, r, t) in edge_weights]
    if not edges:
        raise GraphError(f"no usable edges in {path}")
    return ConceptGraph(
        nodes=nodes,
        node_names=node_names,
        relations=relations,
        edges=edges,
        skipped_malformed=malformed,
        skipped_relations=rejected_rel,
    )


@dataclass
class PathBundle:
    """Two-hop neighborhood of a source node.

    first_hop holds (neighbor id, path vector or None); second_hop holds
    (neighbor id, via id, path vector or None). Vectors are filled in by
    build_path_vectors; the bare structure comes from bfs_two_hop.
    """

    source: int
    first_hop: list = field(default_factory=list)
    second_hop: list = field(default_factory=list)

    def is_empty(self):
        return not self.first_hop and not self.second_hop


EMPTY_BUNDLE = PathBundle(source=-1)


def bfs_two_hop(graph, word_or_id, first_cap=FIRST_HOP_CAP, second_cap=SECOND_HOP_CAP):
    """Two-hop BFS neighborhood of a word, as a PathBundle without vectors.

    First hop keeps the first_cap heaviest neighbors (ties toward lower
    id). Second hop nodes exclude the source and all direct neighbors;
    each one's via node is the lowest-id kept first-hop neighbor it is
    adjacent to (BFS visits the first hop in id order), and the hop is
    ranked by the via edge weight then id, keeping second_cap.
    """
    if isinstance(word_or_id, str):
        source = graph.node_id(word_or_id)
        if source is None:
            return PathBundle(source=-1)
    else:
        source = int(word_or_id)
        if not 0 <= source < graph.num_nodes:
            return PathBundle(source=-1)

    direct = graph.adjacency.get(source, {})
    if not direct:
        return PathBundle(source=source)
    kept_first = sorted(direct, key=lambda n: (-direct[n], n))[:first_cap]

    via_of = {}
    weight_of = {}
    for n1 in sorted(kept_first):
        for n2, w in graph.neighbors(n1):
            if n2 == source or n2 in direct or n2 in via_of:
                continue
            via_of[n2] = n1
            weight_of[n2] = w
    kept_second = sorted(via_of, key=lambda n: (-weight_of[n], n))[:second_cap]

    return PathBundle(
        source=source,
        first_hop=[(n, None) for n in sorted(kept_first)],
        second_hop=[(n, via_of[n], None) for n in kept_second],
    )


def path_repr(e_i, e_j, params):
    """Direct path vector tanh(W_g [e_i; e_j] + b_g). Inputs are 1 x d."""
    if e_i.data.shape != e_j.data.shape:
        raise GraphError("path endpoints must share dimension")
    return tanh(matmul(concat([e_i, e_j], axis=1), params["W_g"]) + params["b_g"])


def two_hop_repr(e_ik, e_kj, e_i, e_j, params, alpha=DEFAULT_ALPHA):
    """Blend the direct path vector with the composed two-segment one.

    alpha * tanh(W_g [e_i;e_j] + b_g) + (1 - alpha) * sigmoid(e_ik * (e_kj U)).
    """
    if not 0.0 <= alpha <= 1.0:
        raise GraphError("alpha must lie in [0, 1]")
    direct = path_repr(e_i, e_j, params)
    composed = sigmoid(e_ik * matmul(e_kj, params["U"]))
    return direct * float(alpha) + composed * float(1.0 - alpha)


def aggregate_paths(e_source, path_vectors, params):
    """Attention-pool a bundle's path vectors against the source embedding.

    Returns (g, True) with g = sum_j beta_j v_j, beta = softmax of the
    bilinear scores e_source W_b v_j; or (zero vector, False) for an
    empty bundle.
    """
    if not path_vectors:
        d = e_source.data.shape[1]
        return Tensor(np.zeros((1, d))), False
    mat = concat(path_vectors, axis=0) if len(path_vectors) > 1 else path_vectors[0]
    query = matmul(e_source, params["W_b"])
    scores = transpose(matmul(mat, transpose(query)))
    beta = softmax(scores)
    return matmul(beta, mat), True


def build_path_vectors(bundle, embeddings, params, alpha=DEFAULT_ALPHA):
    """Fill a bundle's path vectors from node embeddings.

    embeddings maps node id -> 1 x d tensor (callable or indexable).
    First-hop paths use path_repr; second-hop paths compose the two
    segment vectors per two_hop_repr, with each segment itself a
    path_repr (source->via, via->target).
    """
    emb = embeddings if callable(embeddings) else embeddings.__getitem__
    e_src = emb(bundle.source)
    vectors = []
    for n, _ in bundle.first_hop:
        vectors.append(path_repr(e_src, emb(n), params))
    for n, via, _ in bundle.second_hop:
        e_via, e_n = emb(via), emb(n)
        seg1 = path_repr(e_src, e_via, params)
        seg2 = path_repr(e_via, e_n, params)
        vectors.append(two_hop_repr(seg1, seg2, e_src, e_n, params, alpha=alpha))
    return vectors
