"""The generation model: variational equation-to-problem seq2seq.

Architecture in one breath: two BiGRUs read the equation token stream
and its number-masked template, fused per position by a gated linear
unit; the fused final state parameterizes the equation-side Gaussian
(posterior network) while a CNN over the (corrupted) problem text
parameterizes the problem-side Gaussian (prior network). The latent z
selects a topic and initializes a GRU decoder whose steps attend over
the encoder states and over a per-topic keyword memory (updated by a
write gate each step), take the previous word enriched with aggregated
two-hop concept-graph paths as input, and emit a pointer-generator
mixture over the vocabulary and the equation's number positions.

All vectors are rows (1 x d). Everything runs on the autodiff tensor
engine so one Tape.backward yields every parameter gradient.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import knowledge
from .autodiff import (
    Tensor,
    concat,
    embedding,
    exp,
    gather_cols,
    log,
    matmul,
    max_over_time,
    conv1d,
    narrow,
    no_grad,
    reduce_sum,
    sigmoid,
    softmax,
    tanh,
    tile_rows,
    transpose,
)
from .dataset import BOS_TOKEN, EOS_ID, EOS_TOKEN, PAD_ID, UNK_ID
from .equations import (
    KIND_MASK,
    KIND_NUMBER,
    KIND_OPERATOR,
    KIND_VARIABLE,
    MASK_TOKEN,
    canonical_number,
)

TYPE_ROWS = {KIND_OPERATOR: 0, KIND_NUMBER: 1, KIND_VARIABLE: 2, KIND_MASK: 3}
NUM_TYPES = 4
CONV_WIDTHS = (2, 3, 4)
PROB_EPS = 1e-12

_GRU_CELLS = (
    "enc_a_fw", "enc_a_bw", "enc_b_fw", "enc_b_bw", "dec", "cg_gru",
)
_GRU_PARTS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Sizes and switches for one model instance."""

    hidden_size: int = 256
    conv_filters: int = 0          # 0 means "same as hidden_size"
    num_topics: int = 9
    memory_slots: int = 30
    max_decode_len: int = 50
    alpha: float = 0.7             # two-hop path blend weight
    first_hop_cap: int = knowledge.FIRST_HOP_CAP
    second_hop_cap: int = knowledge.SECOND_HOP_CAP
    use_copy: bool = True
    use_graph: bool = True
    use_topic_memory: bool = True

    def __post_init__(self):
        if self.hidden_size < 1 or self.num_topics < 1 or self.memory_slots < 1:
            raise ModelError("hidden_size, num_topics and memory_slots must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ModelError("alpha must lie in [0, 1]")

    @property
    def filters(self):
        return self.conv_filters or self.hidden_size

    def to_dict(self):
        return {
            "hidden_size": self.hidden_size,
            "conv_filters": self.conv_filters,
            "num_topics": self.num_topics,
            "memory_slots": self.memory_slots,
            "max_decode_len": self.max_decode_len,
            "alpha": self.alpha,
            "first_hop_cap": self.first_hop_cap,
            "second_hop_cap": self.second_hop_cap,
            "use_copy": self.use_copy,
            "use_graph": self.use_graph,
            "use_topic_memory": self.use_topic_memory,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class EncoderOutput:
    """Fused encoder states plus the raw token/template streams."""

    states: Tensor            # (n, d) fused h_1..h_n
    states_t: Tensor          # (d, n), cached for attention
    final: Tensor             # (1, d) fused h_n
    token_stream: list        # h_a,k tensors, one per position
    template_stream: list     # h_b,k tensors, one per position

    def __len__(self):
        return self.states.data.shape[0]


@dataclass
class LatentState:
    """Diagonal Gaussian with a drawn (or pinned) sample."""

    mu: Tensor
    log_sigma: Tensor
    sigma: Tensor
    z: Tensor
    source: str  # "prior" | "posterior"


@dataclass
class DecoderState:
    s: Tensor                 # (1, d) recurrent state
    t: int = 0
    prev_id: int | None = None
    prev_surface: str | None = None
    context: Tensor | None = None
    prefix: tuple = ()

    def feed(self, surface, vocab):
        """Fix the word consumed at the next step (teacher or generated)."""
        return replace(self, prev_id=vocab.id(surface), prev_surface=surface)


@dataclass
class CopyInfo:
    """Equation number positions the pointer may copy from."""

    positions: list
    surfaces: list
    values: list

    @classmethod
    def from_sequence(cls, seq):
        pos = seq.number_positions()
        return cls(
            positions=pos,
            surfaces=[seq.tokens[i].surface for i in pos],
            values=[canonical_number(seq.tokens[i].surface) for i in pos],
        )

    def slots_for(self, surface):
        value = canonical_number(surface)
        if value is None:
            return []
        return [k for k, v in enumerate(self.values) if v == value]


@dataclass
class OutputDistribution:
    """Pointer-generator mixture components for one decode step."""

    gen: Tensor               # (1, V) vocabulary softmax
    copy: Tensor | None       # (1, m) over copy slots, or None
    p_gen: Tensor             # (1, 1) mixture weight (constant 1 when no copy)
    copy_info: CopyInfo

    def target_logprob(self, surface, vocab):
        """log P(surface) under the mixture, autodiff-tracked."""
        tid = vocab.id(surface)
        gen_p = gather_cols(self.gen, [tid])
        slots = self.copy_info.slots_for(surface) if self.copy is not None else []
        if not slots:
            p = self.p_gen * gen_p
        else:
            copy_p = reduce_sum(gather_cols(self.copy, slots), axis=1, keepdims=True)
            copy_term = ((-self.p_gen) + 1.0) * copy_p
            if tid == UNK_ID:
                # OOV number: only the pointer can actually produce it.
                p = copy_term
            else:
                p = self.p_gen * gen_p + copy_term
        return log(p + PROB_EPS)

    def merged_numpy(self, vocab):
        """Mixture collapsed for argmax: (vocab probs, {oov surface: prob})."""
        probs = self.p_gen.data[0, 0] * self.gen.data[0].copy()
        extra = {}
        if self.copy is not None:
            copy_mass = (1.0 - self.p_gen.data[0, 0]) * self.copy.data[0]
            for k, surface in enumerate(self.copy_info.surfaces):
                tid = vocab.id(surface)
                if tid == UNK_ID:
                    extra[surface] = extra.get(surface, 0.0) + copy_mass[k]
                else:
                    probs[tid] += copy_mass[k]
        return probs, extra


@dataclass
class GenerationResult:
    tokens: list
    topic_id: int
    provenance: list = field(default_factory=list)  # (step, token, "copy"|"gen")

    def text(self):
        return " ".join(self.tokens)


class TopicMemory:
    """Master |P| x K x d keyword-embedding block.

    The master block is not a trainable parameter; decoding works on a
    per-run copy so the master never mutates mid-generation.
    """

    def __init__(self, block):
        self.block = np.asarray(block, dtype=np.float64)
        if self.block.ndim != 3:
            raise ModelError("topic memory block must be |P| x K x d")

    @classmethod
    def zeros(cls, num_topics, slots, dim):
        return cls(np.zeros((num_topics, slots, dim)))

    def working_copy(self, topic_id):
        if not 1 <= topic_id <= self.block.shape[0]:
            raise ModelError(f"topic id {topic_id} outside [1, {self.block.shape[0]}]")
        return Tensor(self.block[topic_id - 1].copy())

    def checksum(self):
        return hashlib.sha256(np.ascontiguousarray(self.block).tobytes()).hexdigest()


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class MWPModel:
    """Full generation model; owns a flat named-parameter dict."""

    def __init__(self, config, eq_vocab, text_vocab, graph=None, seed=0,
                 node_embeddings=None):
        self.config = config
        self.eq_vocab = eq_vocab
        self.text_vocab = text_vocab
        self.graph = graph if config.use_graph else None
        self.params = {}
        self._bundle_cache = {}
        rng = np.random.default_rng(seed)
        self._build_params(rng)
        if node_embeddings is not None:
            if self.graph is None:
                raise ModelError("node embeddings supplied without a graph")
            if node_embeddings.shape != self.params["node_emb"].data.shape:
                raise ModelError("pretrained node embedding shape mismatch")
            self.params["node_emb"].data[...] = node_embeddings
        self.topic_memory = TopicMemory.zeros(
            config.num_topics, config.memory_slots, config.hidden_size
        )

    # ------------------------------------------------------------------
    # parameters

    def _add(self, rng, name, shape, kind="matrix"):
        if kind == "matrix":
            data = _uniform(rng, shape, shape[0])
        elif kind == "bias":
            data = np.zeros(shape)
        elif kind == "embedding":
            data = rng.normal(0.0, 0.1, size=shape)
        else:
            raise ModelError(f"unknown init kind {kind}")
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _add_gru(self, rng, cell, d):
        for part in _GRU_PARTS:
            if part.startswith("b"):
                self._add(rng, f"{cell}.{part}", (d,), "bias")
            else:
                self._add(rng, f"{cell}.{part}", (d, d), "matrix")

    def _build_params(self, rng):
        d = self.config.hidden_size
        f = self.config.filters
        p_topics = self.config.num_topics
        add = self._add

        add(rng, "eq_tok_emb", (len(self.eq_vocab), d), "embedding")
        add(rng, "eq_type_emb", (NUM_TYPES, d), "embedding")
        for cell in ("enc_a_fw", "enc_a_bw", "enc_b_fw", "enc_b_bw"):
            self._add_gru(rng, cell, d)
        add(rng, "glu_lin.W", (d, d)); add(rng, "glu_lin.b", (d,), "bias")
        add(rng, "glu_gate.W", (d, d)); add(rng, "glu_gate.b", (d,), "bias")
        add(rng, "posterior.W", (d, 2 * d)); add(rng, "posterior.b", (2 * d,), "bias")

        add(rng, "text_emb", (len(self.text_vocab), d), "embedding")
        for w in CONV_WIDTHS:
            add(rng, f"conv{w}.W", (w * d, f)); add(rng, f"conv{w}.b", (f,), "bias")
        add(rng, "q_proj.W", (len(CONV_WIDTHS) * f, d)); add(rng, "q_proj.b", (d,), "bias")
        add(rng, "prior.W", (d, 2 * d)); add(rng, "prior.b", (2 * d,), "bias")

        add(rng, "topic_cls.W", (d, p_topics)); add(rng, "topic_cls.b", (p_topics,), "bias")
        add(rng, "dec_init.W", (3 * d, d)); add(rng, "dec_init.b", (d,), "bias")
        self._add_gru(rng, "dec", d)
        add(rng, "att.W", (d, d))
        add(rng, "topic_att.W", (2 * d, d)); add(rng, "topic_att.V", (d, d))
        add(rng, "mem_gate.W", (2 * d, d)); add(rng, "mem_gate.b", (d,), "bias")
        add(rng, "mem_cand.W", (2 * d, d)); add(rng, "mem_cand.b", (d,), "bias")
        add(rng, "out_fuse.W", (2 * d, d)); add(rng, "out_fuse.b", (d,), "bias")
        add(rng, "out_proj.W", (d, len(self.text_vocab)))
        add(rng, "out_proj.b", (len(self.text_vocab),), "bias")
        add(rng, "pgen.W", (3 * d, 1)); add(rng, "pgen.b", (1,), "bias")

        if self.graph is not None:
            add(rng, "node_emb", (self.graph.num_nodes, d), "embedding")
            add(rng, "path.W_g", (2 * d, d)); add(rng, "path.b_g", (d,), "bias")
            add(rng, "path.U", (d, d)); add(rng, "path.W_b", (d, d))
            self._add_gru(rng, "cg_gru", d)
            add(rng, "cg_state.H", (d, d))

    @property
    def path_params(self):
        p = self.params
        return {"W_g": p["path.W_g"], "b_g": p["path.b_g"],
                "U": p["path.U"], "W_b": p["path.W_b"]}

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def param_checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------------
    # building blocks

    def _linear(self, prefix, x):
        return matmul(x, self.params[f"{prefix}.W"]) + self.params[f"{prefix}.b"]

    def _gru(self, cell, x, h):
        """One GRU cell step: h' = (1 - z) * h + z * h_tilde."""
        p = self.params
        z = sigmoid(matmul(x, p[f"{cell}.W_z"]) + matmul(h, p[f"{cell}.U_z"]) + p[f"{cell}.b_z"])
        r = sigmoid(matmul(x, p[f"{cell}.W_r"]) + matmul(h, p[f"{cell}.U_r"]) + p[f"{cell}.b_r"])
        cand = tanh(matmul(x, p[f"{cell}.W_h"]) + matmul(r * h, p[f"{cell}.U_h"]) + p[f"{cell}.b_h"])
        return ((-z) + 1.0) * h + z * cand

    def _bigru(self, fw_cell, bw_cell, rows):
        d = self.config.hidden_size
        n = len(rows)
        h = Tensor(np.zeros((1, d)))
        fw = []
        for i in range(n):
            h = self._gru(fw_cell, rows[i], h)
            fw.append(h)
        h = Tensor(np.zeros((1, d)))
        bw = [None] * n
        for i in reversed(range(n)):
            h = self._gru(bw_cell, rows[i], h)
            bw[i] = h
        return [fw[i] + bw[i] for i in range(n)]

    # ------------------------------------------------------------------
    # encoders

    def encode_equation(self, seq):
        """Dual-stream encoding of an EquationSequence, fused by a GLU."""
        if not len(seq):
            raise ModelError("cannot encode an empty equation sequence")
        tok_ids = [self.eq_vocab.id(t.surface) for t in seq.tokens]
        type_ids = [TYPE_ROWS[t.kind] for t in seq.tokens]
        tmpl_ids = [self.eq_vocab.id(s) for s in seq.template]
        tmpl_types = [
            TYPE_ROWS[KIND_MASK] if s == MASK_TOKEN else TYPE_ROWS[t.kind]
            for s, t in zip(seq.template, seq.tokens)
        ]

        emb_a = embedding(self.params["eq_tok_emb"], tok_ids) \
            + embedding(self.params["eq_type_emb"], type_ids)
        emb_b = embedding(self.params["eq_tok_emb"], tmpl_ids) \
            + embedding(self.params["eq_type_emb"], tmpl_types)
        n = len(seq)
        rows_a = [narrow(emb_a, 0, i, 1) for i in range(n)]
        rows_b = [narrow(emb_b, 0, i, 1) for i in range(n)]

        h_a = self._bigru("enc_a_fw", "enc_a_bw", rows_a)
        h_b = self._bigru("enc_b_fw", "enc_b_bw", rows_b)
        fused = [
            self._linear("glu_lin", a) * sigmoid(self._linear("glu_gate", b))
            for a, b in zip(h_a, h_b)
        ]
        states = concat(fused, axis=0) if n > 1 else fused[0]
        return EncoderOutput(
            states=states,
            states_t=transpose(states),
            final=fused[-1],
            token_stream=h_a,
            template_stream=h_b,
        )

    def _latent_from_stats(self, stats, source, rng=None, noise=None):
        d = self.config.hidden_size
        mu = narrow(stats, 1, 0, d)
        log_sigma = narrow(stats, 1, d, d)
        sigma = exp(log_sigma)
        if noise is None:
            noise = rng.standard_normal((1, d)) if rng is not None else np.zeros((1, d))
        z = mu + Tensor(np.asarray(noise, dtype=np.float64).reshape(1, d)) * sigma
        return LatentState(mu=mu, log_sigma=log_sigma, sigma=sigma, z=z, source=source)

    def posterior_latent(self, enc, rng=None, noise=None):
        """Equation-side Gaussian; z = mu when no rng/noise is supplied."""
        return self._latent_from_stats(
            self._linear("posterior", enc.final), "posterior", rng, noise
        )

    def encode_problem(self, tokens, rng=None, noise=None):
        """CNN problem encoding -> (q, problem-side prior LatentState)."""
        if not tokens:
            raise ModelError("cannot encode an empty problem")
        ids = self.text_vocab.ids(tokens)
        while len(ids) < max(CONV_WIDTHS):
            ids.append(PAD_ID)
        x = embedding(self.params["text_emb"], ids)
        feats = [
            max_over_time(conv1d(x, self.params[f"conv{w}.W"], self.params[f"conv{w}.b"], w))
            for w in CONV_WIDTHS
        ]
        q = tanh(self._linear("q_proj", concat(feats, axis=1)))
        prior = self._latent_from_stats(self._linear("prior", q), "prior", rng, noise)
        return q, prior

    def predict_topic(self, z):
        """Distribution over the |P| topics, as a (1, |P|) tensor."""
        return softmax(self._linear("topic_cls", z))

    # ------------------------------------------------------------------
    # decoder

    def init_decoder(self, enc, z):
        s0 = tanh(self._linear("dec_init", concat([enc.final, z, enc.final * z], axis=1)))
        return DecoderState(s=s0, t=0, prev_id=None, prev_surface=None)

    def _attend(self, s, enc):
        query = matmul(s, self.params["att.W"])
        weights = softmax(matmul(query, enc.states_t))
        return matmul(weights, enc.states), weights

    def topic_attend(self, s, c, memory_row):
        """Read the topic memory: f(s) = s + (sum_j score_j C_j) V."""
        sc = matmul(concat([s, c], axis=1), self.params["topic_att.W"])
        scores = softmax(matmul(sc, transpose(memory_row)))
        read = matmul(scores, memory_row)
        return s + matmul(read, self.params["topic_att.V"]), scores

    def update_memory(self, s_prime, memory_row):
        """Gated slotwise rewrite of the working memory copy."""
        k = memory_row.data.shape[0]
        tiled = tile_rows(s_prime, k)
        x = concat([tiled, memory_row], axis=1)
        u = sigmoid(self._linear("mem_gate", x))
        cand = tanh(self._linear("mem_cand", x))
        return u * cand + ((-u) + 1.0) * memory_row

    def _bundle(self, surface):
        bundle = self._bundle_cache.get(surface)
        if bundle is None:
            bundle = knowledge.bfs_two_hop(
                self.graph, surface,
                first_cap=self.config.first_hop_cap,
                second_cap=self.config.second_hop_cap,
            )
            self._bundle_cache[surface] = bundle
        return bundle

    def commonsense_embed(self, prev_id, prev_surface):
        """Decoder input g(e_prev): a GRU cell over graph-path context."""
        e_prev = embedding(self.params["text_emb"], [prev_id])
        g = None
        if self.graph is not None and prev_surface is not None \
                and self.graph.node_id(prev_surface) is not None:
            bundle = self._bundle(prev_surface)
            if not bundle.is_empty():
                vectors = knowledge.build_path_vectors(
                    bundle,
                    lambda nid: embedding(self.params["node_emb"], [nid]),
                    self.path_params,
                    alpha=self.config.alpha,
                )
                e_src = embedding(self.params["node_emb"], [bundle.source])
                g, has = knowledge.aggregate_paths(e_src, vectors, self.path_params)
                if not has:
                    g = None
        if g is None:
            state = Tensor(np.zeros((1, self.config.hidden_size)))
        else:
            state = matmul(g, self.params["cg_state.H"])
        if self.graph is None:
            # Ablated graph: plain embedding input, no extra cell.
            return e_prev
        return self._gru("cg_gru", e_prev, state)

    def decode_step(self, state, enc, memory_row, copy_info):
        """One decoder step; returns (distribution, next state, new memory)."""
        if state.t >= self.config.max_decode_len:
            raise ModelError(f"decode exceeded max length {self.config.max_decode_len}")
        if state.prev_id is None:
            raise ModelError("decoder state has no previous token; call feed() first")

        g_in = self.commonsense_embed(state.prev_id, state.prev_surface)
        s_t = self._gru("dec", g_in, state.s)
        c_t, att_w = self._attend(s_t, enc)
        if self.config.use_topic_memory:
            s_p, _ = self.topic_attend(s_t, c_t, memory_row)
            new_memory = self.update_memory(s_p, memory_row)
        else:
            s_p, new_memory = s_t, memory_row

        sc = concat([s_p, c_t], axis=1)
        gen = softmax(matmul(tanh(self._linear("out_fuse", sc)), self.params["out_proj.W"])
                      + self.params["out_proj.b"])

        if self.config.use_copy and copy_info.positions:
            copy_w = gather_cols(att_w, copy_info.positions)
            total = reduce_sum(copy_w, axis=1, keepdims=True)
            copy = copy_w / total
            e_prev = embedding(self.params["text_emb"], [state.prev_id])
            p_gen = sigmoid(self._linear("pgen", concat([s_p, c_t, e_prev], axis=1)))
        else:
            copy = None
            p_gen = Tensor(np.ones((1, 1)))

        dist = OutputDistribution(gen=gen, copy=copy, p_gen=p_gen, copy_info=copy_info)
        next_state = DecoderState(
            s=s_t, t=state.t + 1, prev_id=None, prev_surface=None,
            context=c_t, prefix=state.prefix,
        )
        return dist, next_state, new_memory

    # ------------------------------------------------------------------
    # losses

    def sequence_nll(self, enc, z, gold_topic, copy_info, target_tokens):
        """Teacher-forced mean token NLL for one example."""
        memory = self.topic_memory.working_copy(gold_topic)
        state = self.init_decoder(enc, z)
        inputs = [BOS_TOKEN] + list(target_tokens)
        targets = list(target_tokens) + [EOS_TOKEN]
        terms = []
        for prev, tgt in zip(inputs, targets):
            state = state.feed(prev, self.text_vocab)
            dist, state, memory = self.decode_step(state, enc, memory, copy_info)
            terms.append(-dist.target_logprob(tgt, self.text_vocab))
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total * (1.0 / len(terms))

    def example_loss(self, item, rng=None, noise=None):
        """Loss pieces for one TrainItem: (nll, kl, topic_ce) tensors."""
        enc = self.encode_equation(item.eq_seq)
        post = self.posterior_latent(enc)
        _, prior = self.encode_problem(item.corrupted, rng=rng, noise=noise)
        z = prior.z
        kl = kl_divergence(prior, post)
        probs = self.predict_topic(z)
        topic_p = gather_cols(probs, [item.gold_topic - 1])
        ce = -log(topic_p + PROB_EPS)
        copy_info = CopyInfo.from_sequence(item.eq_seq)
        nll = self.sequence_nll(enc, z, item.gold_topic, copy_info, item.target_tokens)
        return nll, kl, ce

    def total_loss(self, items, anneal_weight, topic_weight=0.5, rng=None, noises=None):
        """Batch objective: NLL + anneal * KL + topic_weight * CE, example-mean.

        Training-time z comes from the problem-side prior network; pass
        `noises` (one (1, d) array per item) to pin the reparameterization
        draws, or an rng to sample them.
        """
        if not items:
            raise ModelError("empty batch")
        nlls, kls, ces = [], [], []
        for i, item in enumerate(items):
            noise = noises[i] if noises is not None else None
            nll, kl, ce = self.example_loss(item, rng=rng, noise=noise)
            nlls.append(nll)
            kls.append(kl)
            ces.append(ce)

        def mean(ts):
            total = ts[0]
            for t in ts[1:]:
                total = total + t
            return total * (1.0 / len(ts))

        nll_m, kl_m, ce_m = mean(nlls), mean(kls), mean(ces)
        loss = nll_m + kl_m * float(anneal_weight) + ce_m * float(topic_weight)
        parts = {
            "nll": float(nll_m.data.reshape(-1)[0]),
            "kl": float(kl_m.data.reshape(-1)[0]),
            "topic_ce": float(ce_m.data.reshape(-1)[0]),
        }
        return loss, parts

    # ------------------------------------------------------------------
    # generation

    def _latent_for_inference(self, enc, rng=None, sample=False):
        if sample:
            return self.posterior_latent(enc, rng=rng)
        return self.posterior_latent(enc)  # z == mu

    def greedy_decode(self, eq_seq, topic_id=None, rng=None, sample=False, max_len=None):
        """Argmax decoding; z is the equation-side posterior mean unless sampled."""
        max_len = max_len or self.config.max_decode_len
        with no_grad():
            enc = self.encode_equation(eq_seq)
            latent = self._latent_for_inference(enc, rng=rng, sample=sample)
            z = latent.z
            if topic_id is None:
                topic_id = int(np.argmax(self.predict_topic(z).data[0])) + 1
            memory = self.topic_memory.working_copy(topic_id)
            copy_info = CopyInfo.from_sequence(eq_seq)
            state = self.init_decoder(enc, z)
            surface = BOS_TOKEN
            tokens, provenance = [], []
            for step in range(max_len):
                state = state.feed(surface, self.text_vocab)
                dist, state, memory = self.decode_step(state, enc, memory, copy_info)
                probs, extra = dist.merged_numpy(self.text_vocab)
                best_vocab = int(np.argmax(probs))
                best_extra = max(extra.items(), key=lambda kv: kv[1]) if extra else None
                if best_extra is not None and best_extra[1] > probs[best_vocab]:
                    surface = best_extra[0]
                    provenance.append((step, surface, "copy"))
                else:
                    if best_vocab == EOS_ID:
                        break
                    surface = self.text_vocab.token(best_vocab)
                    via_copy = dist.copy is not None and surface in copy_info.surfaces \
                        and dist.p_gen.data[0, 0] < 0.5
                    provenance.append((step, surface, "copy" if via_copy else "gen"))
                tokens.append(surface)
        return GenerationResult(tokens=tokens, topic_id=topic_id, provenance=provenance)

    def beam_decode(self, eq_seq, beam_width=4, topic_id=None, max_len=None):
        """Beam search over the merged mixture; returns the best hypothesis."""
        if beam_width < 1:
            raise ModelError("beam width must be >= 1")
        max_len = max_len or self.config.max_decode_len
        with no_grad():
            enc = self.encode_equation(eq_seq)
            z = self.posterior_latent(enc).z
            if topic_id is None:
                topic_id = int(np.argmax(self.predict_topic(z).data[0])) + 1
            copy_info = CopyInfo.from_sequence(eq_seq)
            start = (0.0, [], BOS_TOKEN,
                     self.init_decoder(enc, z), self.topic_memory.working_copy(topic_id))
            beams = [start]
            finished = []
            for _ in range(max_len):
                grown = []
                for score, toks, surface, state, memory in beams:
                    fed = state.feed(surface, self.text_vocab)
                    dist, nstate, nmem = self.decode_step(fed, enc, memory, copy_info)
                    probs, extra = dist.merged_numpy(self.text_vocab)
                    options = [(float(p), self.text_vocab.token(i), i == EOS_ID)
                               for i, p in enumerate(probs)]
                    options += [(float(p), s, False) for s, p in extra.items()]
                    options.sort(key=lambda o: -o[0])
                    for p, tok, is_eos in options[:beam_width]:
                        nscore = score + np.log(p + PROB_EPS)
                        if is_eos:
                            finished.append((nscore / (len(toks) + 1), toks))
                        else:
                            grown.append((nscore, toks + [tok], tok, nstate, nmem))
                grown.sort(key=lambda b: -b[0])
                beams = grown[:beam_width]
                if not beams:
                    break
            if not finished:
                finished = [(score / max(1, len(toks)), toks) for score, toks, *_ in beams]
            finished.sort(key=lambda f: -f[0])
        return GenerationResult(tokens=finished[0][1], topic_id=topic_id)


def kl_divergence(prior, posterior):
    """Closed-form KL between the problem-side and equation-side Gaussians.

    Computes KL(prior-side || posterior-side) for diagonal Gaussians:
    sum over dims of log(sx/sy) + (sy^2 + (my - mx)^2) / (2 sx^2) - 1/2,
    with (my, sy) the prior and (mx, sx) the posterior parameters.
    """
    if prior.mu.data.shape != posterior.mu.data.shape:
        raise ModelError("latent dimension mismatch")
    if np.any(prior.sigma.data <= 0) or np.any(posterior.sigma.data <= 0):
        raise ModelError("sigma must be strictly positive")
    diff = prior.mu - posterior.mu
    var_x = posterior.sigma * posterior.sigma
    num = prior.sigma * prior.sigma + diff * diff
    per_dim = (posterior.log_sigma - prior.log_sigma) + num / (var_x * 2.0) + (-0.5)
    return reduce_sum(per_dim)


@dataclass
class TrainItem:
    """One example in model-ready form."""

    eq_seq: object            # EquationSequence
    target_tokens: list       # problem tokens (uncorrupted, teacher-forced)
    corrupted: list           # problem-encoder input tokens
    gold_topic: int = 1


def init_topic_memory(model, keywords_per_topic):
    """Fill the master memory block from per-topic keyword lists.

    keywords_per_topic maps 1-based topic id -> word list (from the topic
    model's top keywords). Each keyword's vector is its pretrained graph
    node embedding when available, else its text embedding row; absent
    words leave zero rows. Lists shorter than the slot count pad with
    zeros; longer lists are truncated.
    """
    block = model.topic_memory.block
    block[...] = 0.0
    for topic_id, words in keywords_per_topic.items():
        if not 1 <= topic_id <= model.config.num_topics:
            raise ModelError(f"topic id {topic_id} out of range")
        for j, word in enumerate(words[: model.config.memory_slots]):
            vec = None
            if model.graph is not None:
                nid = model.graph.node_id(word)
                if nid is not None:
                    vec = model.params["node_emb"].data[nid]
            if vec is None and word in model.text_vocab:
                vec = model.params["text_emb"].data[model.text_vocab.id(word)]
            if vec is not None:
                block[topic_id - 1, j] = vec
    return model.topic_memory
