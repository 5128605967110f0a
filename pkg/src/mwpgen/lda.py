"""Topic model: collapsed-Gibbs LDA, topic assignment, keyword extraction.

Documents are token lists (problem texts). Fitting removes stopwords,
numerals and punctuation, builds a private word list, then runs a
seeded collapsed Gibbs chain. Topic ids are 1-based everywhere.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .equations import canonical_number
from . import snapshot

log = logging.getLogger(__name__)

# Compact English stoplist. Auxiliaries are split out so they can be
# retained via keep_auxiliaries (topic keywords like "do" then survive).
AUXILIARIES = frozenset(
    "am is are was were be been being do does did have has had will would "
    "shall should can could may might must".split()
)
STOPWORDS = frozenset(
    "a an the and or but if then else for nor so yet of in on at by to from "
    "with without as into onto over under about against between through "
    "during before after above below up down out off again further once "
    "here there when where why how all any both each few more most other "
    "some such no not only own same than too very just that this these "
    "those it its he she his her him they them their we us our you your i "
    "me my mine what which who whom s t don now".split()
) | AUXILIARIES

DEFAULT_TOPICS = 9
DEFAULT_BETA = 0.01
DEFAULT_SWEEPS = 500
TOP_KEYWORDS = 30


class LdaError(ValueError):
    pass


def filter_tokens(tokens, keep_auxiliaries=False):
    """Drop stopwords, numerals and punctuation before topic modeling."""
    stop = STOPWORDS - AUXILIARIES if keep_auxiliaries else STOPWORDS
    out = []
    for tok in tokens:
        if tok in stop or canonical_number(tok) is not None or not tok.isalpha():
            continue
        out.append(tok)
    return out


@dataclass
class TopicAssignment:
    doc_id: str
    topic_id: int
    dist: np.ndarray

    def to_record(self):
        return {"id": self.doc_id, "topic": self.topic_id, "dist": [float(p) for p in self.dist]}


class LdaModel:
    """Final-state count tables of a collapsed Gibbs chain."""

    def __init__(self, words, doc_topic, topic_word, alpha_doc, beta_word):
        self.words = list(words)
        self.word_ids = {w: i for i, w in enumerate(self.words)}
        self.doc_topic = np.asarray(doc_topic, dtype=np.float64)
        self.topic_word = np.asarray(topic_word, dtype=np.float64)
        self.alpha_doc = float(alpha_doc)
        self.beta_word = float(beta_word)
        if self.topic_word.shape[1] != len(self.words):
            raise LdaError("topic_word width disagrees with word list")

    @property
    def num_topics(self):
        return self.topic_word.shape[0]

    @property
    def num_words(self):
        return self.topic_word.shape[1]

    def topic_word_probs(self):
        """Smoothed per-topic word distributions, rows summing to 1."""
        counts = self.topic_word + self.beta_word
        return counts / counts.sum(axis=1, keepdims=True)

    def save(self, path):
        snapshot.save_arrays(
            path,
            {"doc_topic": self.doc_topic, "topic_word": self.topic_word},
            meta={
                "kind": "lda",
                "alpha_doc": self.alpha_doc,
                "beta_word": self.beta_word,
                "words": self.words,
            },
        )

    @classmethod
    def load(cls, path):
        arrays, meta = snapshot.load_arrays(path)
        if meta.get("kind") != "lda":
            raise LdaError(f"{path} is not a topic model snapshot")
        return cls(
            words=meta["words"],
            doc_topic=arrays["doc_topic"],
            topic_word=arrays["topic_word"],
            alpha_doc=meta["alpha_doc"],
            beta_word=meta["beta_word"],
        )


def _gibbs_sweeps(docs, assignments, doc_topic, topic_word, topic_total,
                  alpha, beta, sweeps, rng, frozen_topic_word=False):
    """Run collapsed Gibbs sweeps in place over (doc, position) sites."""
    num_words = topic_word.shape[1]
    beta_total = beta * num_words
    for _ in range(sweeps):
        for d, doc in enumerate(docs):
            for i, w in enumerate(doc):
                k = assignments[d][i]
                doc_topic[d, k] -= 1
                if not frozen_topic_word:
                    topic_word[k, w] -= 1
                    topic_total[k] -= 1
                weights = (doc_topic[d] + alpha) * (topic_word[:, w] + beta) \
                    / (topic_total + beta_total)
                cdf = np.cumsum(weights)
                k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
                k = min(k, len(cdf) - 1)
                assignments[d][i] = k
                doc_topic[d, k] += 1
                if not frozen_topic_word:
                    topic_word[k, w] += 1
                    topic_total[k] += 1


def lda_fit(corpus, num_topics=DEFAULT_TOPICS, alpha_doc=None, beta_word=DEFAULT_BETA,
            iterations=DEFAULT_SWEEPS, seed=0, keep_auxiliaries=False):
    """Fit LDA over token-list documents by collapsed Gibbs sampling.

    Documents that filter down to nothing are skipped with a warning;
    their doc-topic row stays zero.
    """
    if not corpus:
        raise LdaError("cannot fit a topic model on an empty corpus")
    if iterations < 1:
        raise LdaError("iterations must be >= 1")
    if alpha_doc is None:
        alpha_doc = 50.0 / num_topics

    filtered = [filter_tokens(doc, keep_auxiliaries) for doc in corpus]
    words = sorted({w for doc in filtered for w in doc})
    if not words:
        raise LdaError("no usable words remain after filtering")
    word_ids = {w: i for i, w in enumerate(words)}

    docs = []
    for d, doc in enumerate(filtered):
        if not doc:
            log.warning("document %d is empty after filtering; skipped", d)
        docs.append([word_ids[w] for w in doc])

    rng = np.random.default_rng(seed)
    doc_topic = np.zeros((len(docs), num_topics))
    topic_word = np.zeros((num_topics, len(words)))
    topic_total = np.zeros(num_topics)
    assignments = []
    for d, doc in enumerate(docs):
        zs = [int(rng.integers(num_topics)) for _ in doc]
        assignments.append(zs)
        for w, k in zip(doc, zs):
            doc_topic[d, k] += 1
            topic_word[k, w] += 1
            topic_total[k] += 1

    _gibbs_sweeps(docs, assignments, doc_topic, topic_word, topic_total,
                  alpha_doc, beta_word, iterations, rng)
    return LdaModel(words, doc_topic, topic_word, alpha_doc, beta_word)


def assign_topic(doc, model, doc_id="", sweeps=25, seed=0, keep_auxiliaries=False):
    """Infer a held-out document's topic by fold-in Gibbs sampling.

    The fitted topic-word table stays frozen; only the document's own
    topic counts move. An empty (or fully out-of-vocabulary) document
    gets the uniform distribution and topic 1, the tie-break floor.
    """
    word_idx = [model.word_ids[w] for w in filter_tokens(doc, keep_auxiliaries)
                if w in model.word_ids]
    k_topics = model.num_topics
    if not word_idx:
        dist = np.full(k_topics, 1.0 / k_topics)
        return TopicAssignment(doc_id, 1, dist)

    rng = np.random.default_rng(seed)
    doc_topic = np.zeros((1, k_topics))
    topic_total = model.topic_word.sum(axis=1)
    assignments = [[int(rng.integers(k_topics)) for _ in word_idx]]
    for k in assignments[0]:
        doc_topic[0, k] += 1
    _gibbs_sweeps([word_idx], assignments, doc_topic, model.topic_word, topic_total,
                  model.alpha_doc, model.beta_word, sweeps, rng, frozen_topic_word=True)

    dist = doc_topic[0] + model.alpha_doc
    dist = dist / dist.sum()
    return TopicAssignment(doc_id, int(np.argmax(dist)) + 1, dist)


def top_keywords(model, topic_id, k=TOP_KEYWORDS):
    """Top-k words of a topic by smoothed probability, ties by word id."""
    if not 1 <= topic_id <= model.num_topics:
        raise LdaError(f"topic_id {topic_id} outside [1, {model.num_topics}]")
    probs = model.topic_word_probs()[topic_id - 1]
    order = sorted(range(model.num_words), key=lambda i: (-probs[i], i))
    return [model.words[i] for i in order[:k]]


def write_assignments(path, assignments):
    with open(path, "w", encoding="utf-8") as fh:
        for a in assignments:
            fh.write(json.dumps(a.to_record(), sort_keys=True) + "\n")
