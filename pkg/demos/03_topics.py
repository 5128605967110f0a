#!/usr/bin/env python3
"""Topic model fitting, held-out assignment, and the per-topic memory."""

import numpy as np

from mwpgen.dataset import preprocess_dataset
from mwpgen.lda import assign_topic, lda_fit, top_keywords
from mwpgen.model import ModelConfig, MWPModel, init_topic_memory
from mwpgen.training import build_vocabs

money = ["coins", "nickels", "dimes", "pennies", "bank", "cents"]
travel = ["airplane", "speed", "miles", "wind", "hours", "engine"]

rng = np.random.default_rng(0)
docs = []
for vocab in (money, travel):
    for _ in range(6):
        docs.append([vocab[rng.integers(len(vocab))] for _ in range(8)])

# collapsed Gibbs sampling; the small document prior suits 8-token docs
lda = lda_fit(docs, num_topics=2, alpha_doc=0.5, iterations=150, seed=0)
for t in (1, 2):
    print(f"topic {t} keywords:", top_keywords(lda, t, 4))

held_out = ["the", "bank", "pays", "interest", "in", "cents"]
a = assign_topic(held_out, lda, doc_id="held-out")
print(f"held-out doc -> topic {a.topic_id}, dist {a.dist.round(3)}")

# the decoder reads one memory row per topic, seeded from topic keywords
records = [{"id": "m", "equations": ["x+y=30"],
            "problem": " ".join(money) + " " + " ".join(travel)}]
examples, _ = preprocess_dataset(records)
eq_vocab, text_vocab = build_vocabs(examples, min_freq=1)
model = MWPModel(ModelConfig(hidden_size=8, num_topics=2, memory_slots=3,
                             use_graph=False), eq_vocab, text_vocab, seed=0)
init_topic_memory(model, {t: top_keywords(lda, t, 3) for t in (1, 2)})
print("memory block shape:", model.topic_memory.block.shape)
print("row for topic 1 is the keyword embeddings:",
      np.array_equal(model.topic_memory.block[0, 0],
                     model.params["text_emb"].data[text_vocab.id(top_keywords(lda, 1, 1)[0])]))

# each decode step writes the row through a gate; saturating the gate
# shows the two identities the update interpolates between
from mwpgen.autodiff import Tensor

state = Tensor(rng.normal(0, 1, (1, 8)))
row = Tensor(rng.normal(0, 1, (3, 8)))
model.params["mem_gate.b"].data[...] = -50.0
kept = model.update_memory(state, row)
print("gate driven to 0 keeps the row:", np.allclose(kept.data, row.data))
model.params["mem_gate.b"].data[...] = 50.0
replaced = model.update_memory(state, row)
print("gate driven to 1 rewrites it:  ", not np.allclose(replaced.data, row.data))
