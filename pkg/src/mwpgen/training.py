"""Training loop, optimizer, KL annealing, checkpoints and generation.

The loop is deterministic end to end: example order, corruption noise
and reparameterization draws all derive from (seed, epoch, batch), so a
resumed run continues bit-identically to an uninterrupted one and two
runs with the same seed produce byte-identical artifacts.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import snapshot
from .autodiff import Tape
from .dataset import Vocabulary, build_vocab, corrupt_problem
from .equations import normalize_variables, tokenize_equation_set
from .lda import top_keywords
from .metrics import bleu2
from .model import ModelConfig, MWPModel, TrainItem, init_topic_memory


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Optimization settings plus the nested model sizes."""

    batch_size: int = 32
    learning_rate: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    epochs: int = 10
    warmup_steps: int = 2000
    topic_weight: float = 0.5
    mask_rate: float = 0.15
    delete_rate: float = 0.10
    vocab_min_freq: int = 2
    seed: int = 0
    dev_every: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise TrainError("rates must be positive")
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)

    def to_dict(self):
        d = {k: getattr(self, k) for k in (
            "batch_size", "learning_rate", "beta1", "beta2", "adam_eps",
            "clip_norm", "epochs", "warmup_steps", "topic_weight",
            "mask_rate", "delete_rate", "vocab_min_freq", "seed", "dev_every")}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Adam:
    """Adam with bias correction and global gradient-norm clipping.

    Clipping happens before the moment updates. A non-finite gradient
    aborts with the offending parameter's name.
    """

    def __init__(self, params, learning_rate=0.0005, beta1=0.9, beta2=0.999,
                 eps=1e-8, clip_norm=5.0):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, params):
        grads = {}
        sq_total = 0.0
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainError(f"non-finite gradient in parameter {name!r}")
            grads[name] = g
            sq_total += float((g * g).sum())
        norm = np.sqrt(sq_total)
        scale = 1.0
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / norm

        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name] * scale
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return norm

    def state_arrays(self):
        arrays = {f"adam.m.{n}": a for n, a in self.m.items()}
        arrays.update({f"adam.v.{n}": a for n, a in self.v.items()})
        arrays["adam.t"] = np.array([float(self.t)])
        return arrays

    def load_state_arrays(self, arrays):
        for name in self.m:
            self.m[name] = arrays[f"adam.m.{name}"].reshape(self.m[name].shape)
            self.v[name] = arrays[f"adam.v.{name}"].reshape(self.v[name].shape)
        self.t = int(arrays["adam.t"][0])


def kl_anneal_weight(step, warmup=2000):
    """Linear 0 -> 1 ramp over `warmup` steps, then 1."""
    if step < 0:
        raise TrainError("step must be >= 0")
    if warmup <= 0 or step >= warmup:
        return 1.0
    return step / warmup


def _batch_rng(seed, epoch, batch_idx):
    return np.random.default_rng((seed, epoch, batch_idx))


def make_items(examples, config, rng=None):
    """TrainItems (with corruption applied when rng is given)."""
    items = []
    for ex in examples:
        corrupted = list(ex.problem) if rng is None else corrupt_problem(
            ex.problem, config.mask_rate, config.delete_rate, rng)
        items.append(TrainItem(
            eq_seq=ex.equations,
            target_tokens=list(ex.problem),
            corrupted=corrupted,
            gold_topic=ex.topic_id or 1,
        ))
    return items


def build_vocabs(examples, min_freq=2):
    """(equation vocab, problem-text vocab) for a training set.

    Equation tokens are a small closed set, so they keep min_freq=1;
    problem text uses the frequency threshold.
    """
    eq_vocab = build_vocab([ex.equations.surfaces() for ex in examples], min_freq=1)
    text_vocab = build_vocab([ex.problem for ex in examples], min_freq=min_freq)
    return eq_vocab, text_vocab


@dataclass
class TrainResult:
    model: MWPModel
    optimizer: Adam
    log_rows: list
    best_dev_bleu: float | None
    final_epoch: int
    global_step: int


def save_checkpoint(path, model, optimizer=None, step=0, epoch=0, train_config=None):
    """Parameter snapshot + optimizer state + memory + vocab, one container."""
    arrays = {f"param.{n}": p.data for n, p in sorted(model.params.items())}
    arrays["topic_memory"] = model.topic_memory.block
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    meta = {
        "kind": "checkpoint",
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "eq_vocab": json.loads(model.eq_vocab.to_json()),
        "text_vocab": json.loads(model.text_vocab.to_json()),
        "eq_vocab_sha256": model.eq_vocab.sha256(),
        "text_vocab_sha256": model.text_vocab.sha256(),
        "step": step,
        "epoch": epoch,
    }
    snapshot.save_arrays(path, dict(sorted(arrays.items())), meta=meta)


def load_checkpoint(path, graph=None):
    """Rebuild (model, optimizer-or-None, meta) from a checkpoint file."""
    arrays, meta = snapshot.load_arrays(path)
    if meta.get("kind") != "checkpoint":
        raise TrainError(f"{path} is not a model checkpoint")
    config = ModelConfig.from_dict(meta["model_config"])
    eq_vocab = Vocabulary(meta["eq_vocab"]["tokens"])
    text_vocab = Vocabulary(meta["text_vocab"]["tokens"])
    if eq_vocab.sha256() != meta["eq_vocab_sha256"] \
            or text_vocab.sha256() != meta["text_vocab_sha256"]:
        raise TrainError("vocabulary hash mismatch in checkpoint")
    if config.use_graph and graph is None and any(k.startswith("param.node_emb")
                                                  for k in arrays):
        raise TrainError("checkpoint was trained with a concept graph; "
                         "supply the same edge file to load it")

    model = MWPModel(config, eq_vocab, text_vocab, graph=graph, seed=0)
    for name, p in model.params.items():
        key = f"param.{name}"
        if key not in arrays:
            raise TrainError(f"checkpoint missing parameter {name!r}")
        if arrays[key].shape != p.data.shape:
            raise TrainError(f"dimension mismatch for {name!r}: checkpoint "
                             f"{arrays[key].shape} vs model {p.data.shape}")
        p.data[...] = arrays[key]
    model.topic_memory.block[...] = arrays["topic_memory"].reshape(
        model.topic_memory.block.shape)

    optimizer = None
    if "adam.t" in arrays:
        tc = meta.get("train_config") or {}
        optimizer = Adam(model.params,
                         learning_rate=tc.get("learning_rate", 0.0005),
                         beta1=tc.get("beta1", 0.9), beta2=tc.get("beta2", 0.999),
                         eps=tc.get("adam_eps", 1e-8),
                         clip_norm=tc.get("clip_norm", 5.0))
        optimizer.load_state_arrays(arrays)
    return model, optimizer, meta


def train(config, examples, lda_model=None, graph=None, node_embeddings=None,
          dev_examples=None, out_dir=None, resume_from=None, quiet=True):
    """Run the optimization loop; returns a TrainResult.

    Artifacts under out_dir (when given): loss_log.csv, last.ckpt and,
    with a dev set, best.ckpt picked by corpus BLEU-2.
    """
    if not examples:
        raise TrainError("empty training set")

    start_epoch = 0
    global_step = 0
    if resume_from is not None:
        model, optimizer, meta = load_checkpoint(resume_from, graph=graph)
        if meta["model_config"] != config.model.to_dict():
            raise TrainError("resume config mismatch with checkpoint model config")
        if optimizer is None:
            optimizer = Adam(model.params, config.learning_rate, config.beta1,
                             config.beta2, config.adam_eps, config.clip_norm)
        start_epoch = meta["epoch"]
        global_step = meta["step"]
    else:
        eq_vocab, text_vocab = build_vocabs(examples, min_freq=config.vocab_min_freq)
        model = MWPModel(config.model, eq_vocab, text_vocab, graph=graph,
                         seed=config.seed, node_embeddings=node_embeddings)
        optimizer = Adam(model.params, config.learning_rate, config.beta1,
                         config.beta2, config.adam_eps, config.clip_norm)
        if lda_model is not None:
            keywords = {t: top_keywords(lda_model, t, config.model.memory_slots)
                        for t in range(1, lda_model.num_topics + 1)}
            init_topic_memory(model, keywords)

    max_topic = max((ex.topic_id or 1) for ex in examples)
    if max_topic > config.model.num_topics:
        raise TrainError(f"example topic {max_topic} exceeds num_topics "
                         f"{config.model.num_topics}")

    d = config.model.hidden_size
    log_rows = []
    best_dev = None
    for epoch in range(start_epoch, config.epochs):
        order = np.random.default_rng((config.seed, epoch)).permutation(len(examples))
        for batch_idx in range(0, len(order), config.batch_size):
            batch_ids = order[batch_idx:batch_idx + config.batch_size]
            rng_b = _batch_rng(config.seed, epoch, batch_idx // config.batch_size)
            batch = [examples[int(i)] for i in batch_ids]
            items = make_items(batch, config, rng=rng_b)
            noises = [rng_b.standard_normal((1, d)) for _ in items]

            for p in model.params.values():
                p.grad = None
            anneal = kl_anneal_weight(global_step, config.warmup_steps)
            with Tape() as tape:
                loss, parts = model.total_loss(items, anneal,
                                               config.topic_weight, noises=noises)
            tape.backward(loss)
            optimizer.step(model.params)
            global_step += 1
            log_rows.append({
                "step": global_step, "nll": parts["nll"], "kl": parts["kl"],
                "topic_ce": parts["topic_ce"], "anneal_weight": anneal,
            })
            if not quiet:
                print(f"step {global_step} nll {parts['nll']:.4f} "
                      f"kl {parts['kl']:.4f} ce {parts['topic_ce']:.4f}")

        if dev_examples and (epoch + 1) % config.dev_every == 0:
            dev_bleu = _dev_bleu(model, dev_examples)
            if best_dev is None or dev_bleu > best_dev:
                best_dev = dev_bleu
                if out_dir is not None:
                    save_checkpoint(f"{out_dir}/best.ckpt", model, optimizer,
                                    global_step, epoch + 1, config)

    if out_dir is not None:
        save_checkpoint(f"{out_dir}/last.ckpt", model, optimizer,
                        global_step, config.epochs, config)
        write_loss_log(f"{out_dir}/loss_log.csv", log_rows)
    return TrainResult(model=model, optimizer=optimizer, log_rows=log_rows,
                       best_dev_bleu=best_dev, final_epoch=config.epochs,
                       global_step=global_step)


def _dev_bleu(model, dev_examples):
    cands = [model.greedy_decode(ex.equations).tokens for ex in dev_examples]
    refs = [ex.problem for ex in dev_examples]
    return bleu2(cands, refs)


def write_loss_log(path_or_file, rows):
    """CSV with the exact columns step,nll,kl,topic_ce,anneal_weight."""
    own = isinstance(path_or_file, (str, bytes))
    fh = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
    try:
        writer = csv.DictWriter(fh, fieldnames=["step", "nll", "kl", "topic_ce",
                                                "anneal_weight"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    finally:
        if own:
            fh.close()


def loss_log_text(rows):
    buf = io.StringIO()
    write_loss_log(buf, rows)
    return buf.getvalue()


def generate(model, equation_sets, ids=None, sample=False, seed=0, beam_width=0,
             topic_id=None):
    """Decode problems for raw equation-set lists.

    Returns JSONL-ready dicts {"id", "equations", "generated", "topic",
    "provenance"}. Variables are normalized before tokenization so inputs
    match training form. With sample=True the latent is drawn (seeded)
    instead of pinned to the posterior mean.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i, raw_eqs in enumerate(equation_sets):
        norm = normalize_variables(list(raw_eqs))
        seq = tokenize_equation_set(norm)
        if beam_width and beam_width > 1:
            result = model.beam_decode(seq, beam_width=beam_width, topic_id=topic_id)
        else:
            result = model.greedy_decode(seq, topic_id=topic_id, rng=rng, sample=sample)
        out.append({
            "id": ids[i] if ids else f"gen{i:04d}",
            "equations": norm,
            "generated": " ".join(result.tokens),
            "topic": result.topic_id,
            "provenance": [[s, tok, how] for s, tok, how in result.provenance],
        })
    return out
