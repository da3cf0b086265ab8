"""Planted-cluster corpora with controllable label noise.

Each text mixes ``signature_tokens`` tokens drawn from its cluster's private
pool with noise tokens from a pool shared by all clusters. Training triplets
are built from the non-held-out items; with probability
``false_negative_rate`` the assigned negative comes from the query's own
cluster, and with probability ``flip_positive_rate`` the positive comes from
another cluster. Every triplet records which of the two happened.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .mining import CorpusItem, Triplet, save_corpus, save_triplets

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    num_clusters: int = 8
    items_per_cluster: int = 32
    tokens_per_text: int = 10
    signature_tokens: int = 4
    shared_token_pool: int = 12
    noise_token_pool: int = 128
    false_negative_rate: float = 0.0
    flip_positive_rate: float = 0.0
    holdout_fraction: float = 0.25
    sts_pairs: int = 200
    seed: int = 0

    def __post_init__(self):
        checks = [
            ("num_clusters", self.num_clusters >= 2, "must be >= 2"),
            ("items_per_cluster", self.items_per_cluster >= 2, "must be >= 2"),
            ("tokens_per_text", self.tokens_per_text >= 1, "must be >= 1"),
            ("signature_tokens", 1 <= self.signature_tokens <= self.tokens_per_text,
             "must lie in [1, tokens_per_text]"),
            ("shared_token_pool", self.shared_token_pool >= 1, "must be >= 1"),
            ("noise_token_pool", self.noise_token_pool >= 1, "must be >= 1"),
            ("false_negative_rate", 0.0 <= self.false_negative_rate <= 1.0, "must lie in [0, 1]"),
            ("flip_positive_rate", 0.0 <= self.flip_positive_rate <= 1.0, "must lie in [0, 1]"),
            ("holdout_fraction", 0.0 <= self.holdout_fraction < 1.0, "must lie in [0, 1)"),
            ("sts_pairs", self.sts_pairs >= 0, "must be >= 0"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{name} {msg}, got {getattr(self, name)!r}")


@dataclass
class TripletTruth:
    negative_is_contaminated: bool
    positive_is_flipped: bool


@dataclass
class SynthCorpus:
    config: SynthConfig
    items: list
    heldout_ids: list
    triplets: list = field(default_factory=list)
    truth: list = field(default_factory=list)

    @property
    def train_items(self):
        held = set(self.heldout_ids)
        return [it for it in self.items if it.id not in held]

    @property
    def heldout_items(self):
        held = set(self.heldout_ids)
        return [it for it in self.items if it.id in held]

    def label_of(self):
        return {it.text: it.label for it in self.items}


def _make_text(rng, cluster, cfg):
    sig = rng.integers(cfg.shared_token_pool, size=cfg.signature_tokens)
    noise = rng.integers(cfg.noise_token_pool, size=cfg.tokens_per_text - cfg.signature_tokens)
    words = [f"c{cluster}s{k}" for k in sig] + [f"n{k}" for k in noise]
    return " ".join(words[i] for i in rng.permutation(len(words)))


def generate(cfg):
    rng = np.random.default_rng(cfg.seed)
    items = []
    for c in range(cfg.num_clusters):
        for k in range(cfg.items_per_cluster):
            items.append(CorpusItem(c * cfg.items_per_cluster + k, _make_text(rng, c, cfg), c))

    n_held = int(round(cfg.holdout_fraction * cfg.items_per_cluster))
    n_held = min(n_held, cfg.items_per_cluster - 2)
    heldout = []
    for c in range(cfg.num_clusters):
        members = np.arange(c * cfg.items_per_cluster, (c + 1) * cfg.items_per_cluster)
        heldout.extend(sorted(int(i) for i in rng.permutation(members)[:n_held]))

    corpus = SynthCorpus(cfg, items, heldout)
    train = corpus.train_items
    by_cluster = {}
    for it in train:
        by_cluster.setdefault(it.label, []).append(it)

    for query in train:
        same = [it for it in by_cluster[query.label] if it.id != query.id]
        other = [it for it in train if it.label != query.label]
        flipped = bool(rng.random() < cfg.flip_positive_rate)
        pos = other[rng.integers(len(other))] if flipped else same[rng.integers(len(same))]
        contaminated = bool(rng.random() < cfg.false_negative_rate)
        if contaminated:
            pool = [it for it in same if it.id != pos.id] or same
            neg = pool[rng.integers(len(pool))]
        else:
            neg = other[rng.integers(len(other))]
        corpus.triplets.append(Triplet(query.text, pos.text, neg.text, task="synthetic"))
        corpus.truth.append(TripletTruth(contaminated, flipped))
    return corpus


def to_eval_suite(corpus, out_dir=None, knn_k=5):
    """Build retrieval, classification, STS, reranking and clustering tasks.

    Retrieval: held-out queries against the training items, same cluster
    relevant (gain 1). Classification: training items labeled, held-out
    items tested. STS: a balanced seeded sample of held-out pairs, gold 1 for
    same cluster else 0. Returns the manifest dict; writes the files when
    ``out_dir`` is given.
    """
    if not corpus.items:
        raise ConfigError("cannot build an eval suite from an empty corpus")
    cfg = corpus.config
    rng = np.random.default_rng([cfg.seed, 1])
    train, held = corpus.train_items, corpus.heldout_items
    train_labels = {it.label for it in train}

    queries = []
    for it in held:
        if it.label not in train_labels:
            log.warning("cluster %r has no training items; excluded from retrieval", it.label)
            continue
        queries.append({"id": f"q{it.id}", "text": it.text,
                        "relevant": {str(d.id): 1 for d in train if d.label == it.label}})
    retrieval = {"corpus": [{"id": str(d.id), "text": d.text} for d in train], "queries": queries}

    classification = {
        "k": knn_k,
        "train": [{"text": it.text, "label": it.label} for it in train],
        "test": [{"text": it.text, "label": it.label} for it in held],
    }

    sts = []
    if len(held) >= 2:
        by = {}
        for it in held:
            by.setdefault(it.label, []).append(it)
        groups = [g for g in by.values() if len(g) >= 2]
        for k in range(cfg.sts_pairs):
            if k % 2 == 0 and groups:
                g = groups[rng.integers(len(groups))]
                i, j = rng.choice(len(g), size=2, replace=False)
                a, b = g[i], g[j]
            else:
                i, j = rng.choice(len(held), size=2, replace=False)
                a, b = held[i], held[j]
            sts.append({"a": a.text, "b": b.text, "gold": 1.0 if a.label == b.label else 0.0})

    reranking = {"queries": []}
    for it in held:
        pos = [d for d in train if d.label == it.label]
        neg = [d for d in train if d.label != it.label]
        if not pos or not neg:
            continue
        picks = [pos[i] for i in rng.choice(len(pos), size=min(3, len(pos)), replace=False)]
        picks += [neg[i] for i in rng.choice(len(neg), size=min(7, len(neg)), replace=False)]
        reranking["queries"].append({
            "text": it.text,
            "candidates": [{"text": d.text, "relevant": d.label == it.label} for d in picks],
        })

    clustering = {"items": [{"text": it.text, "label": it.label} for it in held], "seed": cfg.seed}

    tasks = {
        "retrieval": ("retrieval", retrieval),
        "classification": ("classification", classification),
        "sts": ("sts", sts),
        "reranking": ("reranking", reranking),
        "clustering": ("clustering", clustering),
    }
    manifest = {"tasks": []}
    for name, (kind, payload) in tasks.items():
        entry = {"name": f"synthetic-{name}", "kind": kind, "path": f"{name}.json"}
        manifest["tasks"].append(entry)
        entry["data"] = payload
    if out_dir is not None:
        write_suite(manifest, out_dir)
    return manifest


def write_suite(manifest, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for task in manifest["tasks"]:
        data = task.get("data")
        if data is not None:
            _dump_json(data, out_dir / task["path"])
        entries.append({k: v for k, v in task.items() if k != "data"})
    _dump_json({"tasks": entries}, out_dir / "suite.json")
    return out_dir / "suite.json"


def write_corpus(corpus, out_dir):
    """Corpus, triplets, ground-truth sidecar and config; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": out_dir / "corpus.jsonl",
        "triplets": out_dir / "triplets.jsonl",
        "truth": out_dir / "truth.jsonl",
        "heldout": out_dir / "heldout.json",
    }
    save_corpus(corpus.items, paths["corpus"])
    save_triplets(corpus.triplets, paths["triplets"])
    with open(paths["truth"], "w", encoding="utf-8", newline="\n") as fh:
        for t in corpus.truth:
            fh.write(json.dumps(asdict(t), sort_keys=True) + "\n")
    _dump_json({"heldout_ids": corpus.heldout_ids, "config": asdict(corpus.config)}, paths["heldout"])
    return paths


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, ensure_ascii=False, sort_keys=True, indent=1)
        fh.write("\n")
