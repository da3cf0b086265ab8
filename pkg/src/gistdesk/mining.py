"""Triplet records, their JSONL format, and triplet mining over labeled corpora.

Mining, per query item:

* positive - rank same-class items (query excluded) by cosine similarity,
  keep the top ``k_p``, sample one with probabilities ``softmax(sim / tau)``;
* negative - rank out-of-class items, keep the top ``k_n`` (all by default),
  sample one uniformly.

Ranking ties go to the smaller item id. Queries are visited in id order
with a single seeded generator, so output is reproducible.
"""
import json
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .vecmath import l2_normalize_rows

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Triplet:
    query: str
    positive: str
    negative: str | None = None
    task: str | None = None


@dataclass(frozen=True)
class CorpusItem:
    id: object
    text: str
    label: object


@dataclass
class LabeledCorpus:
    items: list

    def __post_init__(self):
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            dup = next(i for i, c in Counter(ids).items() if c > 1)
            raise DataError(f"duplicate corpus id {dup!r}")
        if len({it.label for it in self.items}) < 2:
            raise DataError("corpus needs at least two distinct labels")


@dataclass(frozen=True)
class MiningConfig:
    k_p: int = 100
    k_n: int | None = None  # None: all out-of-class items
    temperature: float = 0.05
    seed: int = 0
    repeat: int = 1

    def __post_init__(self):
        if self.k_p < 1:
            raise ConfigError("k_p must be >= 1")
        if self.k_n is not None and self.k_n < 1:
            raise ConfigError("k_n must be >= 1 or None for all")
        if not self.temperature > 0:
            raise ConfigError("mining temperature must be > 0")
        if self.repeat < 1:
            raise ConfigError("repeat must be >= 1")


@dataclass
class MiningStats:
    per_class: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)


def top_k(sims, rank_of_id, k):
    """Positions of the ``k`` largest similarities; ties go to the smaller id.

    ``rank_of_id`` holds each candidate's position in ascending-id order.
    """
    order = np.lexsort((rank_of_id, -np.asarray(sims)))
    return order[:k]


def positive_weights(theta, temperature):
    """``softmax(theta / temperature)`` computed with a max shift."""
    z = np.asarray(theta, dtype=np.float64) / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def mine_triplets(corpus, embedder, cfg, stats=None):
    """Mine one triplet per query item (times ``cfg.repeat``).

    ``embedder`` maps a list of texts to an (n, dim) array; rows are
    L2-normalized here before taking dot products.
    """
    items = sorted(corpus.items, key=lambda it: it.id)
    texts = [it.text for it in items]
    try:
        raw = np.asarray(embedder(texts), dtype=np.float64)
    except KeyError as exc:
        raise DataError(f"embedder has no vector for {exc.args[0]!r}") from None
    if raw.shape[0] != len(items):
        raise DataError(f"embedder returned {raw.shape[0]} rows for {len(items)} texts")
    emb, _ = l2_normalize_rows(raw)
    sims = emb @ emb.T
    labels = np.array([it.label for it in items], dtype=object)
    stats = stats if stats is not None else MiningStats()
    rng = np.random.default_rng(cfg.seed)

    out = []
    for _ in range(cfg.repeat):
        for qi, query in enumerate(items):
            pos_pool, weights, neg_pool = candidate_pools(sims[qi], labels, qi, cfg)
            if not pos_pool.size:
                log.warning("class %r has a single member; skipping query %r", query.label, query.id)
                stats.skipped.append(query.id)
                continue
            pos = pos_pool[rng.choice(len(pos_pool), p=weights)]
            neg = neg_pool[rng.integers(len(neg_pool))]
            out.append(Triplet(query.text, items[pos].text, items[neg].text))
            cls = stats.per_class.setdefault(str(query.label), {"queries": 0, "pool_size": len(pos_pool)})
            cls["queries"] += 1
    return out


def candidate_pools(row, labels, qi, cfg):
    """Top-k positive pool with its sampling weights, and the top-k negative pool.

    ``row`` holds the query's similarities to every item, with items in
    ascending-id order so positions double as id ranks.
    """
    positions = np.arange(len(labels))
    in_class = labels == labels[qi]
    same = np.flatnonzero(in_class & (positions != qi))
    other = np.flatnonzero(~in_class)
    if not same.size:
        return same, np.empty(0), other
    pos_pool = same[top_k(row[same], same, cfg.k_p)]
    weights = positive_weights(row[pos_pool], cfg.temperature)
    k_n = len(other) if cfg.k_n is None else cfg.k_n
    neg_pool = other[top_k(row[other], other, k_n)]
    return pos_pool, weights, neg_pool


# -- JSONL ------------------------------------------------------------------

def save_triplets(triplets, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in triplets:
            rec = {"query": t.query, "pos": t.positive}
            if t.negative is not None:
                rec["neg"] = t.negative
            if t.task is not None:
                rec["task"] = t.task
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def _read_jsonl(path):
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise DataError(f"{path}:{lineno}: expected a JSON object")
        yield lineno, rec


def load_triplets(path):
    out = []
    for lineno, rec in _read_jsonl(path):
        q, p, n, task = rec.get("query"), rec.get("pos"), rec.get("neg"), rec.get("task")
        if not isinstance(q, str) or not isinstance(p, str):
            raise DataError(f"{path}:{lineno}: 'query' and 'pos' must be strings")
        if n is not None and not isinstance(n, str):
            raise DataError(f"{path}:{lineno}: 'neg' must be a string")
        if task is not None and not isinstance(task, str):
            raise DataError(f"{path}:{lineno}: 'task' must be a string")
        out.append(Triplet(q, p, n, task))
    return out


def save_corpus(items, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for it in items:
            fh.write(json.dumps({"id": it.id, "text": it.text, "label": it.label},
                                ensure_ascii=False) + "\n")


def load_corpus(path):
    items = []
    for lineno, rec in _read_jsonl(path):
        if "id" not in rec or not isinstance(rec.get("text"), str) or "label" not in rec:
            raise DataError(f"{path}:{lineno}: corpus records need 'id', 'text' and 'label'")
        items.append(CorpusItem(rec["id"], rec["text"], rec["label"]))
    return LabeledCorpus(items)
