"""Embedding-quality metrics and a small task-suite evaluator.

Task kinds and their headline metric:

============== ===================== ==========================
kind           metric                file payload
============== ===================== ==========================
sts            Spearman              list of {a, b, gold}
retrieval      nDCG@10               {corpus: [{id, text}], queries: [{id, text, relevant}]}
classification kNN accuracy          {k, train: [{text, label}], test: [...]}
reranking      MAP                   {queries: [{text, candidates: [{text, relevant}]}]}
clustering     V-measure             {items: [{text, label}], seed}
============== ===================== ==========================

Undefined results (constant Spearman input, MAP with no usable query) are
reported as NaN.
"""
import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .vecmath import l2_normalize_rows

log = logging.getLogger(__name__)

METRIC_BY_KIND = {
    "sts": "spearman",
    "retrieval": "ndcg@10",
    "classification": "accuracy",
    "reranking": "map",
    "clustering": "v_measure",
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["tasks", "num_tasks", "mean", "seed", "checkpoint_id"],
    "properties": {
        "num_tasks": {"type": "integer", "minimum": 0},
        "mean": {"type": ["number", "null"]},
        "seed": {"type": ["integer", "null"]},
        "checkpoint_id": {"type": ["string", "null"]},
        "tasks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "kind", "metric", "value", "count"],
                "properties": {
                    "name": {"type": "string"},
                    "kind": {"enum": sorted(METRIC_BY_KIND)},
                    "metric": {"enum": sorted(METRIC_BY_KIND.values())},
                    "value": {"type": ["number", "null"]},
                    "count": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}


# -- metrics ------------------------------------------------------------------

def average_ranks(x):
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    start = 0
    for end in range(1, len(x) + 1):
        if end == len(x) or sorted_x[end] != sorted_x[start]:
            ranks[order[start:end]] = 0.5 * (start + end + 1)
            start = end
    return ranks


def spearman(pred, gold):
    pred = np.asarray(pred, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.float64)
    if pred.shape != gold.shape or pred.ndim != 1 or pred.size < 2:
        raise ConfigError("spearman needs two equal-length sequences of length >= 2")
    rp = average_ranks(pred) - (pred.size + 1) / 2
    rg = average_ranks(gold) - (gold.size + 1) / 2
    denom = math.sqrt(float(rp @ rp) * float(rg @ rg))
    if denom == 0.0:
        return math.nan
    return float(rp @ rg) / denom


def ndcg_at_k(ranking, gains, k=10):
    if k < 1:
        raise ConfigError("k must be >= 1")
    dcg = sum(gains.get(doc, 0.0) / math.log2(r + 2) for r, doc in enumerate(ranking[:k]))
    ideal = sorted((g for g in gains.values() if g > 0), reverse=True)[:k]
    idcg = sum(g / math.log2(r + 2) for r, g in enumerate(ideal))
    return dcg / idcg if idcg > 0 else 0.0


def average_precision(ranking, relevant):
    hits, total = 0, 0.0
    for r, doc in enumerate(ranking, start=1):
        if doc in relevant:
            hits += 1
            total += hits / r
    return total / len(relevant)


def mean_average_precision(rankings, relevant_sets):
    scores = []
    for q, (ranking, relevant) in enumerate(zip(rankings, relevant_sets)):
        if not relevant:
            log.info("query %d has no relevant documents; excluded from MAP", q)
            continue
        scores.append(average_precision(ranking, set(relevant)))
    return float(np.mean(scores)) if scores else math.nan


def _entropy(counts):
    counts = np.asarray(counts, dtype=np.float64)
    counts = counts[counts > 0]
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def v_measure(predicted, gold):
    """Harmonic mean of homogeneity and completeness (natural-log entropies).

    One predicted cluster over one gold class scores 1 (both entropies vanish).
    """
    if len(predicted) != len(gold):
        raise ConfigError("predicted and gold must label the same items")
    if not len(gold):
        return 1.0
    table = Counter(zip(gold, predicted))
    classes = Counter(gold)
    clusters = Counter(predicted)
    n = len(gold)
    h_c = _entropy(list(classes.values()))
    h_k = _entropy(list(clusters.values()))
    h_c_given_k = -sum(c / n * math.log(c / clusters[k]) for (_, k), c in table.items())
    h_k_given_c = -sum(c / n * math.log(c / classes[g]) for (g, _), c in table.items())
    hom = 1.0 if h_c == 0 else 1.0 - h_c_given_k / h_c
    com = 1.0 if h_k == 0 else 1.0 - h_k_given_c / h_k
    if hom + com == 0:
        return 0.0
    return 2 * hom * com / (hom + com)


def knn_accuracy(train_emb, train_labels, test_emb, test_labels, k=5):
    """Majority vote among the k most cosine-similar training items.

    Neighbor ties go to the lower training index; vote ties go to the label
    of the nearest neighbor among the tied labels.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    if len(train_labels) == 0:
        raise ConfigError("knn_accuracy needs a non-empty training set")
    if len(test_labels) == 0:
        return math.nan
    tr, _ = l2_normalize_rows(np.asarray(train_emb, dtype=np.float64))
    te, _ = l2_normalize_rows(np.asarray(test_emb, dtype=np.float64))
    sims = te @ tr.T
    idx = np.arange(tr.shape[0])
    correct = 0
    for row, truth in zip(sims, test_labels):
        nearest = np.lexsort((idx, -row))[:k]
        votes = Counter(train_labels[j] for j in nearest)
        best = max(votes.values())
        tied = {lab for lab, c in votes.items() if c == best}
        winner = next(train_labels[j] for j in nearest if train_labels[j] in tied)
        correct += winner == truth
    return correct / len(test_labels)


def spherical_kmeans(emb, k, seed=0, iters=100):
    """Cosine k-means with k-means++ seeding; returns integer assignments."""
    x, _ = l2_normalize_rows(np.asarray(emb, dtype=np.float64))
    n = x.shape[0]
    k = min(k, n)
    rng = np.random.default_rng(seed)
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d = np.min([1.0 - x @ c for c in centers], axis=0).clip(min=0.0)
        total = d.sum()
        nxt = rng.integers(n) if total == 0 else rng.choice(n, p=d / total)
        centers.append(x[nxt])
    centers = np.array(centers)
    assign = np.full(n, -1)
    for _ in range(iters):
        new = np.argmax(x @ centers.T, axis=1)
        if np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            members = x[assign == c]
            if len(members):
                mean = members.sum(axis=0)
                norm = np.linalg.norm(mean)
                centers[c] = mean / norm if norm > 0 else mean
    return assign


# -- suite evaluation ---------------------------------------------------------

@dataclass
class EvalReport:
    tasks: list = field(default_factory=list)
    seed: int | None = None
    checkpoint_id: str | None = None

    @property
    def mean(self):
        vals = [t["value"] for t in self.tasks if t["value"] is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self):
        return {"tasks": self.tasks, "num_tasks": len(self.tasks), "mean": self.mean,
                "seed": self.seed, "checkpoint_id": self.checkpoint_id}

    def metric(self, kind):
        for t in self.tasks:
            if t["kind"] == kind:
                return t["value"]
        raise KeyError(kind)

    def write_json(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["name", "kind", "metric", "value", "count"])
            for t in self.tasks:
                w.writerow([t["name"], t["kind"], t["metric"],
                            "" if t["value"] is None else repr(t["value"]), t["count"]])


def load_suite(path):
    """Read a suite manifest and every task file it lists (paths relative to it)."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read suite manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg})") from exc
    tasks = []
    for entry in manifest.get("tasks", []):
        kind = entry.get("kind")
        if kind not in METRIC_BY_KIND:
            raise ConfigError(f"unknown task kind {kind!r} in {path}")
        task_path = path.parent / entry["path"]
        try:
            data = json.loads(task_path.read_text(encoding="utf-8"))
        except OSError:
            raise DataError(f"missing task file: {task_path}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{task_path}: invalid JSON ({exc.msg})") from exc
        tasks.append({**entry, "data": data})
    return {"tasks": tasks}


def _eval_sts(data, embed):
    if len(data) < 2:
        return math.nan, len(data)
    a = embed([r["a"] for r in data])
    b = embed([r["b"] for r in data])
    pred = np.einsum("ij,ij->i", a, b)
    return spearman(pred, [r["gold"] for r in data]), len(data)


def _eval_retrieval(data, embed, k=10):
    docs = data["corpus"]
    ids = [str(d["id"]) for d in docs]
    d_emb = embed([d["text"] for d in docs])
    queries = data["queries"]
    if not queries:
        return math.nan, 0
    q_emb = embed([q["text"] for q in queries])
    sims = q_emb @ d_emb.T
    pos = np.arange(len(ids))
    scores = []
    for q, row in zip(queries, sims):
        ranking = [ids[j] for j in np.lexsort((pos, -row))[:k]]
        gains = {str(doc): float(g) for doc, g in q["relevant"].items()}
        scores.append(ndcg_at_k(ranking, gains, k))
    return float(np.mean(scores)), len(queries)


def _eval_classification(data, embed):
    train, test = data["train"], data["test"]
    if not train:
        raise ConfigError("classification task has no training items")
    tr = embed([r["text"] for r in train])
    te = embed([r["text"] for r in test])
    acc = knn_accuracy(tr, [r["label"] for r in train], te, [r["label"] for r in test],
                       k=int(data.get("k", 5)))
    return acc, len(test)


def _eval_reranking(data, embed):
    rankings, relevant = [], []
    for q in data["queries"]:
        cands = q["candidates"]
        qe = embed([q["text"]])[0]
        ce = embed([c["text"] for c in cands])
        order = np.lexsort((np.arange(len(cands)), -(ce @ qe)))
        rankings.append([int(j) for j in order])
        relevant.append({j for j, c in enumerate(cands) if c["relevant"]})
    return mean_average_precision(rankings, relevant), len(rankings)


def _eval_clustering(data, embed):
    items = data["items"]
    if not items:
        return math.nan, 0
    labels = [r["label"] for r in items]
    assign = spherical_kmeans(embed([r["text"] for r in items]), len(set(labels)),
                              seed=int(data.get("seed", 0)))
    return v_measure(assign.tolist(), labels), len(items)


_RUNNERS = {
    "sts": _eval_sts,
    "retrieval": _eval_retrieval,
    "classification": _eval_classification,
    "reranking": _eval_reranking,
    "clustering": _eval_clustering,
}


def evaluate(embed, suite, seed=None, checkpoint_id=None):
    """Score ``embed`` (texts -> unit rows) on every task of a loaded suite."""
    report = EvalReport(seed=seed, checkpoint_id=checkpoint_id)
    for task in suite.get("tasks", []):
        kind = task.get("kind")
        if kind not in _RUNNERS:
            raise ConfigError(f"unknown task kind {kind!r}")
        value, count = _RUNNERS[kind](task["data"], embed)
        report.tasks.append({
            "name": task.get("name", kind),
            "kind": kind,
            "metric": METRIC_BY_KIND[kind],
            "value": None if value is None or math.isnan(value) else float(value),
            "count": int(count),
        })
    return report
