"""Frozen guide models that score relevance inside a batch.

Three guides share one contract, ``similarities(triplets) -> GuideSimBlock``:

* :class:`FrozenEncoderGuide` wraps a saved encoder checkpoint,
* :class:`PrecomputedGuide` reads embeddings exported from any external model,
* :class:`LabelOracleGuide` scores 1/0 by cluster label (synthetic data only).

Guides never receive gradients. Embeddings are cached per unique text.
"""
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import encoder
from .errors import ContractError, DataError
from .vecmath import cosine_matrix, l2_normalize_rows

STORE_FORMAT = "gistdesk-embeddings"
STORE_VERSION = 1
HASH_ALGORITHM = "sha256"


def text_key(text):
    """Content hash of the exact UTF-8 bytes; no whitespace normalization."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class GuideSimBlock:
    sigma_qp: np.ndarray
    sigma_qn: np.ndarray | None
    sigma_qq: np.ndarray
    sigma_pp: np.ndarray

    @property
    def size(self):
        return self.sigma_qp.shape[0]


def _batch_texts(triplets):
    if not triplets:
        raise ContractError("guide needs a non-empty batch")
    queries = [t.query for t in triplets]
    positives = [t.positive for t in triplets]
    if all(t.negative is not None for t in triplets):
        negatives = [t.negative for t in triplets]
    else:
        negatives = None
    return queries, positives, negatives


class _EmbeddingGuide:
    """Shared logic for guides backed by unit embeddings."""

    def embed(self, texts):
        raise NotImplementedError

    def similarities(self, triplets):
        queries, positives, negatives = _batch_texts(triplets)
        q = self.embed(queries)
        p = self.embed(positives)
        return GuideSimBlock(
            sigma_qp=cosine_matrix(q, p),
            sigma_qn=None if negatives is None else cosine_matrix(q, self.embed(negatives)),
            sigma_qq=cosine_matrix(q, q),
            sigma_pp=cosine_matrix(p, p),
        )


class FrozenEncoderGuide(_EmbeddingGuide):
    kind = "checkpoint"

    def __init__(self, params, source=None):
        self._params = params.copy()
        self._cache = {}
        self.source = source

    @classmethod
    def from_checkpoint(cls, path):
        return cls(encoder.load_checkpoint(path), source=str(path))

    def embed(self, texts):
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if missing:
            for text, row in zip(missing, encoder.embed(missing, self._params)):
                self._cache[text] = row
        return np.array([self._cache[t] for t in texts]).reshape(len(texts), self._params.dim)


class PrecomputedGuide(_EmbeddingGuide):
    kind = "store"

    def __init__(self, vectors, dim, source=None):
        self._vectors = vectors
        self.dim = dim
        self.source = source

    @classmethod
    def load(cls, path):
        try:
            fh = open(path, encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read embedding store {path}: {exc}") from exc
        with fh:
            header_line = fh.readline()
            try:
                header = json.loads(header_line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:1: bad store header") from exc
            if header.get("format") != STORE_FORMAT:
                raise DataError(f"{path}: not a {STORE_FORMAT} file")
            if header.get("hash") != HASH_ALGORITHM:
                raise DataError(f"{path}: unsupported hash {header.get('hash')!r}")
            dim = int(header["dim"])
            keys, rows = [], []
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    vec = [float(x) for x in rec["v"]]
                    keys.append(str(rec["h"]))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise DataError(f"{path}:{lineno}: malformed record") from exc
                if len(vec) != dim:
                    raise DataError(f"{path}:{lineno}: expected {dim} values, got {len(vec)}")
                rows.append(vec)
        unit, _ = l2_normalize_rows(np.array(rows, dtype=np.float64).reshape(len(rows), dim))
        return cls(dict(zip(keys, unit)), dim, source=str(path))

    def embed(self, texts):
        out = np.empty((len(texts), self.dim))
        for i, text in enumerate(texts):
            row = self._vectors.get(text_key(text))
            if row is None:
                raise DataError(f"text missing from embedding store: {text!r}")
            out[i] = row
        return out


def export_store(path, texts, embed_fn):
    """Write the embeddings of ``texts`` (deduplicated, in first-seen order)."""
    unique = list(dict.fromkeys(texts))
    vectors = np.asarray(embed_fn(unique), dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"format": STORE_FORMAT, "version": STORE_VERSION,
                             "dim": int(vectors.shape[1]), "hash": HASH_ALGORITHM}) + "\n")
        for text, vec in zip(unique, vectors):
            fh.write(json.dumps({"h": text_key(text), "v": [float(x) for x in vec]}) + "\n")


class LabelOracleGuide:
    """Same label -> 1, else 0; the query-positive diagonal is lowered by ``offset``.

    With the offset, a same-label candidate (similarity 1) strictly exceeds
    the row threshold ``1 - offset`` and is masked. Without it, exact ties
    would keep contaminated negatives under the strict rule.
    """

    kind = "oracle"

    def __init__(self, labels, offset=1e-6, source=None):
        self.labels = dict(labels)
        self.offset = offset
        self.source = source

    @classmethod
    def from_items(cls, items, **kwargs):
        labels = {}
        for item in items:
            prev = labels.setdefault(item.text, item.label)
            if prev != item.label:
                raise DataError(f"text carries two labels ({prev!r}, {item.label!r}): {item.text!r}")
        return cls(labels, **kwargs)

    def _label_vector(self, texts):
        try:
            return [self.labels[t] for t in texts]
        except KeyError as exc:
            raise DataError(f"no cluster label for text {exc.args[0]!r}") from None

    @staticmethod
    def _same(a, b):
        a = np.asarray(a, dtype=object)
        b = np.asarray(b, dtype=object)
        return (a[:, None] == b[None, :]).astype(np.float64)

    def similarities(self, triplets):
        queries, positives, negatives = _batch_texts(triplets)
        lq = self._label_vector(queries)
        lp = self._label_vector(positives)
        sigma_qp = self._same(lq, lp)
        idx = np.arange(len(lq))
        sigma_qp[idx, idx] -= self.offset * sigma_qp[idx, idx]
        sigma_qn = None
        if negatives is not None:
            sigma_qn = self._same(lq, self._label_vector(negatives))
        return GuideSimBlock(sigma_qp, sigma_qn, self._same(lq, lq), self._same(lp, lp))


def guide_similarities(triplets, guide):
    return guide.similarities(triplets)
