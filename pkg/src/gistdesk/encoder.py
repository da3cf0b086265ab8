"""Hashed bag-of-tokens encoder: embedding table, mean pooling, L2 normalization.

Tokens are ``\\w+`` runs hashed into ``vocab_slots`` buckets with a seeded
64-bit FNV-1a hash plus a splitmix64 finalizer. Bucket collisions are
accepted as noise.
"""
import functools
import json
import re
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError, DataError

_TOKEN_RE = re.compile(r"\w+")
_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

CHECKPOINT_MAGIC = b"GISTCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TokenizerConfig:
    vocab_slots: int = 4096
    hash_seed: int = 0
    lowercase: bool = True
    max_tokens: int = 512

    def __post_init__(self):
        if self.vocab_slots < 2:
            raise ContractError("vocab_slots must be >= 2")
        if self.max_tokens < 1:
            raise ContractError("max_tokens must be >= 1")


@functools.lru_cache(maxsize=1 << 17)
def _hash_token(token, seed):
    h = (_FNV_OFFSET ^ (seed & _MASK64)) & _MASK64
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    # splitmix64 finalizer spreads the low bits before the modulo
    h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & _MASK64
    return h ^ (h >> 31)


def tokenize(text, cfg):
    if cfg.lowercase:
        text = text.lower()
    words = _TOKEN_RE.findall(text)[: cfg.max_tokens]
    return [_hash_token(w, cfg.hash_seed) % cfg.vocab_slots for w in words]


@dataclass
class EncoderParams:
    table: np.ndarray
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)

    def __post_init__(self):
        self.table = np.ascontiguousarray(self.table, dtype=np.float64)
        if self.table.ndim != 2 or self.table.shape[0] != self.tokenizer.vocab_slots:
            raise ContractError(
                f"table shape {self.table.shape} does not match vocab_slots="
                f"{self.tokenizer.vocab_slots}"
            )
        if self.table.shape[1] < 2:
            raise ContractError("embedding dim must be >= 2")

    @property
    def dim(self):
        return self.table.shape[1]

    def copy(self):
        return EncoderParams(self.table.copy(), self.tokenizer)


def init_params(dim, tokenizer=None, seed=0):
    """Uniform init in [-0.5, 0.5] / sqrt(dim)."""
    tokenizer = tokenizer or TokenizerConfig()
    rng = np.random.default_rng(seed)
    table = rng.uniform(-0.5, 0.5, size=(tokenizer.vocab_slots, dim)) / np.sqrt(dim)
    return EncoderParams(table, tokenizer)


@dataclass
class EncodedBatch:
    embeddings: np.ndarray
    pre_norm: np.ndarray
    norms: np.ndarray
    token_ids: list
    flat_ids: np.ndarray
    offsets: np.ndarray

    @property
    def degenerate(self):
        return self.norms == 0.0


@dataclass
class GradAccumulator:
    grad_table: np.ndarray

    @classmethod
    def like(cls, params):
        return cls(np.zeros_like(params.table))

    def zero(self):
        self.grad_table.fill(0.0)


def forward(texts, params):
    token_ids = [tokenize(t, params.tokenizer) for t in texts]
    offsets = np.zeros(len(texts) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(t) for t in token_ids])
    flat = np.fromiter((i for ids in token_ids for i in ids), dtype=np.int64,
                       count=int(offsets[-1]))
    pre, emb, norms = kernels.pool_forward(params.table, flat, offsets)
    return EncodedBatch(emb, pre, norms, token_ids, flat, offsets)


def backward(batch, grad_wrt_embeddings, params, acc):
    """Accumulate the table gradient for ``grad_wrt_embeddings`` into ``acc``."""
    grad = np.asarray(grad_wrt_embeddings, dtype=np.float64)
    if grad.shape != batch.embeddings.shape:
        raise ContractError(
            f"gradient shape {grad.shape} != embeddings shape {batch.embeddings.shape}"
        )
    if acc.grad_table.shape != params.table.shape:
        raise ContractError("accumulator shape does not match the table")
    kernels.pool_backward(grad, batch.embeddings, batch.norms, batch.flat_ids,
                          batch.offsets, acc.grad_table)


def embed(texts, params):
    return forward(list(texts), params).embeddings


# -- checkpoint file ---------------------------------------------------------
# Layout: magic, u32 version, u64 header length, UTF-8 JSON header, then the
# arrays listed in the header as raw little-endian float64 in order.

def save_checkpoint(path, params, extra_arrays=None, meta=None):
    arrays = {"table": params.table}
    arrays.update(extra_arrays or {})
    header = {
        "format": "gistdesk-checkpoint",
        "version": CHECKPOINT_VERSION,
        "dim": params.dim,
        "tokenizer": asdict(params.tokenizer),
        "arrays": [{"name": k, "shape": list(np.shape(a))} for k, a in arrays.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path, with_extras=False):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a gistdesk checkpoint")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    pos = start + hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 8
        if pos + nbytes > len(raw):
            raise DataError(f"{path}: truncated array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8", count=size,
                                             offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    params = EncoderParams(arrays.pop("table"), TokenizerConfig(**header["tokenizer"]))
    if with_extras:
        return params, arrays, header.get("meta", {})
    return params
