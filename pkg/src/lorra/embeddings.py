"""Question encoding, OCR token embedding and image-feature providers.

No pretrained word vectors are used. Question words get a trainable table
built from the training questions; OCR tokens are embedded by hashing
character n-grams into a fixed random bucket matrix, which keeps the
embedding defined for strings never seen in training.
"""
from __future__ import annotations

import json
import zlib
from collections import Counter
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .data import FeatureBundle, SyntheticConfig, parse_synthetic_image_id, render_synthetic
from .errors import ConfigError, ContractError, DataError
from .seeding import rng, torch_generator

PAD, UNK = "<pad>", "<unk>"
MAX_QUESTION_LEN = 14
MAX_OCR_TOKENS = 50


def build_question_words(questions: Iterable[Sequence[str]], min_count: int = 1) -> list[str]:
    """Word list for the question table, most frequent first; PAD and UNK lead."""
    counts = Counter(w for q in questions for w in q)
    words = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
    return [PAD, UNK] + [w for w in words if w not in (PAD, UNK)]


class EmbeddingTable(nn.Module):
    def __init__(self, words: Sequence[str], dim: int, oov_policy: str = "unk_row",
                 oov_buckets: int = 64):
        super().__init__()
        if list(words[:2]) != [PAD, UNK]:
            raise ConfigError("question word list must start with PAD, UNK")
        if oov_policy not in ("unk_row", "subword_hash"):
            raise ConfigError(f"unknown oov_policy {oov_policy!r}")
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        self.oov_policy = oov_policy
        self.oov_buckets = oov_buckets if oov_policy == "subword_hash" else 0
        self.embedding = nn.Embedding(len(self.words) + self.oov_buckets, dim, padding_idx=0)

    def lookup(self, word: str) -> int:
        idx = self.index.get(word)
        if idx is not None:
            return idx
        if self.oov_policy == "subword_hash":
            return len(self.words) + zlib.crc32(word.encode("utf-8")) % self.oov_buckets
        return 1

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.embedding(ids)


class QuestionEncoder(nn.Module):
    """LSTM over word embeddings, pooled by attention with one learned query."""

    def __init__(self, table: EmbeddingTable, hidden: int, max_len: int = MAX_QUESTION_LEN):
        super().__init__()
        self.table = table
        self.max_len = max_len
        self.hidden = hidden
        self.lstm = nn.LSTM(table.embedding.embedding_dim, hidden, batch_first=True)
        self.pool_query = nn.Parameter(torch.randn(hidden) / hidden ** 0.5)

    def ids(self, tokens: Sequence[str]) -> tuple[list[int], list[bool]]:
        if not tokens:
            raise ContractError("question must contain at least one token")
        ids = [self.table.lookup(t) for t in tokens[: self.max_len]]
        mask = [True] * len(ids) + [False] * (self.max_len - len(ids))
        return ids + [0] * (self.max_len - len(ids)), mask

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        states, _ = self.lstm(self.table(ids))
        scores = (states @ self.pool_query).masked_fill(~mask, float("-inf"))
        alpha = torch.softmax(scores, dim=-1)
        return torch.einsum("bl,blh->bh", alpha, states)


def encode_question(encoder: QuestionEncoder, tokens: Sequence[str]) -> torch.Tensor:
    ids, mask = encoder.ids(tokens)
    p = next(encoder.parameters())
    return encoder(torch.tensor([ids], device=p.device), torch.tensor([mask], device=p.device))[0]


class SubwordEmbedder(nn.Module):
    """Hashed character n-gram embedding, total over arbitrary strings.

    A token is wrapped as ``<token>``; the whole wrapped word plus all of its
    n-grams (lengths ``min_n..max_n``) are hashed into ``buckets`` rows of a
    fixed seeded matrix and summed with 1/sqrt(count) scaling.
    """

    def __init__(self, dim: int = 64, buckets: int = 4096, min_n: int = 3, max_n: int = 6,
                 seed: int = 0):
        super().__init__()
        self.dim, self.buckets, self.min_n, self.max_n = dim, buckets, min_n, max_n
        g = torch_generator(seed, "subword-matrix")
        self.register_buffer("matrix", torch.randn(buckets, dim, generator=g) / dim ** 0.5)
        self._cache: dict[str, np.ndarray] = {}
        self._np: np.ndarray | None = None

    def bucket_ids(self, token: str) -> list[int]:
        word = f"<{token.lower()}>"
        grams = [word]
        for n in range(self.min_n, self.max_n + 1):
            grams.extend(word[i:i + n] for i in range(len(word) - n + 1))
        return [zlib.crc32(g.encode("utf-8")) % self.buckets for g in grams]

    def embed(self, token: str) -> np.ndarray:
        row = self._cache.get(token)
        if row is None:
            if self._np is None:
                self._np = self.matrix.detach().to(torch.float64).cpu().numpy()
            ids = self.bucket_ids(token)
            row = (self._np[ids].sum(axis=0) / np.sqrt(len(ids))).astype(np.float32)
            self._cache[token] = row
        return row

    def _apply(self, fn, *args, **kwargs):
        self._cache, self._np = {}, None
        return super()._apply(fn, *args, **kwargs)


def embed_ocr_tokens(embedder: SubwordEmbedder, tokens: Sequence[str],
                     max_tokens: int = MAX_OCR_TOKENS) -> tuple[np.ndarray, np.ndarray]:
    """Embedded rows for the first ``max_tokens`` tokens plus a validity mask.

    Padded rows are zero with mask 0.
    """
    rows = np.zeros((max_tokens, embedder.dim), dtype=np.float32)
    mask = np.zeros(max_tokens, dtype=bool)
    for j, tok in enumerate(tokens[:max_tokens]):
        rows[j] = embedder.embed(tok)
        mask[j] = True
    return rows, mask


# ---------------------------------------------------------------------------
# feature providers
# ---------------------------------------------------------------------------

class SyntheticFeatureProvider:
    """Regenerates synthetic images from their id; other ids get seeded noise."""

    kind = "synthetic"

    def __init__(self, config: SyntheticConfig | None = None):
        self.config = config or SyntheticConfig()
        self.config.validate()
        self._pools = None
        c = self.config
        self.dims = (c.grid_rows, c.grid_dim, c.region_rows, c.region_dim)

    def provide(self, image_id: str) -> FeatureBundle:
        parsed = parse_synthetic_image_id(image_id)
        if parsed is not None:
            if self._pools is None:
                self._pools = self.config.pools()
            split, index = parsed
            return render_synthetic(self.config, split, index, self._pools[split]).features
        G, Dg, R, Dr = self.dims
        r = rng(self.config.seed, "noise-features", image_id)
        return FeatureBundle(r.normal(0.0, self.config.noise_std, (G, Dg)),
                             r.normal(0.0, self.config.noise_std, (R, Dr)))


_DTYPE = np.dtype("<f4")


def write_feature_store(directory, bundles: Mapping[str, FeatureBundle]) -> Path:
    """Write per-image row-major little-endian f32 matrices plus manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = {}
    for n, image_id in enumerate(sorted(bundles)):
        bundle = bundles[image_id]
        entry = {}
        for name in ("grid", "regions"):
            arr = getattr(bundle, name)
            fname = f"{n:07d}.{name}.f32"
            (directory / fname).write_bytes(arr.astype(_DTYPE).tobytes(order="C"))
            entry[name] = {"file": fname, "shape": list(arr.shape)}
        images[image_id] = entry
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"format": "f32le-rowmajor", "images": images},
                                   sort_keys=True), encoding="utf-8")
    return manifest


class FileFeatureProvider:
    kind = "file"

    def __init__(self, manifest_path):
        self.manifest_path = Path(manifest_path)
        if not self.manifest_path.exists():
            raise DataError(f"{self.manifest_path}: feature manifest not found")
        doc = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        self.root = self.manifest_path.parent
        self.images: dict = doc["images"]
        self._cache: dict[str, FeatureBundle] = {}

    def _read(self, spec) -> np.ndarray:
        path = self.root / spec["file"]
        shape = tuple(spec["shape"])
        raw = np.frombuffer(path.read_bytes(), dtype=_DTYPE)
        if raw.size != int(np.prod(shape)):
            raise DataError(f"{path}: expected {shape} floats, found {raw.size}")
        return raw.reshape(shape).astype(np.float32)

    def provide(self, image_id: str) -> FeatureBundle:
        if image_id not in self.images:
            raise KeyError(f"image {image_id!r} not in {self.manifest_path}")
        bundle = self._cache.get(image_id)
        if bundle is None:
            entry = self.images[image_id]
            bundle = FeatureBundle(self._read(entry["grid"]), self._read(entry["regions"]))
            self._cache[image_id] = bundle
        return bundle


def provide_features(provider, image_id: str) -> FeatureBundle:
    return provider.provide(image_id)
