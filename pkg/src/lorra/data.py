"""Dataset schema, answer normalization, vocabularies and the synthetic
textual-VQA generator.

The synthetic task is built so that a fixed answer vocabulary cannot solve
it on held-out data: test images show tokens drawn from a pool that never
appears in training, and the only way to answer "what is the red word" is
to find the OCR slot whose region carries the "red" attribute and copy it.
"""
from __future__ import annotations

import json
import logging
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, SchemaError
from .seeding import rng

logger = logging.getLogger(__name__)

N_ANSWERS = 10
SPLITS = ("train", "val", "test")

_PUNCT = frozenset(string.punctuation)
_ASCII_DIGITS = frozenset(string.digits)
_ARTICLES = frozenset({"a", "an", "the"})


def normalize_answer(raw: str) -> str:
    """Canonical form used for every answer/OCR-token comparison.

    Lowercase, drop ASCII punctuation (a '.' between two digits and a '-'
    between two alphanumerics survive), collapse whitespace, and strip
    leading articles unless the article is the whole answer.
    """
    s = raw.lower()
    kept = []
    last = len(s) - 1
    for i, ch in enumerate(s):
        if ch in _PUNCT:
            prev = s[i - 1] if i > 0 else ""
            nxt = s[i + 1] if i < last else ""
            if ch == "." and prev in _ASCII_DIGITS and nxt in _ASCII_DIGITS:
                pass
            elif ch == "-" and prev.isalnum() and nxt.isalnum():
                pass
            else:
                continue
        kept.append(ch)
    words = "".join(kept).split()
    while len(words) > 1 and words[0] in _ARTICLES:
        words.pop(0)
    return " ".join(words)


def tokenize_question(question: str) -> list[str]:
    tokens = []
    for word in question.lower().split():
        word = word.strip(string.punctuation)
        if word:
            tokens.append(word)
    return tokens


@dataclass
class FeatureBundle:
    grid: np.ndarray
    regions: np.ndarray

    def __post_init__(self):
        self.grid = np.ascontiguousarray(self.grid, dtype=np.float32)
        self.regions = np.ascontiguousarray(self.regions, dtype=np.float32)
        if self.grid.ndim != 2 or self.regions.ndim != 2:
            raise SchemaError("feature matrices must be 2-D")
        if not (np.isfinite(self.grid).all() and np.isfinite(self.regions).all()):
            raise SchemaError("feature matrices must be finite")

    def __eq__(self, other):
        if not isinstance(other, FeatureBundle):
            return NotImplemented
        return np.array_equal(self.grid, other.grid) and np.array_equal(self.regions, other.regions)


@dataclass
class QAInstance:
    question_id: str
    image_id: str
    question_tokens: list[str]
    ocr_tokens: list[str]
    answers: list[str]
    features: FeatureBundle
    split: str = "train"

    def __post_init__(self):
        if len(self.answers) != N_ANSWERS:
            raise SchemaError(
                f"question {self.question_id}: expected {N_ANSWERS} answers, got {len(self.answers)}"
            )
        if not self.question_tokens:
            raise SchemaError(f"question {self.question_id}: empty question")
        if self.split not in SPLITS:
            raise SchemaError(f"question {self.question_id}: unknown split {self.split!r}")

    @property
    def question(self) -> str:
        return " ".join(self.question_tokens)


# ---------------------------------------------------------------------------
# canonical JSON
# ---------------------------------------------------------------------------

def _instance_from_record(rec: dict, default_split: str, provider) -> QAInstance:
    qid = str(rec.get("question_id", "<missing>"))
    for key in ("question_id", "image_id", "question", "ocr_tokens", "answers"):
        if key not in rec:
            raise SchemaError(f"question {qid}: missing field {key!r}")
    answers = rec["answers"]
    if not isinstance(answers, list) or len(answers) != N_ANSWERS:
        n = len(answers) if isinstance(answers, list) else "non-list"
        raise SchemaError(f"question {qid}: expected {N_ANSWERS} answers, got {n}")
    if not isinstance(rec["ocr_tokens"], list):
        raise SchemaError(f"question {qid}: ocr_tokens must be a list")
    image_id = str(rec["image_id"])
    if "features" in rec:
        feats = rec["features"]
        try:
            bundle = FeatureBundle(np.asarray(feats["grid"], dtype=np.float32),
                                   np.asarray(feats["regions"], dtype=np.float32))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"question {qid}: bad features ({exc})") from exc
    elif provider is not None:
        bundle = provider.provide(image_id)
    else:
        raise SchemaError(f"question {qid}: no inline features and no feature provider")
    return QAInstance(
        question_id=qid,
        image_id=image_id,
        question_tokens=tokenize_question(str(rec["question"])),
        ocr_tokens=[str(t) for t in rec["ocr_tokens"]],
        answers=[normalize_answer(str(a)) for a in answers],
        features=bundle,
        split=str(rec.get("split", default_split)),
    )


def _read_json(path: Path):
    text = path.read_bytes().decode("utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise DataError(f"{path}: malformed JSON at byte offset {offset}: {exc.msg}") from exc


def load_dataset(path, provider=None) -> list[QAInstance]:
    """Load a canonical dataset file.

    Features come inline per record, from ``provider``, or from the
    file-backed store named by the top-level ``feature_manifest`` key
    (resolved relative to the dataset file).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such dataset file")
    doc = _read_json(path)
    if not isinstance(doc, dict) or not isinstance(doc.get("instances"), list):
        raise SchemaError(f"{path}: top-level object must hold an 'instances' list")
    if provider is None and doc.get("feature_manifest"):
        from .embeddings import FileFeatureProvider

        provider = FileFeatureProvider(path.parent / doc["feature_manifest"])
    default_split = doc.get("split", "train")
    out = []
    for rec in doc["instances"]:
        if rec.get("flagged"):
            continue
        out.append(_instance_from_record(rec, default_split, provider))
    return out


def dataset_to_json(instances: Sequence[QAInstance], *, inline_features: bool = True,
                    feature_manifest: str | None = None) -> str:
    records = []
    for inst in instances:
        rec = {
            "question_id": inst.question_id,
            "image_id": inst.image_id,
            "question": inst.question,
            "ocr_tokens": list(inst.ocr_tokens),
            "answers": list(inst.answers),
            "split": inst.split,
        }
        if inline_features:
            rec["features"] = {
                "grid": inst.features.grid.astype(np.float64).tolist(),
                "regions": inst.features.regions.astype(np.float64).tolist(),
            }
        records.append(rec)
    doc: dict = {"instances": records}
    if feature_manifest is not None:
        doc["feature_manifest"] = feature_manifest
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=False)


def save_dataset(instances: Sequence[QAInstance], path, *, features_dir=None) -> None:
    """Write canonical JSON. With ``features_dir`` the feature matrices go to a
    binary store next to the file instead of inline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if features_dir is None:
        text = dataset_to_json(instances)
    else:
        from .embeddings import write_feature_store

        features_dir = Path(features_dir)
        manifest = write_feature_store(features_dir, {i.image_id: i.features for i in instances})
        rel = manifest.resolve().relative_to(path.parent.resolve())
        text = dataset_to_json(instances, inline_features=False, feature_manifest=rel.as_posix())
    path.write_text(text, encoding="utf-8")


def load_textvqa(annotation_path, ocr_path=None, *, provider, split: str = "val") -> list[QAInstance]:
    """Map public TextVQA annotations (+ an OCR dump keyed by image_id) onto
    the canonical schema.

    The OCR file may be ``{image_id: [tokens]}`` or ``{"data": [{"image_id",
    "ocr_tokens"}]}``. Without it, per-record ``ocr_tokens`` are used.
    """
    doc = _read_json(Path(annotation_path))
    records = doc["data"] if isinstance(doc, dict) and "data" in doc else doc
    ocr: dict[str, list[str]] = {}
    if ocr_path is not None:
        odoc = _read_json(Path(ocr_path))
        if isinstance(odoc, dict) and "data" in odoc:
            ocr = {str(r["image_id"]): list(r["ocr_tokens"]) for r in odoc["data"]}
        else:
            ocr = {str(k): list(v) for k, v in odoc.items()}
    out = []
    for rec in records:
        if rec.get("flagged"):
            continue
        image_id = str(rec["image_id"])
        tokens = ocr.get(image_id, rec.get("ocr_tokens", []))
        mapped = {
            "question_id": str(rec["question_id"]),
            "image_id": image_id,
            "question": rec["question"],
            "ocr_tokens": tokens,
            "answers": rec.get("answers", []),
            "split": split,
        }
        out.append(_instance_from_record(mapped, split, provider))
    return out


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

def majority_answer(answers: Iterable[str]) -> str:
    counts = Counter(answers)
    best = max(counts.values())
    return min(a for a, c in counts.items() if c == best)


@dataclass
class Vocabulary:
    entries: list[str]
    frequency: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.entries = list(self.entries)
        self.index_of = {a: i for i, a in enumerate(self.entries)}
        if len(self.index_of) != len(self.entries):
            raise ConfigError("vocabulary entries must be unique")

    def __len__(self):
        return len(self.entries)

    def __contains__(self, answer):
        return answer in self.index_of

    def to_json(self) -> str:
        return json.dumps({"entries": self.entries,
                           "counts": [self.frequency.get(a, 0) for a in self.entries]},
                          ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        counts = doc.get("counts") or [0] * len(doc["entries"])
        return cls(doc["entries"], dict(zip(doc["entries"], counts)))


def build_vocabulary(instances: Sequence[QAInstance], *, min_count: int | None = None,
                     top_k: int | None = None) -> Vocabulary:
    """Answer vocabulary from the majority answer of each training question.

    Exactly one of ``min_count`` (keep answers seen at least k times) or
    ``top_k`` (keep the n most frequent) must be given. Order is count
    descending, then lexicographic.
    """
    if (min_count is None) == (top_k is None):
        raise ConfigError("pass exactly one of min_count or top_k")
    if not instances:
        raise DataError("cannot build a vocabulary from an empty training set")
    counts = Counter(majority_answer(normalize_answer(a) for a in inst.answers) for inst in instances)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if min_count is not None:
        ranked = [(a, c) for a, c in ranked if c >= min_count]
    else:
        if top_k > len(ranked):
            logger.warning("top_k=%d exceeds %d distinct answers; keeping all", top_k, len(ranked))
        ranked = ranked[:top_k]
    return Vocabulary([a for a, _ in ranked], dict(ranked))


# ---------------------------------------------------------------------------
# synthetic textual VQA
# ---------------------------------------------------------------------------

ATTRIBUTE_NAMES = ("red", "green", "blue", "yellow", "orange", "purple", "black", "white",
                   "pink", "brown", "gray", "silver", "golden", "violet", "cyan", "teal")
COPY_TEMPLATE = "what is the {} word"
COUNT_TEMPLATE = "how many words are shown"
_RESERVED = set(ATTRIBUTE_NAMES) | {"what", "is", "the", "word", "how", "many", "words", "are",
                                    "shown", "a", "an"}


def attribute_name(i: int) -> str:
    return ATTRIBUTE_NAMES[i] if i < len(ATTRIBUTE_NAMES) else f"attr{i}"


@dataclass
class SyntheticConfig:
    n_train: int = 5000
    n_test: int = 1000
    n_val: int = 0
    tokens_per_image: tuple[int, int] = (2, 7)
    n_attributes: int = 8
    fraction_copy: float = 1.0
    seed: int = 0
    pool_size_train: int = 1000
    pool_size_test: int = 500
    pool_size_val: int = 200
    token_pool_train: tuple[str, ...] | None = None
    token_pool_test: tuple[str, ...] | None = None
    token_pool_val: tuple[str, ...] | None = None
    max_distractor_regions: int = 2
    noise_std: float = 0.1
    grid_rows: int = 4
    grid_dim: int = 64
    region_rows: int = 50
    region_dim: int = 64

    def __post_init__(self):
        self.tokens_per_image = tuple(int(x) for x in self.tokens_per_image)
        for name in ("token_pool_train", "token_pool_test", "token_pool_val"):
            pool = getattr(self, name)
            if pool is not None:
                setattr(self, name, tuple(pool))

    def validate(self) -> None:
        lo, hi = self.tokens_per_image
        if not 1 <= lo <= hi:
            raise ConfigError(f"tokens_per_image range {self.tokens_per_image} is invalid")
        if hi > self.n_attributes:
            raise ConfigError(
                f"tokens_per_image max {hi} exceeds attribute count {self.n_attributes}; "
                "attributes must be distinct per image")
        if not 0.0 <= self.fraction_copy <= 1.0:
            raise ConfigError("fraction_copy must lie in [0, 1]")
        if self.region_dim < self.n_attributes:
            raise ConfigError("region_dim must hold the attribute one-hot")
        if hi + self.max_distractor_regions > self.region_rows:
            raise ConfigError("region_rows too small for tokens plus distractor regions")
        if min(self.n_train, self.n_test, self.n_val) < 0:
            raise ConfigError("instance counts must be non-negative")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")

    def pools(self) -> dict[str, tuple[str, ...]]:
        """Token pools per split; generated from the seed unless given.

        Raises ConfigError when the pools overlap.
        """
        given = {"train": self.token_pool_train, "test": self.token_pool_test,
                 "val": self.token_pool_val}
        sizes = {"train": self.pool_size_train, "test": self.pool_size_test,
                 "val": self.pool_size_val}
        taken = set(_RESERVED)
        for pool in given.values():
            taken.update(pool or ())
        r = rng(self.seed, "synthetic", "pools")
        letters = np.array(list(string.ascii_lowercase))
        pools = {}
        for split in ("train", "test", "val"):
            if given[split] is not None:
                pools[split] = given[split]
                continue
            fresh: list[str] = []
            while len(fresh) < sizes[split]:
                length = int(r.integers(4, 8))
                word = "".join(r.choice(letters, size=length))
                if word not in taken:
                    taken.add(word)
                    fresh.append(word)
            pools[split] = tuple(fresh)
        seen: dict[str, str] = {}
        for split, pool in pools.items():
            for tok in pool:
                if tok in seen and seen[tok] != split:
                    raise ConfigError(f"token {tok!r} appears in both {seen[tok]} and {split} pools")
                seen[tok] = split
        return pools


def synthetic_image_id(split: str, index: int) -> str:
    return f"syn-{split}-{index:06d}"


def parse_synthetic_image_id(image_id: str) -> tuple[str, int] | None:
    parts = image_id.split("-")
    if len(parts) == 3 and parts[0] == "syn" and parts[1] in SPLITS and parts[2].isdigit():
        return parts[1], int(parts[2])
    return None


def render_synthetic(config: SyntheticConfig, split: str, index: int,
                     pool: Sequence[str]) -> QAInstance:
    """Deterministically build instance ``index`` of ``split``."""
    r = rng(config.seed, "synthetic", split, index)
    lo, hi = config.tokens_per_image
    n_tok = int(r.integers(lo, hi + 1))
    tokens = [pool[i] for i in r.choice(len(pool), size=n_tok, replace=False)]
    attrs = r.choice(config.n_attributes, size=n_tok, replace=False)
    n_distract = int(r.integers(0, config.max_distractor_regions + 1))
    distract = r.integers(0, config.n_attributes, size=n_distract)

    regions = r.normal(0.0, config.noise_std, size=(config.region_rows, config.region_dim))
    regions[np.arange(n_tok), attrs] += 1.0
    regions[n_tok + np.arange(n_distract), distract] += 1.0
    grid = r.normal(0.0, config.noise_std, size=(config.grid_rows, config.grid_dim))

    if r.random() < config.fraction_copy:
        target = int(r.integers(n_tok))
        question = COPY_TEMPLATE.format(attribute_name(int(attrs[target])))
        answer = tokens[target]
    else:
        question = COUNT_TEMPLATE
        answer = str(n_tok)
    answer = normalize_answer(answer)
    return QAInstance(
        question_id=f"synq-{split}-{index:06d}",
        image_id=synthetic_image_id(split, index),
        question_tokens=tokenize_question(question),
        ocr_tokens=tokens,
        answers=[answer] * N_ANSWERS,
        features=FeatureBundle(grid, regions),
        split=split,
    )


def generate_splits(config: SyntheticConfig) -> dict[str, list[QAInstance]]:
    config.validate()
    pools = config.pools()
    counts = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    return {split: [render_synthetic(config, split, i, pools[split]) for i in range(n)]
            for split, n in counts.items()}


def generate_synthetic(config: SyntheticConfig) -> tuple[list[QAInstance], list[QAInstance]]:
    splits = generate_splits(config)
    return splits["train"], splits["test"]
