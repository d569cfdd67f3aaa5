"""The LoRRA network.

Two attention-and-fuse branches feed one answer head:

* the VQA branch attends over grid and region image features with the
  question embedding as query and fuses the pooled image vector with the
  question by an elementwise product of projections;
* the reading branch does the same over OCR slot features, and appends the
  per-slot attention weights (in detection order) to the pooled vector so
  the head can tell *which* slot was attended.

The head is a two-layer MLP emitting N vocabulary logits followed by M copy
logits, one per OCR slot. Invalid slots carry a -inf sentinel.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data import QAInstance, Vocabulary, normalize_answer
from .embeddings import (
    MAX_OCR_TOKENS,
    MAX_QUESTION_LEN,
    EmbeddingTable,
    QuestionEncoder,
    SubwordEmbedder,
    embed_ocr_tokens,
)
from .errors import ConfigError, ContractError, DataError, PredictionError
from .seeding import derive_seed

NEG_INF = float("-inf")


@dataclass
class ModelConfig:
    word_dim: int = 64
    hidden: int = 128
    ocr_dim: int = 64
    grid_rows: int = 4
    grid_dim: int = 64
    region_rows: int = 50
    region_dim: int = 64
    buckets: int = 4096
    attention_dim: int = 128
    combine_dim: int = 128
    mlp_hidden: int = 256
    max_question_len: int = MAX_QUESTION_LEN
    max_ocr: int = MAX_OCR_TOKENS
    # OCR slot j also sees region row j (the appearance of its box).
    ocr_region_context: bool = True
    # appended OCR attention weights are multiplied by max_ocr, so a uniform
    # distribution over T tokens gives entries M/T rather than 1/T
    scale_attention_weights: bool = True
    # start the copy path as a gated identity from appended weight j to copy
    # logit j (gain copy_path_gain); needs combine_dim and mlp_hidden >= max_ocr
    copy_path_init: bool = True
    copy_path_gain: float = 0.1
    oov_policy: str = "unk_row"
    use_image: bool = True
    use_question: bool = True
    use_ocr_features: bool = True
    use_copy: bool = True
    use_vocab: bool = True
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def ocr_row_dim(self) -> int:
        return self.ocr_dim + (self.region_dim if self.ocr_region_context else 0)


ABLATIONS = {
    "Q": dict(use_image=False, use_question=True, use_ocr_features=False, use_copy=False, use_vocab=True),
    "I": dict(use_image=True, use_question=False, use_ocr_features=False, use_copy=False, use_vocab=True),
    "I+Q": dict(use_image=True, use_question=True, use_ocr_features=False, use_copy=False, use_vocab=True),
    "Pythia+O": dict(use_image=True, use_question=True, use_ocr_features=True, use_copy=False, use_vocab=True),
    "Pythia+O+C": dict(use_image=True, use_question=True, use_ocr_features=True, use_copy=True, use_vocab=False),
    "Pythia+LoRRA": dict(use_image=True, use_question=True, use_ocr_features=True, use_copy=True, use_vocab=True),
}


class AttentionUnit(nn.Module):
    """Top-down attention: score_k = w . (relu(F row_k) * relu(Q query))."""

    def __init__(self, d_in: int, d_query: int, d_attn: int):
        super().__init__()
        self.d_in, self.d_query = d_in, d_query
        self.feat_proj = nn.Linear(d_in, d_attn)
        self.query_proj = nn.Linear(d_query, d_attn)
        self.score = nn.Linear(d_attn, 1)

    def scores(self, rows: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
        joint = torch.relu(self.feat_proj(rows)) * torch.relu(self.query_proj(query)).unsqueeze(-2)
        return self.score(joint).squeeze(-1)

    def forward(self, rows, mask, query):
        return attend(self, rows, mask, query)


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over ``mask``ed entries; rows with an empty mask give all zeros."""
    s = scores.masked_fill(~mask, NEG_INF)
    any_valid = mask.any(dim=-1, keepdim=True)
    top = torch.where(any_valid, s.amax(dim=-1, keepdim=True), torch.zeros_like(s[..., :1]))
    e = torch.exp(s - top.detach())
    return e / e.sum(dim=-1, keepdim=True).clamp_min(torch.finfo(e.dtype).tiny)


def attend(unit: AttentionUnit, rows: torch.Tensor, mask: torch.Tensor, query: torch.Tensor):
    """Weighted average of ``rows`` under question-conditioned attention.

    Accepts a single example (rows K x D) or a batch (B x K x D). Returns
    ``(weights, pooled)``.
    """
    single = rows.dim() == 2
    if single:
        rows, mask, query = rows.unsqueeze(0), mask.unsqueeze(0), query.unsqueeze(0)
    if rows.dim() != 3 or rows.shape[-1] != unit.d_in or query.shape[-1] != unit.d_query:
        raise ContractError(
            f"attend: rows {tuple(rows.shape)} / query {tuple(query.shape)} do not match "
            f"unit dims ({unit.d_in}, {unit.d_query})")
    if mask.shape != rows.shape[:2] or rows.shape[1] < 1:
        raise ContractError(f"attend: mask {tuple(mask.shape)} does not match rows {tuple(rows.shape)}")
    weights = masked_softmax(unit.scores(rows, query), mask.bool())
    pooled = torch.einsum("bk,bkd->bd", weights, rows)
    if single:
        return weights[0], pooled[0]
    return weights, pooled


class Combine(nn.Module):
    """Hadamard fusion of two inputs projected to a shared dimension."""

    def __init__(self, d_x: int, d_y: int, d_out: int):
        super().__init__()
        self.proj_x = nn.Linear(d_x, d_out)
        self.proj_y = nn.Linear(d_y, d_out)

    def forward(self, x, y):
        return combine(torch.relu(self.proj_x(x)), torch.relu(self.proj_y(y)))


def combine(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != y.shape[-1]:
        raise ContractError(f"combine: projected dims differ ({x.shape[-1]} vs {y.shape[-1]})")
    return x * y


@dataclass
class Batch:
    """Tensorized instances, ready for :meth:`LorraModel.forward_batch`."""

    q_ids: torch.Tensor
    q_mask: torch.Tensor
    grid: torch.Tensor
    regions: torch.Tensor
    ocr_emb: torch.Tensor
    ocr_mask: torch.Tensor

    def __len__(self):
        return self.q_ids.shape[0]

    def select(self, idx) -> "Batch":
        return Batch(*(getattr(self, f.name)[idx] for f in fields(self)))

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(self.q_ids, self.q_mask, self.grid.to(dtype), self.regions.to(dtype),
                     self.ocr_emb.to(dtype), self.ocr_mask)


@dataclass
class ModelOutput:
    logits: torch.Tensor
    ocr_attention: torch.Tensor
    image_attention: dict[str, torch.Tensor]
    ocr_branch_features: torch.Tensor | None

    def __getitem__(self, i: int) -> "ModelOutput":
        return ModelOutput(
            self.logits[i], self.ocr_attention[i],
            {k: v[i] for k, v in self.image_attention.items()},
            None if self.ocr_branch_features is None else self.ocr_branch_features[i])


@dataclass
class Prediction:
    answer: str
    source: str
    index: int
    confidence: float
    normalized: str = field(default="")


class LorraModel(nn.Module):
    def __init__(self, config: ModelConfig, vocab: Vocabulary, question_words: Sequence[str]):
        super().__init__()
        self.config = config
        self.vocab = vocab
        c = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(c.seed, "model-init"))
            table = EmbeddingTable(question_words, c.word_dim, oov_policy=c.oov_policy)
            self.question_encoder = QuestionEncoder(table, c.hidden, c.max_question_len)
            self.ocr_embedder = SubwordEmbedder(c.ocr_dim, c.buckets, seed=c.seed)
            self.grid_attention = AttentionUnit(c.grid_dim, c.hidden, c.attention_dim)
            self.region_attention = AttentionUnit(c.region_dim, c.hidden, c.attention_dim)
            self.ocr_attention = AttentionUnit(c.ocr_row_dim, c.hidden, c.attention_dim)
            self.vqa_combine = Combine(c.grid_dim + c.region_dim, c.hidden, c.combine_dim)
            self.ocr_combine = Combine(c.ocr_row_dim + c.max_ocr, c.hidden, c.combine_dim)
            # first head layer split by input branch: concat(f_vqa, f_ocr) @ W
            self.head_vqa = nn.Linear(c.combine_dim, c.mlp_hidden)
            self.head_ocr = nn.Linear(c.combine_dim, c.mlp_hidden, bias=False)
            self.head_out = nn.Linear(c.mlp_hidden, len(vocab) + c.max_ocr)
            if c.copy_path_init:
                self._init_copy_path()

    @torch.no_grad()
    def _init_copy_path(self):
        """Reserve the first M combine and hidden units for a weight-to-slot identity.

        Without this the appended attention weights reach the copy logits only
        through random projections, and the attention receives almost no
        signal until that mapping has formed by chance.
        """
        c = self.config
        M, N, off = c.max_ocr, len(self.vocab), c.ocr_row_dim
        if c.combine_dim < M or c.mlp_hidden < M:
            raise ConfigError(f"copy_path_init needs combine_dim and mlp_hidden >= max_ocr ({M})")
        eye = torch.eye(M)
        px, py = self.ocr_combine.proj_x, self.ocr_combine.proj_y
        px.weight[:M].zero_()
        px.weight[:M, off:off + M] = eye
        px.bias[:M].zero_()
        py.weight[:M].zero_()
        py.bias[:M].fill_(1.0)
        self.head_ocr.weight[:M].zero_()
        self.head_ocr.weight[:M, :M] = eye
        self.head_vqa.weight[:M].zero_()
        self.head_vqa.bias[:M].zero_()
        self.head_out.weight[:, :M].zero_()
        self.head_out.weight[N:N + M, :M] = eye * c.copy_path_gain

    @property
    def n_vocab(self) -> int:
        return len(self.vocab)

    @property
    def n_slots(self) -> int:
        return self.config.max_ocr

    # -- input preparation -------------------------------------------------
    def prepare(self, instances: Sequence[QAInstance]) -> Batch:
        c = self.config
        n = len(instances)
        q_ids = np.zeros((n, c.max_question_len), dtype=np.int64)
        q_mask = np.zeros((n, c.max_question_len), dtype=bool)
        grid = np.zeros((n, c.grid_rows, c.grid_dim), dtype=np.float32)
        regions = np.zeros((n, c.region_rows, c.region_dim), dtype=np.float32)
        ocr = np.zeros((n, c.max_ocr, c.ocr_dim), dtype=np.float32)
        ocr_mask = np.zeros((n, c.max_ocr), dtype=bool)
        for i, inst in enumerate(instances):
            ids, mask = self.question_encoder.ids(inst.question_tokens)
            q_ids[i], q_mask[i] = ids, mask
            f = inst.features
            if f.grid.shape != (c.grid_rows, c.grid_dim) or f.regions.shape != (c.region_rows, c.region_dim):
                raise ContractError(
                    f"instance {inst.question_id}: features {f.grid.shape}/{f.regions.shape} do not "
                    f"match model ({c.grid_rows}, {c.grid_dim})/({c.region_rows}, {c.region_dim})")
            grid[i], regions[i] = f.grid, f.regions
            ocr[i], ocr_mask[i] = embed_ocr_tokens(self.ocr_embedder, inst.ocr_tokens, c.max_ocr)
        dtype = self.head_out.weight.dtype
        return Batch(torch.from_numpy(q_ids), torch.from_numpy(q_mask),
                     torch.from_numpy(grid).to(dtype), torch.from_numpy(regions).to(dtype),
                     torch.from_numpy(ocr).to(dtype), torch.from_numpy(ocr_mask))

    def ocr_rows(self, batch: Batch) -> torch.Tensor:
        if not self.config.ocr_region_context:
            return batch.ocr_emb
        c = self.config
        ctx = batch.regions[:, : c.max_ocr]
        if ctx.shape[1] < c.max_ocr:
            pad = ctx.new_zeros(ctx.shape[0], c.max_ocr - ctx.shape[1], ctx.shape[2])
            ctx = torch.cat([ctx, pad], dim=1)
        return torch.cat([batch.ocr_emb, ctx], dim=-1)

    # -- branches ------------------------------------------------------------
    def encode_questions(self, batch: Batch) -> torch.Tensor:
        q = self.question_encoder(batch.q_ids, batch.q_mask)
        return q if self.config.use_question else torch.zeros_like(q)

    def f_vqa(self, grid: torch.Tensor, regions: torch.Tensor, q_emb: torch.Tensor):
        if not self.config.use_image:
            grid, regions = torch.zeros_like(grid), torch.zeros_like(regions)
        g_mask = torch.ones(grid.shape[:2], dtype=torch.bool)
        r_mask = torch.ones(regions.shape[:2], dtype=torch.bool)
        g_w, g_pool = attend(self.grid_attention, grid, g_mask, q_emb)
        r_w, r_pool = attend(self.region_attention, regions, r_mask, q_emb)
        fused = self.vqa_combine(torch.cat([g_pool, r_pool], dim=-1), q_emb)
        return fused, {"grid": g_w, "regions": r_w}

    def f_ocr(self, ocr_rows: torch.Tensor, mask: torch.Tensor, q_emb: torch.Tensor):
        weights, pooled = attend(self.ocr_attention, ocr_rows, mask, q_emb)
        scale = float(self.config.max_ocr) if self.config.scale_attention_weights else 1.0
        branch = torch.cat([pooled, weights * scale], dim=-1)
        return self.ocr_combine(branch, q_emb), weights, branch

    def forward_batch(self, batch: Batch) -> ModelOutput:
        c = self.config
        q = self.encode_questions(batch)
        vqa, img_att = self.f_vqa(batch.grid, batch.regions, q)
        hidden = self.head_vqa(vqa)
        if c.use_ocr_features:
            ocr, ocr_w, branch = self.f_ocr(self.ocr_rows(batch), batch.ocr_mask, q)
            hidden = hidden + self.head_ocr(ocr)
        else:
            ocr_w = batch.ocr_emb.new_zeros(batch.ocr_mask.shape)
            branch = None
        logits = self.head_out(torch.relu(hidden))
        logits = logits.masked_fill(~self.logit_mask(batch.ocr_mask), NEG_INF)
        return ModelOutput(logits, ocr_w, img_att, branch)

    def logit_mask(self, ocr_mask: torch.Tensor) -> torch.Tensor:
        """Which of the N+M logits are live for each example."""
        n = ocr_mask.shape[0]
        vocab = torch.full((n, self.n_vocab), self.config.use_vocab, dtype=torch.bool)
        copy = ocr_mask.bool() if self.config.use_copy else torch.zeros_like(ocr_mask, dtype=torch.bool)
        return torch.cat([vocab, copy], dim=1)

    def forward(self, batch: Batch) -> ModelOutput:
        return self.forward_batch(batch)

    def backbone_logits(self, batch: Batch) -> torch.Tensor:
        """Vocabulary logits of the image+question model alone (no reading branch)."""
        q = self.encode_questions(batch)
        vqa, _ = self.f_vqa(batch.grid, batch.regions, q)
        return self.head_out(torch.relu(self.head_vqa(vqa)))[:, : self.n_vocab]


def forward(model: LorraModel, instance: QAInstance) -> ModelOutput:
    return model.forward_batch(model.prepare([instance]))[0]


def predict(output: ModelOutput, ocr_tokens: Sequence[str], vocab: Vocabulary) -> Prediction:
    """Arg-max over live logits (lowest index wins ties); copy when index >= N."""
    logits = output.logits.detach().to(torch.float64).cpu().numpy()
    finite = np.isfinite(logits)
    if not finite.any():
        raise PredictionError("no live logits: empty vocabulary and no OCR tokens")
    index = int(np.argmax(np.where(finite, logits, -np.inf)))
    n = len(vocab)
    if index >= n:
        answer, source = ocr_tokens[index - n], "copy"
    else:
        answer, source = vocab.entries[index], "vocab"
    return Prediction(answer, source, index, float(logits[index]), normalize_answer(answer))


def predict_batch(output: ModelOutput, instances: Sequence[QAInstance], vocab: Vocabulary) -> list[Prediction]:
    return [predict(output[i], inst.ocr_tokens, vocab) for i, inst in enumerate(instances)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_KEY = "lorra"


def save_checkpoint(model: LorraModel, path, extra: dict | None = None) -> None:
    """Single-file container: JSON header + named row-major f32 tensors."""
    from safetensors.torch import save_file

    header = {
        "config": asdict(model.config),
        "n_vocab": model.n_vocab,
        "n_slots": model.n_slots,
        "vocab": {"entries": model.vocab.entries,
                  "counts": [model.vocab.frequency.get(a, 0) for a in model.vocab.entries]},
        "question_words": model.question_encoder.table.words,
        "shapes": {},
    }
    if extra:
        header["extra"] = extra
    tensors = {}
    for name, t in model.state_dict().items():
        tensors[name] = t.detach().to(torch.float32).contiguous().cpu()
        header["shapes"][name] = list(t.shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(path), metadata={CHECKPOINT_KEY: json.dumps(header, sort_keys=True)})


def read_checkpoint_header(path) -> dict:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
    if CHECKPOINT_KEY not in meta:
        raise DataError(f"{path}: not a LoRRA checkpoint")
    return json.loads(meta[CHECKPOINT_KEY])


def load_checkpoint(path) -> LorraModel:
    from safetensors.torch import load_file

    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: checkpoint not found")
    header = read_checkpoint_header(path)
    config = ModelConfig.from_dict(header["config"])
    v = header["vocab"]
    model = LorraModel(config, Vocabulary(v["entries"], dict(zip(v["entries"], v["counts"]))),
                       header["question_words"])
    if model.n_vocab != header["n_vocab"] or model.n_slots != header["n_slots"]:
        raise DataError(f"{path}: header N/M disagree with vocabulary/config")
    tensors = load_file(str(path))
    expected = model.state_dict()
    if set(tensors) != set(expected):
        raise DataError(f"{path}: tensor names differ from model ({sorted(set(tensors) ^ set(expected))})")
    for name, t in tensors.items():
        if list(t.shape) != header["shapes"].get(name) or t.shape != expected[name].shape:
            raise DataError(f"{path}: tensor {name} has shape {tuple(t.shape)}, "
                            f"expected {tuple(expected[name].shape)}")
    model.load_state_dict(tensors)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(math.prod(p.shape) for p in model.parameters())
