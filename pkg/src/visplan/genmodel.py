"""Unified text/image sequence model.

Inputs are a mix of word tokens, image slot groups (from the understanding
towers) and, for one-step generation, ``N`` learnable image-query slots. Text
and condition slots attend causally; the query slots attend to everything,
including each other, and their outputs are read by the image head as an
``N x K_img`` table of independent categorical logits. Sampling ``K`` images
therefore costs one forward pass. The ``AR`` variant instead emits image
tokens one per forward pass.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import gridworld as gw
from . import vision, vocab
from .vision import FusionMode


class LengthExceeded(ValueError):
    pass


class MissingField(ValueError):
    pass


class Variant(str, enum.Enum):
    ONE_STEP = "OneStep"
    AR = "AR"


class PromptKind(str, enum.Enum):
    INVERSE = "InverseDyn"
    FORWARD = "ForwardDyn"
    PLAN = "Plan"


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    mlp_ratio: int = 4
    vocab_size: int = vocab.VOCAB_SIZE
    grid: int = gw.GRID
    codebook: int = vision.CODEBOOK_SIZE
    d_sem: int = vision.SEMANTIC_DIM
    max_seq_len: int = 192
    variant: str = Variant.ONE_STEP.value
    fusion: str = FusionMode.FULL.value

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        Variant(self.variant)
        FusionMode(self.fusion)

    @property
    def n_image(self) -> int:
        return self.grid * self.grid

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# sequence layout


@dataclass
class Sequence:
    """One model input.

    ``parts`` is an ordered list of ``("text", ids)``, ``("image", tokens, sem)``,
    ``("queries",)`` or ``("ar_image", tokens)``. ``text_positions[i]`` is the
    slot whose output predicts ``text_target[i]``; ``image_positions`` likewise
    for the image head.
    """

    kind: str
    parts: list
    length: int
    text_target: np.ndarray | None = None
    text_positions: np.ndarray | None = None
    image_target: np.ndarray | None = None
    image_positions: np.ndarray | None = None

    def signature(self) -> tuple:
        return tuple((p[0], len(p[1]) if p[0] in ("text", "ar_image") else 0) for p in self.parts)


_SEM_CACHE: dict[bytes, np.ndarray] = {}


def semantic_of(state: np.ndarray) -> np.ndarray:
    key = state.astype(np.int8).tobytes()
    vec = _SEM_CACHE.get(key)
    if vec is None:
        if len(_SEM_CACHE) > 200_000:
            _SEM_CACHE.clear()
        vec = _SEM_CACHE[key] = vision.semantic_encode_state(state).astype(np.float32)
    return vec


def _part_len(part, cfg: ModelConfig) -> int:
    kind = part[0]
    if kind in ("text", "ar_image"):
        return len(part[1])
    if kind == "image":
        return vision.slot_count(cfg.n_image, cfg.fusion)
    return cfg.n_image


def _expand(template: str, fills: dict) -> list:
    parts, words = [], []
    images = list(fills.get(vocab.IMAGE_HERE, []))
    for w in vocab.split_words(template):
        if w == vocab.IMAGE_HERE:
            if words:
                parts.append(("text", np.array(words, dtype=np.int64)))
                words = []
            state = images.pop(0)
            parts.append(("image", vision.tokenize(state), semantic_of(state)))
        elif w in (vocab.ACTION_HERE, vocab.TASK_HERE):
            words.extend(fills[w])
        else:
            words.append(vocab.INDEX[w])
    if words:
        parts.append(("text", np.array(words, dtype=np.int64)))
    return parts


def build_sequence(
    kind: PromptKind | str,
    cfg: ModelConfig,
    x_t: np.ndarray | None = None,
    x_t1: np.ndarray | None = None,
    action: gw.Action | None = None,
    task: gw.TaskSpec | None = None,
    with_target: bool = True,
    with_image: bool = True,
) -> Sequence:
    """Lay out a prompt of the given kind.

    ``with_target=False`` stops before the text target (used for decoding);
    ``with_image=False`` omits the image-generation slots.
    """
    kind = PromptKind(kind)
    required = {
        PromptKind.INVERSE: {"x_t": x_t, "x_t1": x_t1},
        PromptKind.FORWARD: {"x_t": x_t, "action": action},
        PromptKind.PLAN: {"x_t": x_t, "task": task},
    }[kind]
    if with_target and kind is not PromptKind.FORWARD:
        required["action"] = action
    missing = [k for k, v in required.items() if v is None]
    if missing:
        raise MissingField(f"{kind.value} prompt needs {', '.join(missing)}")

    if kind is PromptKind.INVERSE:
        parts = _expand(vocab.INVERSE_PROMPT, {vocab.IMAGE_HERE: [x_t, x_t1]})
    elif kind is PromptKind.FORWARD:
        parts = _expand(vocab.FORWARD_PROMPT, {
            vocab.IMAGE_HERE: [x_t],
            vocab.ACTION_HERE: vocab.action_tokens(action)[:-1],
        })
    else:
        parts = _expand(vocab.PLAN_PROMPT, {
            vocab.IMAGE_HERE: [x_t],
            vocab.TASK_HERE: vocab.task_tokens(task.instruction),
        })

    length = sum(_part_len(p, cfg) for p in parts)
    seq = Sequence(kind.value, parts, length)

    if kind is not PromptKind.FORWARD and with_target:
        target = np.array(vocab.action_tokens(action), dtype=np.int64)
        parts.append(("text", target.copy()))
        seq.text_target = target
        seq.text_positions = np.arange(length - 1, length - 1 + len(target))
        length += len(target)

    if kind is not PromptKind.INVERSE and with_image and (with_target or kind is PromptKind.FORWARD):
        n = cfg.n_image
        if Variant(cfg.variant) is Variant.AR:
            # begin-of-image slot, then teacher-forced tokens when a target is given
            parts.append(("text", np.array([vocab.INDEX[vocab.IMG_OPEN]], dtype=np.int64)))
            seq.image_positions = np.arange(length, length + n)
            length += 1
            if x_t1 is not None:
                parts.append(("ar_image", vision.tokenize(x_t1)[: n - 1]))
                length += n - 1
        else:
            parts.append(("queries",))
            seq.image_positions = np.arange(length, length + n)
            length += n
        if x_t1 is not None:
            seq.image_target = vision.tokenize(x_t1)

    seq.length = length
    if length > cfg.max_seq_len:
        raise LengthExceeded(f"sequence of {length} slots exceeds max_seq_len={cfg.max_seq_len}")
    return seq


def append_text(seq: Sequence, ids, cfg: ModelConfig) -> Sequence:
    """Copy of ``seq`` with extra text tokens; output reads the last slot."""
    ids = np.asarray(ids, dtype=np.int64)
    parts = list(seq.parts)
    if len(ids):
        parts.append(("text", ids))
    length = seq.length + len(ids)
    if length > cfg.max_seq_len:
        raise LengthExceeded(f"sequence of {length} slots exceeds max_seq_len={cfg.max_seq_len}")
    return Sequence(seq.kind, parts, length, text_positions=np.array([length - 1]))


@dataclass
class Batch:
    parts: list
    length: int
    has_queries: bool
    text_positions: torch.Tensor | None
    text_target: torch.Tensor | None
    image_positions: torch.Tensor | None
    image_target: torch.Tensor | None
    size: int = field(default=0)


def collate(seqs: list[Sequence]) -> Batch:
    sig = seqs[0].signature()
    if any(s.signature() != sig for s in seqs[1:]):
        raise ValueError("cannot batch sequences with different layouts")
    first = seqs[0]
    parts = []
    has_queries = False
    for j, p in enumerate(first.parts):
        kind = p[0]
        if kind == "text":
            parts.append(("text", torch.from_numpy(np.stack([s.parts[j][1] for s in seqs]))))
        elif kind == "image":
            toks = torch.from_numpy(np.stack([s.parts[j][1] for s in seqs]))
            sem = torch.from_numpy(np.stack([s.parts[j][2] for s in seqs]))
            parts.append(("image", toks, sem))
        elif kind == "ar_image":
            parts.append(("ar_image", torch.from_numpy(np.stack([s.parts[j][1] for s in seqs]))))
        else:
            has_queries = True
            parts.append(("queries",))

    def stack(attr):
        vals = [getattr(s, attr) for s in seqs]
        return None if vals[0] is None else torch.from_numpy(np.stack(vals))

    return Batch(
        parts=parts,
        length=first.length,
        has_queries=has_queries,
        text_positions=None if first.text_positions is None else torch.from_numpy(first.text_positions),
        text_target=stack("text_target"),
        image_positions=None if first.image_positions is None else torch.from_numpy(first.image_positions),
        image_target=stack("image_target"),
        size=len(seqs),
    )


# --------------------------------------------------------------------------
# network


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.d_model)

    def forward(self, x, allowed):
        B, L, D = x.shape
        q, k, v = self.qkv(x).split(D, dim=-1)
        shape = (B, L, self.n_heads, D // self.n_heads)
        q, k, v = (t.reshape(shape).transpose(1, 2) for t in (q, k, v))
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed)
        return self.out(y.transpose(1, 2).reshape(B, L, D))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.mlp_ratio * cfg.d_model),
            nn.GELU(),
            nn.Linear(cfg.mlp_ratio * cfg.d_model, cfg.d_model),
        )

    def forward(self, x, allowed):
        x = x + self.attn(self.ln1(x), allowed)
        return x + self.mlp(self.ln2(x))


@dataclass
class ModelOutput:
    text_logits: torch.Tensor | None
    image_logits: torch.Tensor | None


class UnifiedModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.img_emb = nn.Embedding(cfg.codebook, d)
        self.row_emb = nn.Parameter(torch.zeros(cfg.grid, d))
        self.col_emb = nn.Parameter(torch.zeros(cfg.grid, d))
        self.seq_pos = nn.Parameter(torch.zeros(cfg.max_seq_len, d))
        self.sem_proj = nn.Linear(cfg.d_sem, d)
        self.img_queries = nn.Parameter(torch.zeros(cfg.n_image, d))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.text_head = nn.Linear(d, cfg.vocab_size)
        self.image_head = nn.Linear(d, cfg.codebook)
        self.forward_calls = 0
        self._masks: dict = {}

    # cell positional embedding = row + column embedding
    def cell_pos(self) -> torch.Tensor:
        g = self.cfg.grid
        return (self.row_emb[:, None, :] + self.col_emb[None, :, :]).reshape(g * g, -1)

    def _mask(self, length: int, query_start: int | None, device) -> torch.Tensor:
        key = (length, query_start)
        m = self._masks.get(key)
        if m is None:
            m = torch.ones(length, length, dtype=torch.bool, device=device).tril()
            if query_start is not None:
                m[query_start:, :] = True
            self._masks[key] = m
        return m

    def embed(self, batch: Batch) -> torch.Tensor:
        pos = self.cell_pos()
        chunks = []
        for p in batch.parts:
            if p[0] == "text":
                chunks.append(self.tok_emb(p[1]))
            elif p[0] == "image":
                spat = vision.spatial_encode(p[1], self.img_emb.weight, pos)
                chunks.append(vision.fuse_understanding(p[2].to(spat.dtype), spat, self.cfg.fusion, self.sem_proj))
            elif p[0] == "ar_image":
                n = p[1].shape[1]
                chunks.append(vision.spatial_encode(p[1], self.img_emb.weight, pos[:n]))
            else:
                chunks.append(self.img_queries.unsqueeze(0).expand(batch.size, -1, -1))
        x = torch.cat(chunks, dim=1)
        if x.shape[1] > self.cfg.max_seq_len:
            raise LengthExceeded(f"sequence of {x.shape[1]} slots exceeds max_seq_len={self.cfg.max_seq_len}")
        return x + self.seq_pos[: x.shape[1]]

    def forward(self, batch: Batch) -> ModelOutput:
        self.forward_calls += 1
        x = self.embed(batch)
        # query slots always close the sequence
        query_start = x.shape[1] - self.cfg.n_image if batch.has_queries else None
        allowed = self._mask(x.shape[1], query_start, x.device)
        for blk in self.blocks:
            x = blk(x, allowed)
        x = self.ln_f(x)
        text = image = None
        if batch.text_positions is not None:
            text = self.text_head(x[:, batch.text_positions])
        if batch.image_positions is not None:
            rows = batch.image_positions[batch.image_positions < x.shape[1]]
            image = self.image_head(x[:, rows])
        return ModelOutput(text, image)

    def census(self) -> dict[str, int]:
        return {name: p.numel() for name, p in self.named_parameters()}

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


INIT_STD = 0.02


def init_params(cfg: ModelConfig, seed: int) -> UnifiedModel:
    """Build a model with deterministic initial weights.

    Weights and embeddings ~ N(0, 0.02); the output projection of every
    residual branch is further scaled by ``1/sqrt(2 * n_layers)``; biases are
    zero and LayerNorm gains one.
    """
    model = UnifiedModel(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    resid_std = INIT_STD / math.sqrt(2 * cfg.n_layers)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("ln") or ".ln" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            elif name.endswith("attn.out.weight") or name.endswith("mlp.2.weight"):
                p.copy_(torch.randn(p.shape, generator=gen) * resid_std)
            else:
                p.copy_(torch.randn(p.shape, generator=gen) * INIT_STD)
    return model


def zero_params(model: UnifiedModel) -> UnifiedModel:
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


# --------------------------------------------------------------------------
# sampling


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_images(logits, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``k`` token images from an ``N x K_img`` factorised distribution.

    Returns ``(samples (k, N), log_probs (k,))``; no model call is made.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().to(torch.float64).cpu().numpy()
    logp = log_softmax_np(np.asarray(logits, dtype=np.float64))
    cdf = np.cumsum(np.exp(logp), axis=-1)
    u = rng.random((k, logp.shape[0]))
    samples = (cdf[None, :, :] < u[:, :, None]).sum(axis=-1)
    samples = np.minimum(samples, logp.shape[1] - 1)
    rows = np.arange(logp.shape[0])
    return samples, logp[rows[None, :], samples].sum(axis=1)


def image_distribution(model: UnifiedModel, seq: Sequence) -> torch.Tensor:
    """``N x K_img`` logits for one context (one forward call)."""
    with torch.no_grad():
        return model(collate([seq])).image_logits[0]


def ar_sample_image(model: UnifiedModel, seq: Sequence, rng: np.random.Generator | None, greedy: bool = False) -> np.ndarray:
    """Autoregressive baseline: one forward call per emitted image token.

    ``seq`` must be an AR-variant prompt built without ``x_t1``, i.e. ending
    in the begin-of-image slot.
    """
    if Variant(model.cfg.variant) is not Variant.AR:
        raise ValueError("ar_sample_image requires the AR variant")
    n = model.cfg.n_image
    start = seq.length
    tokens: list[int] = []
    with torch.no_grad():
        for i in range(n):
            parts = list(seq.parts)
            if tokens:
                parts.append(("ar_image", np.array(tokens, dtype=np.int64)))
            cur = Sequence(seq.kind, parts, start + i, image_positions=np.array([start - 1 + i]))
            if cur.length > model.cfg.max_seq_len:
                raise LengthExceeded(f"sequence of {cur.length} slots exceeds max_seq_len")
            logits = model(collate([cur])).image_logits[0, 0]
            if greedy:
                tokens.append(int(torch.argmax(logits)))
            else:
                p = torch.softmax(logits.double(), -1).numpy()
                tokens.append(int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), len(p) - 1)))
    return np.array(tokens, dtype=np.int64)


@dataclass
class Decoded:
    ids: list[int]
    truncated: bool


def decode_action(
    model: UnifiedModel,
    seq: Sequence,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
    max_len: int = vocab.ACTION_LEN,
) -> Decoded:
    """Generate action tokens after a prompt built with ``with_target=False``."""
    ids: list[int] = []
    with torch.no_grad():
        for _ in range(max_len):
            cur = append_text(seq, ids, model.cfg)
            logits = model(collate([cur])).text_logits[0, -1]
            if mode == "greedy":
                nxt = int(torch.argmax(logits))
            else:
                p = torch.softmax(logits.double(), -1).numpy()
                nxt = int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), len(p) - 1))
            ids.append(nxt)
            if nxt == vocab.END_ID:
                return Decoded(ids, False)
    return Decoded(ids, True)
