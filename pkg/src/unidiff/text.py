"""Closed-vocabulary prompt handling: tokenizer, embedder, placeholder injection
and the identity-glyph encoder whose features replace ``<p>`` rows."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

TASK_TOKENS = ("<t2i>", "<ie>", "<depth>", "<pose>", "<seg>", "<lg>")
PAD, PLACEHOLDER, NULL = "<pad>", "<p>", "<null>"
SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow", "white", "black", "cyan", "magenta")
SPATIAL = ("left", "right", "above", "below", "top", "bottom", "center", "in", "block", "of", "the", "a", "and")
COUNTS = ("one", "two", "three")
VERBS = ("add", "remove", "recolor", "move", "to")
# "background" is the referring-segmentation target for everything that is not an object
EXTRA = ("background", ":")

VOCABULARY: tuple[str, ...] = (
    (PAD,) + TASK_TOKENS + (PLACEHOLDER, NULL) + SHAPES + COLORS + SPATIAL + COUNTS + VERBS + EXTRA
)
L_MAX = 24


class UnknownTokenError(ValueError):
    def __init__(self, symbol: str):
        super().__init__(f"unknown token {symbol!r}")
        self.symbol = symbol


class PromptTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...] = VOCABULARY

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        if self.tokens[0] != PAD:
            raise ValueError("<pad> must have id 0")

    @property
    def index(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise UnknownTokenError(token) from None

    def dump(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(tuple(Path(path).read_text().splitlines()))


DEFAULT_VOCAB = Vocabulary()


def tokenize(prompt: str, vocab: Vocabulary = DEFAULT_VOCAB, l_max: int = L_MAX) -> np.ndarray:
    """Whitespace tokenization, right-padded with ``<pad>`` to ``l_max``."""
    lookup = vocab.index
    ids = []
    for symbol in prompt.split():
        if symbol not in lookup:
            raise UnknownTokenError(symbol)
        ids.append(lookup[symbol])
    if len(ids) > l_max:
        raise PromptTooLongError(f"prompt has {len(ids)} tokens, limit is {l_max}")
    out = np.zeros(l_max, dtype=np.int64)
    out[: len(ids)] = ids
    return out


def detokenize(ids: Sequence[int], vocab: Vocabulary = DEFAULT_VOCAB) -> str:
    return " ".join(vocab.tokens[i] for i in ids if i != 0)


@dataclass
class PromptEmbeddings:
    """Embedded prompt rows plus bookkeeping.

    ``rows`` is ``(L, d)`` or ``(B, L, d)``; ``valid`` marks non-pad rows (the
    attention key mask); ``placeholder_positions`` lists ``<p>`` indices of a
    single (unbatched) prompt.
    """

    rows: Tensor
    valid: Tensor
    placeholder_positions: tuple[int, ...] = ()

    @staticmethod
    def stack(items: Sequence["PromptEmbeddings"]) -> "PromptEmbeddings":
        return PromptEmbeddings(torch.stack([p.rows for p in items]), torch.stack([p.valid for p in items]))


class PromptEmbedder(nn.Module):
    """Token table plus learned positional rows; ``<null>`` doubles as the CFG null row."""

    def __init__(self, vocab_size: int, l_max: int, d_model: int):
        super().__init__()
        self.l_max = l_max
        self.token = nn.Parameter(torch.randn(vocab_size, d_model) * 0.02)
        self.position = nn.Parameter(torch.randn(l_max, d_model) * 0.02)


def embed(tokens: np.ndarray | Tensor, embedder: PromptEmbedder, vocab: Vocabulary = DEFAULT_VOCAB) -> PromptEmbeddings:
    ids = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    if ids.ndim != 1 or ids.shape[0] != embedder.l_max:
        raise ValueError(f"expected {embedder.l_max} token ids, got shape {tuple(ids.shape)}")
    if int(ids.max()) >= embedder.token.shape[0] or int(ids.min()) < 0:
        raise ValueError("token id outside the vocabulary")
    rows = embedder.token[ids] + embedder.position
    placeholder = vocab.id(PLACEHOLDER)
    positions = tuple(int(i) for i in torch.nonzero(ids == placeholder).flatten())
    return PromptEmbeddings(rows, ids != 0, positions)


def null_prompt(embedder: PromptEmbedder, vocab: Vocabulary = DEFAULT_VOCAB) -> PromptEmbeddings:
    """The unconditional prompt: the learned ``<null>`` row at every position, no masking."""
    row = embedder.token[vocab.id(NULL)]
    rows = row.unsqueeze(0).expand(embedder.l_max, -1)
    return PromptEmbeddings(rows, torch.ones(embedder.l_max, dtype=torch.bool))


def inject_external(embs: PromptEmbeddings, feats: Tensor) -> PromptEmbeddings:
    """Replace the ``<p>`` rows, in order, with the external condition features."""
    positions = embs.placeholder_positions
    if feats.ndim != 2 or feats.shape[0] != len(positions):
        raise ValueError(f"{len(positions)} placeholder rows but features have shape {tuple(feats.shape)}")
    if not positions:
        return embs
    if feats.shape[1] != embs.rows.shape[-1]:
        raise ValueError(f"feature width {feats.shape[1]} != model width {embs.rows.shape[-1]}")
    rows = embs.rows.clone()
    rows[list(positions)] = feats.to(rows.dtype)
    return PromptEmbeddings(rows, embs.valid, positions)


class IdentityEncoder(nn.Module):
    """Two-layer MLP over the raw glyph patch, reshaped to ``n_f`` prompt rows."""

    def __init__(self, d_model: int, n_features: int = 4, crop: int = 16, hidden: int = 256):
        super().__init__()
        self.crop = crop
        self.n_features = n_features
        self.d_model = d_model
        self.fc1 = nn.Linear(crop * crop * 3, hidden)
        self.fc2 = nn.Linear(hidden, n_features * d_model)

    def forward(self, crop: Tensor) -> Tensor:
        if tuple(crop.shape[-3:]) != (self.crop, self.crop, 3):
            raise ValueError(f"identity crop must be {self.crop}x{self.crop}x3, got {tuple(crop.shape)}")
        lead = crop.shape[:-3]
        h = torch.nn.functional.gelu(self.fc1(crop.reshape(*lead, -1)))
        return self.fc2(h).reshape(*lead, self.n_features, self.d_model)


def encode_identity(crop: np.ndarray | Tensor, encoder: IdentityEncoder) -> Tensor:
    param = encoder.fc1.weight
    return encoder(torch.as_tensor(np.asarray(crop), dtype=param.dtype))
