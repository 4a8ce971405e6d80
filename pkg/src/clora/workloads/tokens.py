"""Concept token embeddings and condition composition."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import numkit as nk
from ..lora import LifecycleError

OBJECT_ID = 0
RANDOM_STD = 0.02
WORD_INIT_VAR = 1e-4


@dataclass
class TokenTable:
    dim: int
    embeddings: dict = field(default_factory=dict)
    object_id: Optional[int] = OBJECT_ID
    frozen: set = field(default_factory=set)

    @property
    def concept_ids(self) -> list[int]:
        return sorted(k for k in self.embeddings if k != self.object_id)

    def get(self, token_id: int) -> np.ndarray:
        try:
            return self.embeddings[token_id]
        except KeyError:
            raise LifecycleError(f"token {token_id} is not initialized") from None

    def set(self, token_id: int, emb: np.ndarray):
        if token_id in self.frozen:
            raise LifecycleError(f"token {token_id} is frozen")
        self.embeddings[token_id] = np.asarray(emb, dtype=np.float64).reshape(1, self.dim)

    def freeze(self, token_id: int):
        emb = self.get(token_id).copy()
        emb.flags.writeable = False
        self.embeddings[token_id] = emb
        self.frozen.add(token_id)


def init_concept_token(table: TokenTable, t: int, seed, strategy: str = "random") -> TokenTable:
    """Add concept token ``t`` to the table.

    ``random`` draws N(0, 0.02^2) per coordinate; ``word-init`` copies the
    shared object embedding with N(0, 1e-4) jitter.
    """
    if t in table.embeddings:
        raise LifecycleError(f"token {t} already initialized")
    gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if strategy == "random":
        emb = gen.normal(0.0, RANDOM_STD, size=(1, table.dim))
    elif strategy == "word-init":
        base = table.get(table.object_id)
        emb = base + gen.normal(0.0, np.sqrt(WORD_INIT_VAR), size=(1, table.dim))
    else:
        raise ValueError(f"unknown token strategy {strategy!r}")
    table.embeddings[t] = emb
    return table


def compose_condition(table: TokenTable, t: int, include_object: bool = False, token=None):
    """Condition rows for concept ``t``: ``[V*_t]`` or ``[V*_t ; object]``.

    ``token`` substitutes a tape node for the concept row while it trains.
    """
    row = table.get(t) if token is None else token
    if not include_object:
        return row
    return nk.concat_rows([row, table.get(table.object_id)])
