"""Single-head attention blocks whose projections sit on adapter stacks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Union

import numpy as np

from . import numkit as nk
from .lora import AdapterStack, effective_weight, forgetting_penalty
from .numkit import Operand, ShapeError

Projection = Union[np.ndarray, AdapterStack]


@dataclass
class AttentionWeights:
    """W^Q, W^K, W^V. Cross-attention keeps ``w_q`` a plain frozen matrix."""

    w_q: Projection
    w_k: AdapterStack
    w_v: AdapterStack

    def __post_init__(self):
        cols = {_shape(self.w_q)[1], self.w_k.shape[1], self.w_v.shape[1]}
        if len(cols) != 1:
            raise ShapeError(f"projection output dims disagree: {sorted(cols)}")

    @property
    def d_prime(self) -> int:
        return self.w_k.shape[1]

    @property
    def self_attention(self) -> bool:
        return isinstance(self.w_q, AdapterStack)

    def stacks(self) -> dict[str, AdapterStack]:
        out = {"k": self.w_k, "v": self.w_v}
        if isinstance(self.w_q, AdapterStack):
            out = {"q": self.w_q, **out}
        return out


def _shape(p):
    return p.shape if isinstance(p, AdapterStack) else nk.value(p).shape


# ``live`` maps site_id -> (A, B) tape nodes for the pair being trained;
# ``dense`` maps projection name -> a directly trained full matrix.
Live = Optional[Mapping[str, tuple]]


def projection(p: Projection, live: Live = None) -> Operand:
    if isinstance(p, AdapterStack):
        if live and p.site_id in live:
            return effective_weight(p, *live[p.site_id])
        return effective_weight(p)
    return p


def _attend(q, k, v, d_prime, mask=None):
    logits = nk.scale(nk.matmul(q, nk.transpose(k)), 1.0 / math.sqrt(d_prime))
    if mask is not None:
        logits = nk.add(logits, mask)
    return nk.matmul(nk.row_softmax(logits), v)


def cross_attention(f: Operand, c: Operand, w: AttentionWeights, live: Live = None,
                    override: Optional[Mapping[str, Operand]] = None) -> Operand:
    """softmax(Q K^T / sqrt(d')) V with Q = f W^Q, K = c W^K, V = c W^V.

    ``override`` replaces a whole projection ("q", "k", "v") by a given
    operand, used by baselines that fine-tune the dense matrices.
    """
    override = override or {}
    wq = override.get("q", w.w_q if not isinstance(w.w_q, AdapterStack) else projection(w.w_q, live))
    wk = override.get("k", projection(w.w_k, live))
    wv = override.get("v", projection(w.w_v, live))
    fq, cq = nk.value(f).shape, nk.value(c).shape
    if fq[1] != nk.value(wq).shape[0] or cq[1] != nk.value(wk).shape[0]:
        raise ShapeError(f"cross_attention: f {fq} / c {cq} do not match W^Q {nk.value(wq).shape}, W^K {nk.value(wk).shape}")
    return _attend(nk.matmul(f, wq), nk.matmul(c, wk), nk.matmul(c, wv), w.d_prime)


def group_mask(groups) -> np.ndarray:
    """Additive mask letting a row attend only to rows with the same group id."""
    ids = np.asarray(groups)
    return np.where(ids[:, None] == ids[None, :], 0.0, -np.inf)


def self_attention_qkv(x: Operand, w: AttentionWeights, live: Live = None,
                       override: Optional[Mapping[str, Operand]] = None,
                       groups=None) -> Operand:
    """Self-attention with all three projections adapted.

    ``groups`` (one id per row) packs several independent sequences into one
    matrix; rows only attend within their own group.
    """
    if not w.self_attention:
        raise ShapeError("self_attention_qkv needs adapter stacks on Q, K and V")
    override = override or {}
    wq = override.get("q", projection(w.w_q, live))
    wk = override.get("k", projection(w.w_k, live))
    wv = override.get("v", projection(w.w_v, live))
    xs = nk.value(x).shape
    if xs[1] != nk.value(wq).shape[0]:
        raise ShapeError(f"self_attention_qkv: x {xs} does not match W^Q {nk.value(wq).shape}")
    mask = None
    if groups is not None:
        if len(groups) != xs[0]:
            raise ShapeError(f"{len(groups)} group ids for {xs[0]} rows")
        mask = group_mask(groups)
    return _attend(nk.matmul(x, wq), nk.matmul(x, wk), nk.matmul(x, wv), w.d_prime, mask)


def penalty(w: AttentionWeights, live: Mapping[str, tuple]) -> Operand:
    """Sum of forgetting penalties over every adapted site that has a live pair."""
    total = None
    for stack in w.stacks().values():
        if stack.site_id not in live or stack.active is None:
            continue
        term = forgetting_penalty(stack, *live[stack.site_id])
        total = term if total is None else nk.add(total, term)
    return np.zeros((1, 1)) if total is None else total
