"""Tool codebook: top-K cosine retrieval plus VQ-style training signals.

Selection itself is not differentiable. Gradients reach the trainable parts
through three channels only:

* quantisation loss  -> selected codebook rows
* commitment loss    -> the query vector
* straight-through   -> the query vector (downstream LM gradient)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DTYPE, EPS, DegenerateVectorError, Param, ShapeError


class CapacityError(ValueError):
    pass


@dataclass
class ToolCodebook:
    prompts: Param

    @property
    def N(self) -> int:
        return self.prompts.value.shape[0]

    @property
    def C(self) -> int:
        return self.prompts.value.shape[1]


@dataclass(frozen=True)
class Selection:
    indices: tuple[int, ...]
    similarities: tuple[float, ...]
    query: np.ndarray

    @property
    def K(self):
        return len(self.indices)


@dataclass
class VQResult:
    loss: float
    quant_loss: float
    commit_loss: float
    grad_prompts: np.ndarray  # N x C, zero outside selected rows
    grad_query: np.ndarray  # C


def init_codebook(N: int, C: int, seed) -> ToolCodebook:
    if N < 1 or C < 1:
        raise ValueError("codebook needs N, C >= 1")
    rng = np.random.default_rng(seed)
    rows = rng.normal(0.0, 1.0 / np.sqrt(C), size=(N, C))
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    # a zero draw is astronomically unlikely but would break the norm invariant
    while np.any(norms <= EPS):
        bad = norms[:, 0] <= EPS
        rows[bad] = rng.normal(0.0, 1.0 / np.sqrt(C), size=(int(bad.sum()), C))
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
    return ToolCodebook(Param(rows / norms))


def similarities(codebook: ToolCodebook, query) -> np.ndarray:
    """Cosine similarity of ``query`` against every codebook row."""
    q = np.asarray(query, dtype=DTYPE)
    P = codebook.prompts.value
    if q.shape != (P.shape[1],):
        raise ShapeError(f"query shape {q.shape} vs codebook width {P.shape[1]}")
    qn = np.linalg.norm(q)
    if qn <= EPS:
        raise DegenerateVectorError("zero query vector")
    pn = np.linalg.norm(P, axis=1)
    if np.any(pn <= EPS):
        raise DegenerateVectorError("codebook row collapsed to zero norm")
    # normalise first so a scaled query gives bit-identical similarities
    return np.clip((P / pn[:, None]) @ (q / qn), -1.0, 1.0)


def select_topk(codebook: ToolCodebook, query, K: int) -> Selection:
    if K > codebook.N:
        raise CapacityError(f"K={K} exceeds codebook size N={codebook.N}")
    if K < 1:
        raise ValueError("K must be >= 1")
    sims = similarities(codebook, query)
    # stable sort on -sim keeps the lower index first among ties
    order = np.argsort(-sims, kind="stable")[:K]
    return Selection(
        indices=tuple(int(i) for i in order),
        similarities=tuple(float(sims[i]) for i in order),
        query=np.array(query, dtype=DTYPE),
    )


def vq_losses(query, selection: Selection, codebook: ToolCodebook, lam1: float, lam2: float) -> VQResult:
    """Quantisation + commitment losses, averaged over the K selected rows.

    The two terms have the same forward value; stop-gradient only decides
    who receives each term's gradient.
    """
    q = np.asarray(query, dtype=DTYPE)
    P = codebook.prompts.value
    if q.shape != (P.shape[1],):
        raise ShapeError(f"query width {q.shape} vs codebook width {P.shape[1]}")
    idx = np.asarray(selection.indices, dtype=int)
    K = len(idx)
    diff = P[idx] - q  # K x C
    sq = float(np.sum(diff * diff)) / K

    grad_P = np.zeros_like(P)
    if lam1:
        np.add.at(grad_P, idx, (2.0 * lam1 / K) * diff)
    grad_q = np.zeros_like(q)
    if lam2:
        grad_q = (2.0 * lam2 / K) * (-diff).sum(axis=0)
    return VQResult(
        loss=lam1 * sq + lam2 * sq,
        quant_loss=sq,
        commit_loss=sq,
        grad_prompts=grad_P,
        grad_query=grad_q,
    )


def straight_through_prompt(query, selected_prompt) -> np.ndarray:
    """Forward value of ``q + sg[P - q]``.

    The returned row equals ``selected_prompt`` bit for bit. On the way back a
    gradient arriving at this row is handed to the query unchanged and the
    codebook row gets nothing (see ``straight_through_backward``).
    """
    q = np.asarray(query, dtype=DTYPE)
    p = np.asarray(selected_prompt, dtype=DTYPE)
    if q.shape != p.shape:
        raise ShapeError(f"{q.shape} vs {p.shape}")
    return p.copy()


def straight_through_backward(grad_effective):
    """Returns (grad wrt query, grad wrt codebook row)."""
    g = np.asarray(grad_effective, dtype=DTYPE)
    return g.copy(), np.zeros_like(g)
