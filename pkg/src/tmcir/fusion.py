"""Adaptive token fusion: similarity matrix, threshold matching, weighted
fusion with positional residuals, assembly, pooling, projection.

Matching is many-to-many: every (visual, text) token pair whose cosine
similarity strictly exceeds the threshold is fused; tokens appearing in no
pair are kept with an additive positional residual.  The discrete match
decision is treated as a constant during differentiation; token values and
the similarities of matched pairs still receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import (
    Var,
    concat_rows,
    gather_rows,
    l2_normalize_rows,
    matmul,
    mean_rows,
    reshape,
    transpose,
)
from .encoders import TokenSequence
from .errors import (
    ConfigError,
    ContractViolation,
    DegenerateInputError,
    EmptySequenceError,
    ShapeError,
)


@dataclass(frozen=True)
class FusionConfig:
    threshold: float = 0.7
    epsilon: float = 1e-8
    d: int = 32

    def __post_init__(self):
        if self.d <= 0 or self.d % 2 != 0:
            raise ConfigError(f"model dimension must be a positive even number, got {self.d}")
        if not 0.0 < self.threshold:
            raise ConfigError(f"similarity threshold must be positive, got {self.threshold}")
        if self.epsilon <= 0.0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class MatchSet:
    """Thresholded cross-modal pairs plus the induced index partitions."""

    pairs: list[tuple[int, int]]
    matched_visual: frozenset[int]
    matched_text: frozenset[int]


def _check_token_norms(seq: TokenSequence, modality: str) -> None:
    norms = np.linalg.norm(seq.tokens.data, axis=1)
    bad = np.flatnonzero(norms <= 1e-12)
    if bad.size:
        raise DegenerateInputError(
            f"{modality} token {int(bad[0])} has near-zero norm")


def similarity_matrix(V: TokenSequence, T: TokenSequence) -> Var:
    """Pairwise cosine matrix S, shape (L, M), differentiable in both inputs."""
    if V.length == 0 or T.length == 0:
        raise EmptySequenceError("similarity_matrix needs non-empty sequences")
    if V.tokens.shape[1] != T.tokens.shape[1]:
        raise ShapeError(
            f"token dimension mismatch: {V.tokens.shape} vs {T.tokens.shape}")
    _check_token_norms(V, "visual")
    _check_token_norms(T, "text")
    return matmul(l2_normalize_rows(V.tokens), transpose(l2_normalize_rows(T.tokens)))


def match_pairs(S, cfg: FusionConfig) -> MatchSet:
    """All pairs with similarity strictly above the threshold, lexicographic."""
    data = S.data if isinstance(S, Var) else np.asarray(S)
    ii, jj = np.nonzero(data > cfg.threshold)
    pairs = sorted(zip(ii.tolist(), jj.tolist()))
    return MatchSet(pairs=pairs,
                    matched_visual=frozenset(i for i, _ in pairs),
                    matched_text=frozenset(j for _, j in pairs))


def fuse_pair(v: Var, t: Var, s: Var, p_img, p_txt, cfg: FusionConfig) -> Var:
    """One fused row: (s*v + s*t) / (2s + eps) + 0.5 * (p_img + p_txt)."""
    if s.item() <= 0.0:
        raise ContractViolation(f"fusion weight must be positive, got {s.item()}")
    pos = 0.5 * (np.asarray(p_img) + np.asarray(p_txt)).reshape(1, -1)
    return (s * v + s * t) / (s * 2.0 + cfg.epsilon) + Var(pos, v.tape)


def residual_token(token: Var, pos) -> Var:
    """Unmatched token kept with its positional residual: token + 0.5 * pos."""
    pos = np.asarray(pos, dtype=np.float64).reshape(1, -1)
    if pos.shape[1] != token.shape[1]:
        raise ShapeError(f"position dim {pos.shape[1]} vs token dim {token.shape[1]}")
    return token + Var(0.5 * pos, token.tape)


def assemble(V: TokenSequence, T: TokenSequence, S: Var, matches: MatchSet,
             cfg: FusionConfig) -> Var:
    """Cross-modal sequence Z: fused pairs, then unmatched visual, then text."""
    L, M = V.length, T.length
    parts: list[Var] = []
    if matches.pairs:
        vi = [i for i, _ in matches.pairs]
        tj = [j for _, j in matches.pairs]
        flat = [i * M + j for i, j in matches.pairs]
        s = gather_rows(reshape(S, L * M, 1), flat)           # (k, 1)
        fused = (gather_rows(V.tokens, vi) + gather_rows(T.tokens, tj)) \
            * (s / (s * 2.0 + cfg.epsilon))
        pos = 0.5 * (V.positions[vi] + T.positions[tj])
        parts.append(fused + Var(pos, V.tokens.tape))
    un_v = [i for i in range(L) if i not in matches.matched_visual]
    if un_v:
        parts.append(gather_rows(V.tokens, un_v)
                     + Var(0.5 * V.positions[un_v], V.tokens.tape))
    un_t = [j for j in range(M) if j not in matches.matched_text]
    if un_t:
        parts.append(gather_rows(T.tokens, un_t)
                     + Var(0.5 * T.positions[un_t], T.tokens.tape))
    return concat_rows(parts)


def _project(pooled: Var, projection) -> Var:
    if projection is None:
        return pooled
    w, b = projection
    return matmul(pooled, w) + b


def compose_query(V: TokenSequence, T: TokenSequence, cfg: FusionConfig,
                  projection=None) -> Var:
    """Full fusion path to the final query embedding, L2-normalized.

    ``projection`` is an affine pair ``(w, b)`` of d->d variables, or None for
    identity.
    """
    S = similarity_matrix(V, T)
    matches = match_pairs(S, cfg)
    Z = assemble(V, T, S, matches, cfg)
    return l2_normalize_rows(_project(mean_rows(Z), projection))


def compose_query_no_fusion(V: TokenSequence, T: TokenSequence,
                            projection=None) -> Var:
    """Ablation path: pool the raw concatenated token sequences, no matching."""
    if V.length == 0 or T.length == 0:
        raise EmptySequenceError("compose_query needs non-empty sequences")
    pooled = mean_rows(concat_rows([V.tokens, T.tokens]))
    return l2_normalize_rows(_project(pooled, projection))


# -- independent straight-line oracle (kept for verification only) --


def compose_query_reference(v_tokens: np.ndarray, t_tokens: np.ndarray,
                            p_img: np.ndarray, p_txt: np.ndarray,
                            threshold: float, epsilon: float) -> tuple[np.ndarray, list]:
    """Plain-numpy re-implementation of the whole fusion pipeline.

    Brute-force O(L*M) cosine loop, direct formula evaluation, identity
    projection.  Returns (normalized query row, match pair list).
    """
    L, d = v_tokens.shape
    M = t_tokens.shape[0]
    S = np.empty((L, M))
    for i in range(L):
        for j in range(M):
            S[i, j] = float(v_tokens[i] @ t_tokens[j]) / (
                np.linalg.norm(v_tokens[i]) * np.linalg.norm(t_tokens[j]))
    pairs = [(i, j) for i in range(L) for j in range(M) if S[i, j] > threshold]
    rows = []
    for i, j in pairs:
        s = S[i, j]
        rows.append((s * v_tokens[i] + s * t_tokens[j]) / (2.0 * s + epsilon)
                    + 0.5 * (p_img[i] + p_txt[j]))
    mi = {i for i, _ in pairs}
    mt = {j for _, j in pairs}
    for i in range(L):
        if i not in mi:
            rows.append(v_tokens[i] + 0.5 * p_img[i])
    for j in range(M):
        if j not in mt:
            rows.append(t_tokens[j] + 0.5 * p_txt[j])
    z = np.mean(np.stack(rows), axis=0)
    return z / np.linalg.norm(z), pairs
