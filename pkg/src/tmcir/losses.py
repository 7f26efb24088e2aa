"""Contrastive objectives for both training stages.

One InfoNCE form covers stage 1 (image/text alignment, learnable temperature)
and stage 2 (composed query vs target, fixed temperature): temperature-scaled
cosine logits, softmax of the positive pair against all in-batch targets.
Log-sum-exp uses max subtraction for stability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import (
    Var,
    exp,
    gather_rows,
    log,
    matmul,
    reshape,
    row_sum,
    total_sum,
    transpose,
)
from .errors import ConfigError, ContractViolation, EmptySequenceError

# 1/0.07, the usual contrastive-pretraining convention
DEFAULT_TEMPERATURE = 14.285

UNIT_ROW_TOL = 1e-9


@dataclass(frozen=True)
class LossConfig:
    """Temperature acts as a similarity multiplier inside the softmax.

    When learnable, training stores it as a log so positivity is structural.
    """

    temperature: float = DEFAULT_TEMPERATURE
    learnable: bool = False

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


def _check_unit_rows(x: Var, label: str) -> None:
    norms = np.linalg.norm(x.data, axis=1)
    off = np.abs(norms - 1.0)
    if off.max(initial=0.0) > UNIT_ROW_TOL:
        i = int(np.argmax(off))
        raise ContractViolation(
            f"{label} row {i} has norm {norms[i]:.12f}, expected unit rows")


def infonce(Q: Var, Tgt: Var, temperature, printed_denominator: bool = False) -> Var:
    """Mean over i of -log softmax_i(temperature * cos(Q_i, Tgt_j)).

    ``Q`` and ``Tgt`` must be unit rows with Q[i] paired to Tgt[i]; the
    denominator ranges over all targets in the batch.  ``temperature`` may be
    a float or a 1x1 variable (learnable case).

    ``printed_denominator`` switches to a diagnostic variant whose denominator
    sums only the matched-pair logits exp(temp * cos(Q_j, Tgt_j)); it is never
    a training default.
    """
    if Q.shape[0] == 0:
        raise EmptySequenceError("empty batch")
    if Q.shape != Tgt.shape:
        raise ContractViolation(f"batch shapes differ: {Q.shape} vs {Tgt.shape}")
    _check_unit_rows(Q, "query")
    _check_unit_rows(Tgt, "target")
    B = Q.shape[0]
    logits = matmul(Q, transpose(Tgt)) * temperature           # (B, B)
    diag_idx = [i * B + i for i in range(B)]
    diag = gather_rows(reshape(logits, B * B, 1), diag_idx)    # (B, 1)
    if printed_denominator:
        m = float(diag.data.max())
        lse = log(total_sum(exp(diag - m))) + m                # (1, 1)
        per_query = lse - diag
    else:
        m = logits.data.max(axis=1, keepdims=True)             # constant shift
        lse = log(row_sum(exp(logits - Var(m, logits.tape)))) + Var(m, logits.tape)
        per_query = lse - diag
    return total_sum(per_query) * (1.0 / B)
