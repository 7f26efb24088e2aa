"""Named trainable arrays with gradient slots."""

from __future__ import annotations

import numpy as np

from .diffcore import Tape, Var, as_matrix
from .errors import ShapeError


class ParameterStore:
    """Ordered mapping of parameter name -> 2-D float64 array.

    Updates happen in place between steps; per step the arrays are wrapped
    into tracked tape variables with ``tracked()`` and gradients are read back
    from those variables after ``Tape.backward``.
    """

    def __init__(self):
        self.arrays: dict[str, np.ndarray] = {}

    def add(self, name: str, array) -> None:
        if name in self.arrays:
            raise ShapeError(f"parameter {name!r} already exists")
        self.arrays[name] = as_matrix(array)

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def tracked(self, tape: Tape) -> dict[str, Var]:
        return {
            name: tape.var(arr, trainable=True, name=name)
            for name, arr in self.arrays.items()
        }

    def gradients(self, tracked: dict[str, Var]) -> dict[str, np.ndarray]:
        """Collect accumulated gradients (zeros for untouched parameters)."""
        out = {}
        for name, var in tracked.items():
            out[name] = var.grad if var.grad is not None else np.zeros_like(var.data)
        return out

    def copy(self) -> "ParameterStore":
        dup = ParameterStore()
        for name, arr in self.arrays.items():
            dup.arrays[name] = arr.copy()
        return dup
