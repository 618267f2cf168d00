"""Tiny black boxes with known optima, for checking the optimisers."""

import numpy as np

from .space import ParamDim, ParamSpace, validate


class IdentityBlackBox:
    """Ignores its parameters and returns the input."""

    name = "identity"

    def __init__(self, space: ParamSpace):
        self.space = space

    def evaluate(self, image, params):
        validate(tuple(params), self.space)
        return np.asarray(image, dtype=np.float32).copy()

    def close(self):
        pass


class ShiftBlackBox:
    """clamp(x + cff / 100) over a single discrete ``cff`` dimension."""

    name = "shift"

    def __init__(self, values=tuple(range(1, 21))):
        self.space = ParamSpace((ParamDim.discrete("cff", values),))

    def evaluate(self, image, params):
        (cff,) = validate(tuple(params), self.space)
        return np.clip(np.asarray(image, dtype=np.float64) + cff / 100.0, 0.0, 1.0).astype(np.float32)

    def close(self):
        pass
