"""Parameter spaces and the continuous relaxation used during optimisation.

Gradient-based search works on ``u`` in [0, 1]^P.  ``quantize`` maps ``u`` to
legal native values before the black box sees them; ``normalize`` is its
right inverse (discrete values map to bin centres).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .. import autodiff as ad


CONTINUOUS_DECIMALS = 9


@dataclass(frozen=True)
class ParamDim:
    name: str
    lo: Optional[float] = None
    hi: Optional[float] = None
    values: Optional[tuple] = None

    def __post_init__(self):
        if self.values is None:
            if self.lo is None or self.hi is None or not self.lo < self.hi:
                raise ValueError(f"{self.name}: continuous dim needs lo < hi")
        else:
            vals = tuple(self.values)
            if not vals:
                raise ValueError(f"{self.name}: discrete dim needs at least one value")
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{self.name}: discrete values must be strictly increasing")
            object.__setattr__(self, "values", vals)

    @classmethod
    def continuous(cls, name: str, lo: float, hi: float) -> "ParamDim":
        return cls(name, lo=float(lo), hi=float(hi))

    @classmethod
    def discrete(cls, name: str, values: Sequence) -> "ParamDim":
        return cls(name, values=tuple(values))

    @property
    def is_discrete(self) -> bool:
        return self.values is not None

    def quantize(self, u: float):
        u = min(max(float(u), 0.0), 1.0)
        if self.values is None:
            # snapped to CONTINUOUS_DECIMALS so quantize(normalize(v)) == v exactly
            return round(self.lo + u * (self.hi - self.lo), CONTINUOUS_DECIMALS)
        k = len(self.values)
        return self.values[min(int(math.floor(u * k)), k - 1)]

    def normalize(self, v) -> float:
        if self.values is None:
            if not self.lo <= v <= self.hi:
                raise ValueError(f"{self.name}={v} outside [{self.lo}, {self.hi}]")
            return (v - self.lo) / (self.hi - self.lo)
        try:
            idx = self.values.index(v)
        except ValueError:
            raise ValueError(f"{self.name}={v} not in {list(self.values)}") from None
        return (idx + 0.5) / len(self.values)

    def describe(self) -> dict:
        if self.values is None:
            return {"name": self.name, "kind": "continuous", "lo": self.lo, "hi": self.hi}
        return {"name": self.name, "kind": "discrete", "values": list(self.values)}


@dataclass(frozen=True)
class ParamSpace:
    dims: tuple = field(default_factory=tuple)

    def __post_init__(self):
        dims = tuple(self.dims)
        names = [d.name for d in dims]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in {names}")
        object.__setattr__(self, "dims", dims)

    @property
    def P(self) -> int:
        return len(self.dims)

    @property
    def names(self) -> list:
        return [d.name for d in self.dims]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def describe(self) -> list:
        return [d.describe() for d in self.dims]

    @classmethod
    def from_description(cls, desc: Sequence[dict]) -> "ParamSpace":
        dims = []
        for d in desc:
            if d["kind"] == "continuous":
                dims.append(ParamDim.continuous(d["name"], d["lo"], d["hi"]))
            else:
                dims.append(ParamDim.discrete(d["name"], d["values"]))
        return cls(tuple(dims))


def bm3d_space() -> ParamSpace:
    """The five tunable denoiser parameters and their search ranges."""
    return ParamSpace((
        ParamDim.continuous("cff", 1.0, 20.0),
        ParamDim.discrete("n1", (4, 8)),
        ParamDim.discrete("cspace", (0, 1)),
        ParamDim.discrete("wtransform", (0, 1)),
        ParamDim.discrete("neighborhood", tuple(range(3, 16))),
    ))


def clamp_unit(u) -> np.ndarray:
    return np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)


def quantize(u, space: ParamSpace) -> tuple:
    """Relaxed ``u`` in [0,1]^P -> native parameter values."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if u.shape[0] != space.P:
        raise ValueError(f"parameter space mismatch: got {u.shape[0]} values for P={space.P}")
    return tuple(d.quantize(x) for d, x in zip(space.dims, u))


def normalize(values: Sequence, space: ParamSpace) -> np.ndarray:
    if len(values) != space.P:
        raise ValueError(f"parameter space mismatch: got {len(values)} values for P={space.P}")
    return np.array([d.normalize(v) for d, v in zip(space.dims, values)])


def validate(values: Sequence, space: ParamSpace) -> tuple:
    """Check concrete values lie in their dims; returns them as a tuple."""
    normalize(values, space)
    return tuple(values)


def param_planes(u: ad.Tensor, h: int, w: int) -> ad.Tensor:
    """Constant H x W x P parameter channels; differentiable in ``u``."""
    if not isinstance(u, ad.Tensor):
        u = ad.Tensor(np.asarray(u))
    return ad.broadcast_planes(u, h, w)


def grid_points(space: ParamSpace, continuous_samples: int = 8) -> list:
    """Cartesian lattice in native units; continuous dims evenly sampled, endpoints included."""
    axes = []
    for d in space.dims:
        if d.is_discrete:
            axes.append(list(d.values))
        elif continuous_samples == 1:
            axes.append([d.quantize(0.5)])
        else:
            axes.append([d.quantize(x) for x in np.linspace(0.0, 1.0, continuous_samples)])
    out = [()]
    for ax in axes:
        out = [p + (v,) for p in out for v in ax]
    return out
