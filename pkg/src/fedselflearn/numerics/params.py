"""Flat parameter vectors with a named segment layout."""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np


class LayoutMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Layout:
    """Ordered (name, shape) segments of a flat vector."""

    segments: tuple

    def __post_init__(self):
        names = [n for n, _ in self.segments]
        if len(set(names)) != len(names):
            raise ValueError("duplicate segment names in layout")
        object.__setattr__(self, "segments", tuple((n, tuple(int(d) for d in s)) for n, s in self.segments))

    @property
    def size(self):
        return sum(prod(s) for _, s in self.segments)

    @property
    def names(self):
        return [n for n, _ in self.segments]

    def offsets(self):
        out, pos = {}, 0
        for name, shape in self.segments:
            n = prod(shape)
            out[name] = (pos, pos + n, shape)
            pos += n
        return out

    def to_json(self):
        return [{"name": n, "shape": list(s)} for n, s in self.segments]

    @classmethod
    def from_json(cls, items):
        return cls(tuple((d["name"], tuple(d["shape"])) for d in items))


class ParamVector:
    """Immutable flat float64 vector with a layout.

    Gradients and deltas use the same type, so they can be checked for
    layout compatibility the same way.
    """

    __slots__ = ("values", "layout", "_offsets")

    def __init__(self, values, layout):
        values = np.array(values, dtype=np.float64, copy=True).reshape(-1)
        if values.size != layout.size:
            raise LayoutMismatchError(f"vector has {values.size} values, layout expects {layout.size}")
        values.flags.writeable = False
        self.values = values
        self.layout = layout
        self._offsets = layout.offsets()

    @classmethod
    def zeros(cls, layout):
        return cls(np.zeros(layout.size), layout)

    @classmethod
    def from_segments(cls, layout, segments):
        flat = np.concatenate([np.asarray(segments[n], dtype=np.float64).reshape(-1) for n in layout.names])
        return cls(flat, layout)

    def __len__(self):
        return self.values.size

    def __repr__(self):
        return f"ParamVector(size={self.values.size}, segments={self.layout.names})"

    def segment(self, name):
        start, stop, shape = self._offsets[name]
        return self.values[start:stop].reshape(shape)

    def segments(self):
        return {n: self.segment(n) for n in self.layout.names}

    def check_compatible(self, other):
        if self.layout != other.layout:
            raise LayoutMismatchError("parameter layouts differ")

    def with_values(self, values):
        return ParamVector(values, self.layout)

    def __add__(self, other):
        self.check_compatible(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other):
        self.check_compatible(other)
        return ParamVector(self.values - other.values, self.layout)

    def scale(self, c):
        return ParamVector(self.values * c, self.layout)

    def flat_from_segments(self, grads):
        """Pack a name -> array mapping into a vector with this layout."""
        return ParamVector.from_segments(self.layout, grads)

    def allclose(self, other, atol=0.0, rtol=0.0):
        self.check_compatible(other)
        return bool(np.allclose(self.values, other.values, atol=atol, rtol=rtol))


Gradient = ParamVector


def mean_of(vectors):
    """Element-wise mean using a fixed left-to-right order."""
    if not vectors:
        raise ValueError("mean of an empty set of vectors")
    first = vectors[0]
    total = np.zeros_like(first.values)
    for v in vectors:
        first.check_compatible(v)
        total = total + v.values
    return ParamVector(total / len(vectors), first.layout)
