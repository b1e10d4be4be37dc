"""Rank-indexed combination weights g(k) for merging class activation maps.

Two families:

* :class:`Polynomial` -- weights fall from +1 at rank 1 to -1 at rank K,
  crossing zero at the pivot ``p``; ``eta`` is the degree.
* :class:`TopBottom` -- +1 for the ``i`` highest ranks, -1 for the ``b``
  lowest ranks, 0 elsewhere.

Text syntax (used by the CLI): ``poly:eta=2[,p=auto]`` and ``topbot:i=1,b=10``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

import numpy as np


@dataclass(frozen=True)
class Polynomial:
    eta: int = 2
    p: float | None = None  # None -> (K + 1) / 2

    def pivot(self, num_classes: int) -> float:
        return (num_classes + 1) / 2 if self.p is None else float(self.p)

    def __str__(self) -> str:
        return f"poly:eta={self.eta}" + ("" if self.p is None else f",p={self.p:g}")


@dataclass(frozen=True)
class TopBottom:
    i: int = 1
    b: int = 10

    def __str__(self) -> str:
        return f"topbot:i={self.i},b={self.b}"


CombinationFn = Union[Polynomial, TopBottom]

CAM = TopBottom(1, 0)


def _validate(fn: CombinationFn, num_classes: int) -> None:
    if num_classes < 1:
        raise ValueError(f"class count must be positive, got {num_classes}")
    if isinstance(fn, Polynomial):
        if fn.eta < 0 or int(fn.eta) != fn.eta:
            raise ValueError(f"eta must be a non-negative integer, got {fn.eta}")
        p = fn.pivot(num_classes)
        if not 1 <= p <= num_classes:
            raise ValueError(f"pivot p={p} outside [1, {num_classes}]")
    elif isinstance(fn, TopBottom):
        if fn.i < 0 or fn.b < 0:
            raise ValueError(f"top/bottom counts must be non-negative: {fn}")
        if fn.i + fn.b > num_classes:
            raise ValueError(f"i + b = {fn.i + fn.b} exceeds K = {num_classes}")
    else:
        raise TypeError(f"unknown combination function {fn!r}")


def weight(fn: CombinationFn, k: int, num_classes: int) -> float:
    """g(k) for rank ``k`` in 1..K."""
    _validate(fn, num_classes)
    if not 1 <= k <= num_classes:
        raise ValueError(f"rank k={k} outside [1, {num_classes}]")
    if isinstance(fn, TopBottom):
        if k <= fn.i:
            return 1.0
        if k > num_classes - fn.b:
            return -1.0
        return 0.0

    p = fn.pivot(num_classes)
    if k == p:
        return 1.0 if fn.eta == 0 else 0.0
    if k < p:
        return ((k - p) / (1 - p)) ** fn.eta
    return (-1.0) ** (fn.eta + 1) * ((k - p) / (p - num_classes)) ** fn.eta


def weights_vector(fn: CombinationFn, num_classes: int) -> np.ndarray:
    return np.array([weight(fn, k, num_classes) for k in range(1, num_classes + 1)])


_SPEC_RE = re.compile(r"^\s*(poly|topbot)\s*:\s*(.*?)\s*$")


def parse_combination(text: str) -> CombinationFn:
    """Parse ``poly:eta=2,p=auto`` or ``topbot:i=1,b=10``."""
    m = _SPEC_RE.match(text)
    if not m:
        raise ValueError(f"bad combination function {text!r}: expected poly:... or topbot:...")
    kind, body = m.groups()
    args = {}
    for part in filter(None, (s.strip() for s in body.split(","))):
        key, sep, value = part.partition("=")
        if not sep:
            raise ValueError(f"bad argument {part!r} in {text!r}")
        args[key.strip()] = value.strip()
    try:
        if kind == "poly":
            unknown = set(args) - {"eta", "p"}
            if unknown:
                raise ValueError(f"unknown poly arguments {sorted(unknown)}")
            p = args.get("p", "auto")
            return Polynomial(int(args.get("eta", 2)), None if p == "auto" else float(p))
        unknown = set(args) - {"i", "b"}
        if unknown:
            raise ValueError(f"unknown topbot arguments {sorted(unknown)}")
        return TopBottom(int(args.get("i", 1)), int(args.get("b", 10)))
    except ValueError as exc:
        raise ValueError(f"bad combination function {text!r}: {exc}") from None


def parse_combination_list(text: str) -> list[CombinationFn]:
    """Split a list of specs; items are separated by ';' or by a ',' that starts a new spec."""
    items = re.split(r";|,(?=\s*(?:poly|topbot)\s*:)", text)
    return [parse_combination(item) for item in items if item.strip()]
