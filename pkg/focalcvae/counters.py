"""Instrumented FLOP counting.

When a :class:`FlopCounter` is active, the kernels in :mod:`focalcvae.tensor`
report every counted operation (matmul and conv2d at 2 FLOPs per
multiply-accumulate, softmax at 5 FLOPs per element) under the innermost
active scope name. The closed-form formulas in :mod:`focalcvae.flops` are
checked against these counts.
"""

from collections import defaultdict
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Tuple

_ACTIVE: Optional["FlopCounter"] = None


class FlopCounter:
    def __init__(self) -> None:
        self.counts: Dict[Tuple[str, str], int] = defaultdict(int)
        self._scopes: List[str] = ["other"]
        self._previous: Optional["FlopCounter"] = None

    def __enter__(self) -> "FlopCounter":
        global _ACTIVE
        self._previous = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = self._previous

    def add(self, kind: str, flops: int) -> None:
        self.counts[(self._scopes[-1], kind)] += int(flops)

    def total(self, scope: Optional[str] = None, kind: Optional[str] = None) -> int:
        return sum(
            n
            for (s, k), n in self.counts.items()
            if (scope is None or s == scope) and (kind is None or k == kind)
        )

    def by_scope(self) -> Dict[str, int]:
        out: Dict[str, int] = defaultdict(int)
        for (s, _), n in self.counts.items():
            out[s] += n
        return dict(out)


def record(kind: str, flops: int) -> None:
    if _ACTIVE is not None:
        _ACTIVE.add(kind, flops)


@contextmanager
def flop_scope(name: str) -> Iterator[None]:
    """Attribute counted operations inside the block to ``name``."""
    counter = _ACTIVE
    if counter is None:
        yield
        return
    counter._scopes.append(name)
    try:
        yield
    finally:
        counter._scopes.pop()
