"""Key -> Parameter store shared by the backbone and every PEFT module."""

from __future__ import annotations

from collections import Counter
from typing import Callable, Iterator

import numpy as np

from .numerics import GROUPS, Parameter


class ParamRegistry:
    """Single owner of all parameters. Keys follow ``group/side/layer/slot/role[/task]``."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def __contains__(self, key: str) -> bool:
        return key in self._params

    def __getitem__(self, key: str) -> Parameter:
        return self._params[key]

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def keys(self) -> list[str]:
        return list(self._params)

    def add(self, param: Parameter) -> Parameter:
        if param.key in self._params:
            raise KeyError(f"duplicate parameter key {param.key!r}")
        self._params[param.key] = param
        return param

    def resolve(self, key: str, factory: Callable[[str], Parameter]) -> Parameter:
        """Return the parameter under ``key``, creating it with ``factory`` on first use."""
        if key not in self._params:
            param = factory(key)
            if param.key != key:
                raise KeyError(f"factory produced {param.key!r} for {key!r}")
            self._params[key] = param
        return self._params[key]

    def by_group(self, group: str) -> list[Parameter]:
        if group not in GROUPS:
            raise ValueError(f"unknown group {group!r}")
        return [p for p in self._params.values() if p.group == group]

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.trainable]

    def counts(self) -> Counter:
        """Scalar count per group; each Parameter object is counted once."""
        out: Counter = Counter({g: 0 for g in GROUPS})
        for p in self._params.values():
            out[p.group] += p.size
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}
