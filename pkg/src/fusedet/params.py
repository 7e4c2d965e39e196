"""Named parameter registry and deterministic initialization."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter, Tensor


def orthogonal(rng: np.random.Generator, shape) -> np.ndarray:
    """Orthogonal-style init with gain 1; non-2D shapes are flattened to (d0, rest)."""
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    flat_shape = (rows, cols)
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols].reshape(shape).copy()


class ParamStore:
    """Creation-ordered parameter registry; names unique, order = checkpoint order."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Parameter(name, Tensor(data))
        self._params[name] = p
        return p.tensor

    def weight(self, name: str, shape) -> Tensor:
        return self.add(name, orthogonal(self.rng, tuple(shape)))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self.add(name, np.ones(shape))

    def const(self, name: str, data) -> Tensor:
        return self.add(name, np.asarray(data, dtype=np.float64))

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.tensor.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.tensor.data for k, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing={sorted(missing)[:3]} "
                             f"extra={sorted(extra)[:3]}")
        for k, p in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.tensor.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs "
                                 f"{p.tensor.data.shape}")
            p.tensor.data = arr.copy()
