"""Named parameter collections used by every model and optimizer in the package."""

from __future__ import annotations

from collections.abc import Iterable, Mapping

import numpy as np


class ParameterSet:
    """Ordered, named collection of float64 arrays.

    Names are unique; iteration order is insertion order, which also fixes
    the layout of :meth:`flatten` / :meth:`unflatten` (round-trip identity).
    """

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        self._entries: dict[str, np.ndarray] = {}
        items = entries.items() if isinstance(entries, Mapping) else entries
        for name, value in items:
            self[name] = value

    def __setitem__(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        self._entries[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._entries.items()}

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self._entries.values())

    def copy(self) -> "ParameterSet":
        return ParameterSet((k, v.copy()) for k, v in self._entries.items())

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self._entries)

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([v.reshape(-1) for v in self._entries.values()])

    def unflatten(self, flat: np.ndarray) -> "ParameterSet":
        """Rebuild a ParameterSet with this set's names/shapes from a flat vector."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected flat vector of length {self.n_params}, got shape {flat.shape}")
        out = ParameterSet()
        offset = 0
        for name, value in self._entries.items():
            n = value.size
            out[name] = flat[offset:offset + n].reshape(value.shape)
            offset += n
        return out

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet((k, np.zeros_like(v)) for k, v in self._entries.items())

    def allclose(self, other: "ParameterSet", rtol: float = 1e-12, atol: float = 1e-12) -> bool:
        if self.names() != other.names():
            return False
        return all(np.allclose(v, other[k], rtol=rtol, atol=atol) for k, v in self._entries.items())

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}:{v.shape}" for k, v in self._entries.items())
        return f"ParameterSet({inner})"
