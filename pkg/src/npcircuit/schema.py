"""Variable schema for the class variable and the K categorical attributes.

Variable indexing convention used throughout the package: variable 0 is the
class variable Y, variables 1..K are the attributes A_1..A_K.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class VariableSchema:
    """Cardinalities of the class variable and every attribute variable."""

    class_cardinality: int
    attribute_cardinalities: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "attribute_cardinalities", tuple(int(c) for c in self.attribute_cardinalities)
        )
        if self.n_attributes < 1:
            raise ValueError("need at least one attribute")
        if self.class_cardinality < 2 or any(c < 2 for c in self.attribute_cardinalities):
            raise ValueError("every cardinality must be >= 2")

    @property
    def n_attributes(self) -> int:
        return len(self.attribute_cardinalities)

    @property
    def n_variables(self) -> int:
        return self.n_attributes + 1

    def cardinality(self, var: int) -> int:
        if var == 0:
            return self.class_cardinality
        return self.attribute_cardinalities[var - 1]

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return (self.class_cardinality,) + self.attribute_cardinalities

    @property
    def attribute_space_size(self) -> int:
        size = 1
        for c in self.attribute_cardinalities:
            size *= c
        return size

    @property
    def total_state_size(self) -> int:
        return self.class_cardinality * self.attribute_space_size

    def enumerate_attribute_space(self) -> np.ndarray:
        """All attribute tuples in lexicographic order, shape (prod cards, K)."""
        grids = np.indices(self.attribute_cardinalities)
        return grids.reshape(self.n_attributes, -1).T.astype(np.int64)

    def node_index(self, a) -> int:
        """Lexicographic index of an attribute tuple within the full space."""
        idx = 0
        for value, card in zip(a, self.attribute_cardinalities):
            if not 0 <= value < card:
                raise ValueError(f"attribute value {value} out of range for cardinality {card}")
            idx = idx * card + int(value)
        return idx

    def node_indices(self, nodes: np.ndarray) -> np.ndarray:
        """Vectorized node_index for an (n, K) array of tuples."""
        nodes = np.asarray(nodes, dtype=np.int64)
        idx = np.zeros(len(nodes), dtype=np.int64)
        for k, card in enumerate(self.attribute_cardinalities):
            idx = idx * card + nodes[:, k]
        return idx

    def validate_attribute_tuple(self, a) -> tuple[int, ...]:
        a = tuple(int(v) for v in a)
        if len(a) != self.n_attributes:
            raise LengthError(len(a), self.n_attributes)
        for value, card in zip(a, self.attribute_cardinalities):
            if not 0 <= value < card:
                raise ValueError(f"attribute value {value} out of range for cardinality {card}")
        return a


class LengthError(ValueError):
    def __init__(self, got, want):
        super().__init__(f"attribute tuple has length {got}, schema expects {want}")
