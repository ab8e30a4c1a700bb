from dataclasses import dataclass

import numpy as np

from .errors import CatalogError


@dataclass(frozen=True, eq=False)
class Catalog:
    """Items with integer ids ``0..n-1``, their utilities and feature vectors."""

    utilities: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.utilities, dtype=float)
        f = np.asarray(self.features, dtype=float)
        if f.ndim != 2 or f.shape[0] != u.shape[0]:
            raise ValueError("features must be (n_items, dim) matching utilities")
        u.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "utilities", u)
        object.__setattr__(self, "features", f)

    @property
    def n_items(self):
        return len(self.utilities)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    @property
    def ids(self):
        return np.arange(self.n_items)

    def check(self, items):
        for i in items:
            if not (0 <= int(i) < self.n_items) or int(i) != i:
                raise CatalogError(f"unknown item id {i!r}")

    def utility(self, items):
        items = np.asarray(items, dtype=int)
        self.check(items.ravel())
        return self.utilities[items]

    def to_dict(self):
        return {"utilities": self.utilities.tolist(), "features": self.features.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["utilities"], dtype=float),
                   np.array(d["features"], dtype=float).reshape(len(d["utilities"]), -1))
