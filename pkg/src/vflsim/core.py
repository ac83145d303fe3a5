"""Domain types shared across the simulator: feature partitions, model blocks,
hyperparameters, party roles and the backward-updating message."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class VFLError(Exception):
    """Base class for simulator errors."""


class InvalidPartition(VFLError):
    pass


class DimensionError(VFLError, ValueError):
    pass


class NumericalError(VFLError, ArithmeticError):
    pass


class EmptyData(VFLError):
    pass


class RoleError(VFLError):
    pass


class StateError(VFLError):
    pass


class LabelAccessError(RoleError):
    """A passive party tried to read labels."""


class ConfigError(VFLError):
    pass


class InvalidInput(VFLError, ValueError):
    pass


class ParseError(VFLError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.column = column


class NonConvergence(VFLError):
    """Target not reached within the epoch cap; carries the partial trace."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class Algorithm(str, enum.Enum):
    SGD = "sgd"
    SVRG = "svrg"
    SAGA = "saga"


class Loss(str, enum.Enum):
    LOGISTIC = "logistic"
    SQUARE = "square"
    ROBUST = "robust"


class Regularizer(str, enum.Enum):
    L2 = "l2"
    RATIONAL = "rational"
    NONE = "none"


class Role(str, enum.Enum):
    ACTIVE = "active"
    PASSIVE = "passive"


@dataclass(frozen=True)
class PartyRole:
    kind: Role
    party_id: int

    @property
    def is_active(self) -> bool:
        return self.kind is Role.ACTIVE


def assign_roles(q: int, m: int) -> list[PartyRole]:
    """Parties ``0..m-1`` are active, the rest passive."""
    if not 1 <= m <= q:
        raise ConfigError(f"need 1 <= m <= q, got m={m}, q={q}")
    return [PartyRole(Role.ACTIVE if p < m else Role.PASSIVE, p) for p in range(q)]


@dataclass(frozen=True)
class HyperParams:
    gamma: float
    lam: float = 1e-4
    algorithm: Algorithm = Algorithm.SGD
    loss: Loss = Loss.LOGISTIC
    regularizer: Regularizer = Regularizer.L2
    epochs: int = 10
    tau1: int = 0
    tau2: int = 0
    seed: int = 0

    def __post_init__(self):
        # accept plain strings from config files
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        object.__setattr__(self, "loss", Loss(self.loss))
        object.__setattr__(self, "regularizer", Regularizer(self.regularizer))
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.tau1 < 0 or self.tau2 < 0:
            raise ConfigError("staleness bounds must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @property
    def tau(self) -> int:
        return max(self.tau1, self.tau2)


@dataclass(frozen=True)
class FeaturePartition:
    """Disjoint feature index blocks, one per party."""

    q: int
    d: int
    blocks: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.blocks) != self.q:
            raise InvalidPartition(f"expected {self.q} blocks, got {len(self.blocks)}")
        blocks = tuple(np.asarray(b, dtype=np.intp) for b in self.blocks)
        for b in blocks:
            b.setflags(write=False)
        object.__setattr__(self, "blocks", blocks)
        seen = np.concatenate(blocks) if blocks else np.empty(0, dtype=np.intp)
        if len(seen) != self.d or not np.array_equal(np.sort(seen), np.arange(self.d)):
            raise InvalidPartition("blocks must be disjoint and cover 0..d-1")

    def __eq__(self, other):
        if not isinstance(other, FeaturePartition):
            return NotImplemented
        return (self.q, self.d) == (other.q, other.d) and all(
            np.array_equal(a, b) for a, b in zip(self.blocks, other.blocks)
        )

    def __hash__(self):
        return hash((self.q, self.d, tuple(tuple(b.tolist()) for b in self.blocks)))

    @property
    def sizes(self) -> list[int]:
        return [len(b) for b in self.blocks]

    @property
    def order(self) -> np.ndarray:
        """Feature indices in block-concatenated order."""
        return np.concatenate(self.blocks)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    def owner_of(self, feature: int) -> int:
        for ell, b in enumerate(self.blocks):
            if feature in b:
                return ell
        raise IndexError(feature)

    @classmethod
    def from_blocks(cls, blocks: Sequence[Sequence[int]]) -> "FeaturePartition":
        d = sum(len(b) for b in blocks)
        return cls(q=len(blocks), d=d, blocks=tuple(np.array(sorted(b), dtype=np.intp) for b in blocks))


def make_partition(d: int, q: int, seed: int) -> FeaturePartition:
    """Seeded random split of ``d`` features into ``q`` near-equal blocks.

    Feature indices are shuffled, then sliced; the first ``d mod q`` blocks get
    the extra feature. Indices inside each block are kept sorted.
    """
    if q < 1:
        raise InvalidPartition(f"party count must be >= 1, got {q}")
    if d < q:
        raise InvalidPartition(f"cannot split {d} features among {q} parties")
    perm = np.random.default_rng(seed).permutation(d)
    base, extra = divmod(d, q)
    blocks = []
    start = 0
    for ell in range(q):
        size = base + (1 if ell < extra else 0)
        blocks.append(np.sort(perm[start:start + size]))
        start += size
    return FeaturePartition(q=q, d=d, blocks=tuple(blocks))


class BlockView:
    """Write-through view of ``vec`` restricted to one block's indices."""

    __slots__ = ("_vec", "_idx")

    def __init__(self, vec: np.ndarray, idx: np.ndarray):
        self._vec = vec
        self._idx = idx

    def __len__(self):
        return len(self._idx)

    def __array__(self, dtype=None, copy=None):
        out = self._vec[self._idx]
        return out if dtype is None else out.astype(dtype)

    def __getitem__(self, key):
        return self._vec[self._idx[key]]

    def __setitem__(self, key, value):
        self._vec[self._idx[key]] = value

    def __iter__(self):
        return iter(self._vec[self._idx])

    def __repr__(self):
        return f"BlockView({self._vec[self._idx]!r})"

    def values(self) -> np.ndarray:
        return self._vec[self._idx]


def block_view(vec: np.ndarray, partition: FeaturePartition, ell: int) -> BlockView:
    if not 0 <= ell < partition.q:
        raise IndexError(f"party {ell} out of range 0..{partition.q - 1}")
    if len(vec) != partition.d:
        raise DimensionError(f"vector has length {len(vec)}, partition expects {partition.d}")
    return BlockView(vec, partition.blocks[ell])


def scatter_blocks(parts: Sequence[np.ndarray], partition: FeaturePartition) -> np.ndarray:
    out = np.empty(partition.d)
    for ell, b in enumerate(partition.blocks):
        out[b] = parts[ell]
    return out


class ModelState:
    """Global parameter vector stored contiguously in block order.

    ``block(ell)`` is a true numpy view, so in-place updates on it are
    visible through ``w``. ``versions[ell]`` counts updates applied to block
    ``ell`` (monotone).
    """

    def __init__(self, partition: FeaturePartition, w: np.ndarray | None = None):
        self.partition = partition
        self._offsets = partition.offsets
        self._storage = np.zeros(partition.d)
        if w is not None:
            w = np.asarray(w, dtype=float)
            if w.shape != (partition.d,):
                raise DimensionError(f"w has shape {w.shape}, expected ({partition.d},)")
            self._storage[:] = w[partition.order]
        self.versions = [0] * partition.q
        self._views = [self._storage[self._offsets[l]:self._offsets[l + 1]] for l in range(partition.q)]

    def block(self, ell: int) -> np.ndarray:
        if not 0 <= ell < self.partition.q:
            raise IndexError(f"party {ell} out of range")
        return self._views[ell]

    @property
    def blocks(self) -> list[np.ndarray]:
        return self._views

    @property
    def w(self) -> np.ndarray:
        """Copy of the parameters in original feature order."""
        out = np.empty(self.partition.d)
        out[self.partition.order] = self._storage
        return out

    def apply(self, ell: int, delta: np.ndarray) -> None:
        self._views[ell] += delta
        self.versions[ell] += 1

    def copy(self) -> "ModelState":
        other = ModelState(self.partition)
        other._storage[:] = self._storage
        other.versions = list(self.versions)
        return other

    def storage(self) -> np.ndarray:
        return self._storage.copy()


@dataclass(frozen=True)
class ThetaMessage:
    """Backward-updating payload: loss derivative and sample index only.

    Deliberately has no label or feature field.
    """

    theta: float
    index: int
    issuer: int
    step: int
    epoch: int = 0


@dataclass
class UpdateDirection:
    party_id: int
    delta: np.ndarray
    source: str  # "dominated" | "collaborative"
    step: int = 0
