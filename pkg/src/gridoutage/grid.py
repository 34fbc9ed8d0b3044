"""Grid topology, admittance/impedance construction and the exact increment
distributions a topology induces.

Buses carry integer ids ``1..M``; matrix indices are ``id - 1``. Branch ids
are positions in ``GridTopology.branches``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gridoutage.errors import GridError, SingularGridError
from gridoutage.gaussian import IncrementDistribution

SINGULAR_COND = 1e12


@dataclass(frozen=True)
class Branch:
    i: int
    k: int
    y: complex

    @property
    def pair(self) -> tuple[int, int]:
        return (min(self.i, self.k), max(self.i, self.k))


def _find(parent, a):
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


@dataclass(frozen=True)
class GridTopology:
    """Buses ``1..bus_count``, series branches, per-bus shunts and a slack bus.

    Connectivity is not enforced at construction (an outage may island part
    of the grid); query ``is_connected`` / ``components``.
    """

    bus_count: int
    branches: tuple[Branch, ...]
    shunt: tuple[complex, ...] = field(default=())
    slack: int = 1

    def __post_init__(self):
        m = self.bus_count
        if m < 1:
            raise GridError("bus_count must be positive")
        object.__setattr__(self, "branches", tuple(self.branches))
        shunt = tuple(complex(s) for s in self.shunt) if self.shunt else (0j,) * m
        if len(shunt) != m:
            raise GridError(f"shunt has {len(shunt)} entries for {m} buses")
        object.__setattr__(self, "shunt", shunt)
        if not 1 <= self.slack <= m:
            raise GridError(f"slack bus {self.slack} outside 1..{m}")
        for idx, br in enumerate(self.branches):
            if not (1 <= br.i <= m and 1 <= br.k <= m):
                raise GridError(f"branch {idx} ({br.i}-{br.k}) references an unknown bus")
            if br.i == br.k:
                raise GridError(f"branch {idx} is a self-loop at bus {br.i}")
            if br.y == 0:
                raise GridError(f"branch {idx} ({br.i}-{br.k}) has zero admittance")

    def components(self) -> list[list[int]]:
        """Connected components (bus ids), by union-find over branches."""
        parent = list(range(self.bus_count + 1))
        for br in self.branches:
            ra, rb = _find(parent, br.i), _find(parent, br.k)
            if ra != rb:
                parent[ra] = rb
        groups: dict[int, list[int]] = {}
        for b in range(1, self.bus_count + 1):
            groups.setdefault(_find(parent, b), []).append(b)
        return sorted(groups.values())

    @property
    def is_connected(self) -> bool:
        return len(self.components()) == 1

    @property
    def non_slack(self) -> list[int]:
        return [b for b in range(1, self.bus_count + 1) if b != self.slack]

    def branch_id(self, i: int, k: int) -> int:
        pair = (min(i, k), max(i, k))
        for idx, br in enumerate(self.branches):
            if br.pair == pair:
                return idx
        raise GridError(f"no branch between buses {i} and {k}")

    def to_dict(self) -> dict:
        return {
            "buses": self.bus_count,
            "slack": self.slack,
            "branches": [
                {"i": br.i, "k": br.k, "g": complex(br.y).real, "b": complex(br.y).imag}
                for br in self.branches
            ],
            "shunt": [
                {"bus": b + 1, "g": s.real, "b": s.imag}
                for b, s in enumerate(self.shunt)
                if s != 0
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridTopology":
        try:
            m = int(d["buses"])
            slack = int(d.get("slack", 1))
            branches = []
            for n, row in enumerate(d["branches"]):
                try:
                    y = complex(float(row["g"]), float(row.get("b", 0.0)))
                    branches.append(Branch(int(row["i"]), int(row["k"]), y))
                except (KeyError, TypeError, ValueError) as exc:
                    raise GridError(f"branches[{n}]: malformed entry {row!r} ({exc})") from None
            shunt = [0j] * m
            for n, row in enumerate(d.get("shunt", [])):
                try:
                    bus = int(row["bus"])
                    shunt[bus - 1] += complex(float(row.get("g", 0.0)), float(row.get("b", 0.0)))
                except (KeyError, TypeError, ValueError, IndexError) as exc:
                    raise GridError(f"shunt[{n}]: malformed entry {row!r} ({exc})") from None
        except KeyError as exc:
            raise GridError(f"topology is missing field {exc}") from None
        return cls(m, tuple(branches), tuple(shunt), slack)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "GridTopology":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise GridError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)


def build_incidence(top: GridTopology) -> np.ndarray:
    """Branch-bus incidence: row per branch, ``+1`` at ``i`` and ``-1`` at ``k``."""
    a = np.zeros((len(top.branches), top.bus_count), dtype=int)
    for row, br in enumerate(top.branches):
        a[row, br.i - 1] = 1
        a[row, br.k - 1] = -1
    return a


def build_admittance(top: GridTopology) -> np.ndarray:
    """Nodal admittance ``A^T diag(y) A + diag(shunt)``."""
    a = build_incidence(top).astype(complex)
    y_branch = np.array([br.y for br in top.branches], dtype=complex)
    y = (a.T * y_branch) @ a + np.diag(np.asarray(top.shunt, dtype=complex))
    return y


def eliminate_slack(y: np.ndarray, slack: int) -> np.ndarray:
    """Drop the slack row/column (``slack`` is a 1-based bus id).

    Raises ``SingularGridError`` when the reduced matrix is numerically
    singular, which happens when some island has neither the slack bus nor
    a shunt path to ground.
    """
    y = np.asarray(y)
    keep = [j for j in range(y.shape[0]) if j != slack - 1]
    reduced = y[np.ix_(keep, keep)]
    if reduced.size:
        cond = np.linalg.cond(reduced)
        if not np.isfinite(cond) or cond > SINGULAR_COND:
            raise SingularGridError(
                f"reduced admittance matrix is singular (condition number {cond:.3g}); "
                "the grid is islanded or degenerate"
            )
    return reduced


def impedance(y_reduced: np.ndarray) -> np.ndarray:
    """``Z = inv(Y)`` for a slack-eliminated admittance matrix."""
    cond = np.linalg.cond(y_reduced)
    if not np.isfinite(cond) or cond > SINGULAR_COND:
        raise SingularGridError(f"admittance matrix is singular (condition number {cond:.3g})")
    return np.linalg.inv(y_reduced)


def sensitivity_matrix(top: GridTopology, use_magnitude: bool = False) -> np.ndarray:
    """Real voltage-increment sensitivity over the non-slack buses.

    Entry-wise real part of ``Z`` by default (exact for resistive grids),
    entry-wise magnitude when ``use_magnitude`` is set.
    """
    z = impedance(eliminate_slack(build_admittance(top), top.slack))
    return np.abs(z) if use_magnitude else z.real.copy()


def apply_outage(top: GridTopology, out_branches) -> GridTopology:
    """Topology with the listed branch ids removed.

    The result may be islanded; check ``is_connected`` on the return value.
    """
    out = set(int(b) for b in out_branches)
    unknown = [b for b in out if not 0 <= b < len(top.branches)]
    if unknown:
        raise GridError(f"unknown branch id(s) {sorted(unknown)}")
    kept = tuple(br for idx, br in enumerate(top.branches) if idx not in out)
    return GridTopology(top.bus_count, kept, top.shunt, top.slack)


@dataclass(frozen=True, eq=False)
class InjectionStats:
    """Independent Gaussian current-injection increments per non-slack bus."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        std = np.asarray(self.std, dtype=float).ravel()
        if mean.shape != std.shape:
            raise ValueError("mean and std must have the same length")
        if np.any(std <= 0):
            raise ValueError("injection standard deviations must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def random_injections(n: int, seed, mean_range=(-0.01, 0.01), std_range=(0.005, 0.02)) -> InjectionStats:
    rng = np.random.default_rng(seed)
    return InjectionStats(rng.uniform(*mean_range, size=n), rng.uniform(*std_range, size=n))


def derive_increment_distribution(z: np.ndarray, inj: InjectionStats) -> IncrementDistribution:
    """``N(Z mu, Z diag(sigma^2) Z^T)`` for ``dV = Z dI``."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] != inj.mean.size:
        raise ValueError(f"sensitivity has {z.shape[1]} columns for {inj.mean.size} injections")
    cov = (z * inj.std**2) @ z.T
    return IncrementDistribution(z @ inj.mean, 0.5 * (cov + cov.T))


def generate_test_grid(
    kind: str,
    size: int,
    seed,
    n_chords: int | None = None,
    admittance_range=(5.0, 15.0),
    shunt: float = 0.0,
) -> GridTopology:
    """Random resistive test grid.

    A uniformly attached random tree spans the buses (bus 1 is the slack and
    the root); ``kind="loopy"`` then adds ``n_chords`` (default ``ceil(M/8)``)
    chords between non-adjacent buses. ``shunt > 0`` puts a conductance of
    that size to ground at every bus, which keeps islands solvable.
    """
    if size < 3:
        raise GridError("test grids need at least 3 buses")
    if kind not in ("radial", "loopy"):
        raise GridError(f"unknown grid kind {kind!r}")
    rng = np.random.default_rng(seed)
    lo, hi = admittance_range
    pairs = []
    for b in range(2, size + 1):
        pairs.append((int(rng.integers(1, b)), b))
    if kind == "loopy":
        want = math.ceil(size / 8) if n_chords is None else n_chords
        existing = set(pairs)
        candidates = [
            (i, k) for i in range(1, size + 1) for k in range(i + 1, size + 1) if (i, k) not in existing
        ]
        if want > len(candidates):
            raise GridError(f"cannot add {want} chords to a {size}-bus tree")
        for j in rng.choice(len(candidates), size=want, replace=False):
            pairs.append(candidates[int(j)])
    branches = tuple(Branch(i, k, complex(rng.uniform(lo, hi))) for i, k in pairs)
    return GridTopology(size, branches, (complex(shunt),) * size, slack=1)
