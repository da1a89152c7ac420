"""Skeleton templates, joint-coordinate sequences and the partitioned
spatial adjacency.

Each vertex's 1-hop spatial neighborhood splits into three subsets: the
vertex itself, neighbors closer to the skeleton's gravity center
(centripetal) and neighbors farther from it (centrifugal).  The three
subset matrices are disjoint, cover self-plus-neighbors exactly, and get
a symmetric degree normalization with an additive floor that keeps empty
rows finite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParseError, UsageError

K_PARTITIONS = 3
DEFAULT_ALPHA = 0.001


class SkeletonTemplate:
    """Joint count, bone list, joint names and the ROI part mapping."""

    def __init__(self, joint_count: int, edges, names=None, parts=None):
        self.joint_count = int(joint_count)
        self.edges = [(int(i), int(j)) for i, j in edges]
        self.names = list(names) if names else [f"j{i}" for i in range(joint_count)]
        # parts: ordered (name, joint index) pairs; order defines ROI rows
        self.parts = [(str(n), int(j)) for n, j in (parts or [])]
        self._validate()
        self.neighbor_sets = [set() for _ in range(self.joint_count)]
        for i, j in self.edges:
            self.neighbor_sets[i].add(j)
            self.neighbor_sets[j].add(i)

    @property
    def part_joints(self) -> list[int]:
        return [j for _, j in self.parts]

    def _validate(self) -> None:
        m = self.joint_count
        if m < 1:
            raise DataError("template needs at least one joint")
        seen = set()
        adj = [set() for _ in range(m)]
        for i, j in self.edges:
            if i == j:
                raise DataError(f"template has a self-loop at joint {i}")
            if not (0 <= i < m and 0 <= j < m):
                raise DataError(f"template edge ({i},{j}) out of range for {m} joints")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise DataError(f"template has a duplicate edge ({i},{j})")
            seen.add(key)
            adj[i].add(j)
            adj[j].add(i)
        if m > 1:
            stack, visited = [0], {0}
            while stack:
                cur = stack.pop()
                for nxt in adj[cur]:
                    if nxt not in visited:
                        visited.add(nxt)
                        stack.append(nxt)
            if len(visited) != m:
                raise DataError("template graph is not connected")
        for name, j in self.parts:
            if not 0 <= j < m:
                raise DataError(f"part '{name}' references joint {j} >= {m}")

    @classmethod
    def load(cls, path) -> "SkeletonTemplate":
        edges, parts = [], []
        m = None
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                fields = line.split()
                if m is None:
                    if len(fields) != 1 or not fields[0].isdigit():
                        raise ParseError(path, lineno, "expected joint count")
                    m = int(fields[0])
                elif fields[0] == "part":
                    if len(fields) != 3 or not fields[2].isdigit():
                        raise ParseError(path, lineno, "expected 'part <name> <joint>'")
                    parts.append((fields[1], int(fields[2])))
                else:
                    if len(fields) != 2 or not all(f.isdigit() for f in fields):
                        raise ParseError(path, lineno, "expected 'i j' edge pair")
                    edges.append((int(fields[0]), int(fields[1])))
        if m is None:
            raise ParseError(path, 1, "empty template file")
        return cls(m, edges, parts=parts)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{self.joint_count}\n")
            for i, j in self.edges:
                fh.write(f"{i} {j}\n")
            for name, j in self.parts:
                fh.write(f"part {name} {j}\n")


_DEFAULT_JOINTS = [
    "head", "neck", "chest", "spine", "pelvis",
    "l_shoulder", "l_elbow", "l_hand",
    "r_shoulder", "r_elbow", "r_hand",
    "l_knee", "l_foot", "r_knee", "r_foot",
]

_DEFAULT_EDGES = [
    (0, 1), (1, 2), (2, 3), (3, 4),
    (2, 5), (5, 6), (6, 7),
    (2, 8), (8, 9), (9, 10),
    (4, 11), (11, 12), (4, 13), (13, 14),
]

_DEFAULT_PARTS = [
    ("head", 0), ("l_hand", 7), ("r_hand", 10), ("l_foot", 12), ("r_foot", 14),
]


def default_template() -> SkeletonTemplate:
    """The 15-joint stick figure used by the synthetic generator."""
    return SkeletonTemplate(15, _DEFAULT_EDGES, names=_DEFAULT_JOINTS,
                            parts=_DEFAULT_PARTS)


@dataclass
class SkeletonSequence:
    """T x M x C joint coordinates plus the class label.

    All-zero coordinate rows mark missing joints.
    """

    coords: np.ndarray
    label: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float32)
        if self.coords.ndim != 3 or self.coords.shape[0] < 1:
            raise DataError(f"sequence coords must be [T,M,C], got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise DataError("sequence contains non-finite coordinates")

    @property
    def frames(self) -> int:
        return self.coords.shape[0]

    @property
    def joints(self) -> int:
        return self.coords.shape[1]

    def present_mask(self) -> np.ndarray:
        """[T,M] bool; False where a joint is missing (all-zero row)."""
        return np.any(self.coords != 0.0, axis=2)


@dataclass
class PartitionedAdjacency:
    """K_p binary subset matrices plus their normalized forms."""

    raw: np.ndarray                      # [K_p, M, M] with entries {0,1}
    normalized: np.ndarray | None = None  # [K_p, M, M]
    alpha: float = DEFAULT_ALPHA

    @property
    def subsets(self) -> int:
        return self.raw.shape[0]

    @property
    def joints(self) -> int:
        return self.raw.shape[1]


def compute_gravity_center(seq: SkeletonSequence) -> np.ndarray:
    """Mean of all non-missing joint coordinates over all frames."""
    mask = seq.present_mask()
    if not mask.any():
        raise DataError("cannot compute gravity center: all joints missing")
    pts = seq.coords[mask]
    return pts.mean(axis=0).astype(np.float32)


def mean_joint_positions(seq: SkeletonSequence) -> np.ndarray:
    """Per-joint mean position over the frames where the joint is present."""
    mask = seq.present_mask().astype(np.float32)
    counts = mask.sum(axis=0)
    sums = (seq.coords * mask[:, :, None]).sum(axis=0)
    out = np.zeros_like(sums)
    present = counts > 0
    out[present] = sums[present] / counts[present, None]
    return out.astype(np.float32)


def partition_neighbors(template: SkeletonTemplate,
                        seq: SkeletonSequence) -> PartitionedAdjacency:
    """Split each vertex's self-plus-1-hop neighborhood into root /
    centripetal / centrifugal subsets.

    A neighbor j of root i lands in the centripetal subset when its mean
    position sits closer to the gravity center than i's does (ties go
    centripetal), otherwise in the centrifugal subset.
    """
    m = template.joint_count
    if seq.joints != m:
        raise DataError(f"template has {m} joints but sequence has {seq.joints}")
    center = compute_gravity_center(seq)
    radii = np.linalg.norm(mean_joint_positions(seq) - center[None, :], axis=1)
    raw = np.zeros((K_PARTITIONS, m, m), dtype=np.float32)
    raw[0] = np.eye(m, dtype=np.float32)
    for i in range(m):
        for j in template.neighbor_sets[i]:
            subset = 1 if radii[j] <= radii[i] else 2
            raw[subset, i, j] = 1.0
    return PartitionedAdjacency(raw=raw)


def normalize_adjacency(adj: PartitionedAdjacency,
                        alpha: float = DEFAULT_ALPHA) -> PartitionedAdjacency:
    """Symmetric degree normalization A_ij / sqrt((d_i+a)(d_j+a)).

    d_i is the row sum of the subset matrix; the additive floor keeps
    rows with no entries at exactly zero instead of dividing by zero.
    """
    if alpha <= 0:
        raise UsageError(f"alpha must be positive, got {alpha}")
    a32 = np.float32(alpha)
    normalized = np.zeros_like(adj.raw)
    for k in range(adj.subsets):
        d = adj.raw[k].sum(axis=1) + a32
        normalized[k] = adj.raw[k] / np.sqrt(np.multiply.outer(d, d))
    return PartitionedAdjacency(raw=adj.raw, normalized=normalized, alpha=alpha)


def build_adjacency(template: SkeletonTemplate, seq: SkeletonSequence,
                    alpha: float = DEFAULT_ALPHA) -> PartitionedAdjacency:
    return normalize_adjacency(partition_neighbors(template, seq), alpha)
