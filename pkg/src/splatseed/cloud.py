"""The colored point cloud shared by every pipeline stage."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class Provenance(IntEnum):
    SFM = 0
    SELFINIT = 1


@dataclass
class ColoredPointCloud:
    """Positions, colors and per-point bookkeeping.

    ``support`` holds, per point, the frozenset of view ids that observe it
    (track views for SfM points, containing frusta for self-init points).
    ``track_id`` is -1 for points that do not come from a track.
    """

    positions: np.ndarray
    colors: np.ndarray
    provenance: np.ndarray = None
    support: list = None
    track_length: np.ndarray = None
    track_id: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        if len(self.colors) != n:
            raise ValueError("colors and positions differ in length")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite positions")
        if n and (self.colors.min() < 0 or self.colors.max() > 1):
            raise ValueError("colors must lie in [0, 1]")
        if self.provenance is None:
            self.provenance = np.zeros(n, dtype=np.uint8)
        self.provenance = np.asarray(self.provenance, dtype=np.uint8).reshape(n)
        if self.support is None:
            self.support = [frozenset() for _ in range(n)]
        self.support = [frozenset(s) for s in self.support]
        if len(self.support) != n:
            raise ValueError("support length mismatch")
        if self.track_length is None:
            self.track_length = np.array([len(s) for s in self.support], dtype=np.int32)
        self.track_length = np.asarray(self.track_length, dtype=np.int32).reshape(n)
        if self.track_id is None:
            self.track_id = np.full(n, -1, dtype=np.int64)
        self.track_id = np.asarray(self.track_id, dtype=np.int64).reshape(n)
        for k, v in self.extra.items():
            if len(v) != n:
                raise ValueError(f"extra property {k!r} has wrong length")

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> "ColoredPointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    def subset(self, idx) -> "ColoredPointCloud":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        idx = idx.astype(int)
        return ColoredPointCloud(
            positions=self.positions[idx],
            colors=self.colors[idx],
            provenance=self.provenance[idx],
            support=[self.support[i] for i in idx],
            track_length=self.track_length[idx],
            track_id=self.track_id[idx],
            extra={k: np.asarray(v)[idx] for k, v in self.extra.items()},
        )

    def transformed(self, R, t) -> "ColoredPointCloud":
        out = self.subset(np.arange(len(self)))
        out.positions = self.positions @ np.asarray(R).T + np.asarray(t)
        return out

    def provenance_counts(self) -> dict:
        return {p.name.lower(): int(np.sum(self.provenance == p)) for p in Provenance}


def merge(p0: ColoredPointCloud, p1: ColoredPointCloud) -> ColoredPointCloud:
    """Concatenate two clouds in the same frame; no deduplication."""
    keys = set(p0.extra) & set(p1.extra)
    return ColoredPointCloud(
        positions=np.concatenate([p0.positions, p1.positions]),
        colors=np.concatenate([p0.colors, p1.colors]),
        provenance=np.concatenate([p0.provenance, p1.provenance]),
        support=list(p0.support) + list(p1.support),
        track_length=np.concatenate([p0.track_length, p1.track_length]),
        track_id=np.concatenate([p0.track_id, p1.track_id]),
        extra={k: np.concatenate([p0.extra[k], p1.extra[k]]) for k in keys},
    )
