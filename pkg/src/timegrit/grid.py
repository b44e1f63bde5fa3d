"""Time-grid hierarchy and worker partitioning.

A hierarchy is a chain of uniform grids on [0, period]. Each coarse level
keeps every m-th point of its parent, so num_points must satisfy
(N - 1) % m == 0 level by level. Points whose index is a multiple of the
cumulative coarsening factor are C-points; the rest are F-points.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import HierarchyError


@dataclass(frozen=True)
class LevelSpec:
    """One grid level: index, point count, spacing, and coarsening toward the next level."""

    level: int
    num_points: int
    dt: float
    coarsen: int | None  # None on the coarsest level


@dataclass(frozen=True)
class Hierarchy:
    period: float
    levels: tuple[LevelSpec, ...]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> LevelSpec:
        return self.levels[level]

    @property
    def fine_points(self) -> int:
        return self.levels[0].num_points

    def stride(self, level: int) -> int:
        """Fine-grid points per level-`level` interval (cumulative coarsening)."""
        s = 1
        for spec in self.levels[:level]:
            s *= spec.coarsen
        return s

    @property
    def alignment(self) -> int:
        """Fine-grid stride of the coarsest level; block boundaries align to it."""
        return self.stride(len(self.levels) - 1)


def build_hierarchy(
    fine_points: int,
    period: float,
    coarsen: int,
    max_levels: int,
    min_coarse: int = 2,
) -> Hierarchy:
    """Build the level chain, stopping at max_levels, at min_coarse points,
    or when the next division would not be exact.

    The fine grid itself must divide exactly; an indivisible interval count
    there is a construction error.
    """
    if fine_points < 3:
        raise HierarchyError(f"fine grid needs at least 3 points, got {fine_points}")
    if period <= 0.0:
        raise HierarchyError(f"period must be positive, got {period}")
    if coarsen < 2:
        raise HierarchyError(f"coarsening factor must be >= 2, got {coarsen}")
    if max_levels < 1:
        raise HierarchyError(f"max_levels must be >= 1, got {max_levels}")
    if min_coarse < 2:
        raise HierarchyError(f"min_coarse must be >= 2, got {min_coarse}")
    if max_levels > 1 and (fine_points - 1) % coarsen != 0:
        raise HierarchyError(
            f"level 0 has {fine_points - 1} intervals, not divisible by coarsen={coarsen}"
        )

    counts = [fine_points]
    while len(counts) < max_levels:
        n = counts[-1]
        if (n - 1) % coarsen != 0:
            break
        nxt = (n - 1) // coarsen + 1
        if nxt < min_coarse:
            break
        counts.append(nxt)

    levels = tuple(
        LevelSpec(
            level=i,
            num_points=n,
            dt=period / (n - 1),
            coarsen=coarsen if i + 1 < len(counts) else None,
        )
        for i, n in enumerate(counts)
    )
    return Hierarchy(period=period, levels=levels)


def is_cpoint(index: int, cumulative_coarsen: int) -> bool:
    """True when `index` survives to the level whose fine-grid stride is given."""
    if index < 0:
        raise HierarchyError(f"negative time index {index}")
    if cumulative_coarsen < 1:
        raise HierarchyError(f"cumulative coarsening must be >= 1, got {cumulative_coarsen}")
    return index % cumulative_coarsen == 0


@dataclass(frozen=True)
class OwnershipMap:
    """Contiguous worker blocks over fine indices [0, fine_points).

    Every boundary except the final one is a multiple of `alignment`, so each
    block starts on a C-point of every level.
    """

    fine_points: int
    alignment: int
    blocks: tuple[tuple[int, int], ...]

    @property
    def num_workers(self) -> int:
        return len(self.blocks)

    def owner_of(self, index: int) -> int:
        for w, (lo, hi) in enumerate(self.blocks):
            if lo <= index < hi:
                return w
        raise HierarchyError(f"index {index} outside [0, {self.fine_points})")

    def level_range(self, worker: int, stride: int) -> tuple[int, int]:
        """Owned index range on the level whose fine-grid stride is given."""
        lo, hi = self.blocks[worker]
        if worker == self.num_workers - 1:
            return lo // stride, (hi - 1) // stride + 1
        return lo // stride, hi // stride


def partition(fine_points: int, workers: int, alignment: int) -> OwnershipMap:
    """Split [0, fine_points) into `workers` contiguous aligned blocks.

    Blocks are sized as evenly as possible in units of `alignment` intervals;
    the leftover units go to the leading workers. The final point belongs to
    the last block.
    """
    if fine_points < 2:
        raise HierarchyError(f"need at least 2 points to partition, got {fine_points}")
    if alignment < 1:
        raise HierarchyError(f"alignment must be >= 1, got {alignment}")
    if (fine_points - 1) % alignment != 0:
        raise HierarchyError(
            f"{fine_points - 1} intervals do not align to blocks of {alignment}"
        )
    units = (fine_points - 1) // alignment
    if not 1 <= workers <= units:
        raise HierarchyError(
            f"workers must be in [1, {units}] for {units} aligned blocks, got {workers}"
        )

    base, extra = divmod(units, workers)
    blocks = []
    start = 0
    for w in range(workers):
        size = (base + (1 if w < extra else 0)) * alignment
        stop = start + size
        blocks.append((start, stop if w < workers - 1 else fine_points))
        start = stop
    return OwnershipMap(fine_points=fine_points, alignment=alignment, blocks=tuple(blocks))
