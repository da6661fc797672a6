"""Synthetic radio maps: building layouts, transmitters, and pathloss targets.

Propagation model
-----------------
For a cell at Euclidean distance ``d`` (cells) from the transmitter,
``d`` is clamped below at ``reference_distance`` and the raw loss is::

    L = pl0_db + 10 * path_exponent * log10(d / reference_distance)
        + wall_loss_db * walls

``walls`` counts building cells strictly between transmitter and cell on the
discrete line joining them.  Line traversal rule: with ``n = max(|dr|, |dc|)``
the visited cells are ``(r0 + rint(k*dr/n), c0 + rint(k*dc/n))`` for
``k = 1 .. n-1`` (``rint`` rounds half to even).  Both endpoints are excluded.

The target is ``clip(1 - (L - pl0_db) / (max_pl_db - pl0_db), 0, 1)`` and the
transmitter cell is pinned to 1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FRMD"
VERSION = 1
MAX_PLACEMENT_ATTEMPTS = 1000


@dataclass(frozen=True)
class MapSpec:
    height: int = 16
    width: int = 16
    meters_per_cell: float = 4.0
    n_buildings: int = 6
    building_size_range: tuple[int, int] = (2, 4)
    pl0_db: float = 40.0
    path_exponent: float = 3.0
    wall_loss_db: float = 6.0
    max_pl_db: float = 110.0
    reference_distance: float = 1.0

    def __post_init__(self):
        lo, hi = self.building_size_range
        if self.height < 8 or self.width < 8:
            raise ValueError("map must be at least 8x8 cells")
        if self.meters_per_cell <= 0:
            raise ValueError("meters_per_cell must be positive")
        if self.path_exponent <= 0:
            raise ValueError("path_exponent must be positive")
        if self.wall_loss_db < 0:
            raise ValueError("wall_loss_db must be non-negative")
        if self.max_pl_db <= self.pl0_db:
            raise ValueError("max_pl_db must exceed pl0_db")
        if self.reference_distance <= 0:
            raise ValueError("reference_distance must be positive")
        if self.n_buildings < 0 or lo < 1 or hi < lo:
            raise ValueError("invalid building count or size range")

    @property
    def extent_m(self) -> tuple[float, float]:
        return self.width * self.meters_per_cell, self.height * self.meters_per_cell


@dataclass
class RadioSample:
    building: np.ndarray  # (H, W) uint8
    tx_raster: np.ndarray  # (H, W) uint8, one-hot
    target: np.ndarray  # (H, W) float32 in [0, 1]
    tx_coord: tuple[int, int]  # (row, col)
    meters_per_cell: float
    map_id: int = 0

    @property
    def tx_coord_m(self) -> tuple[float, float]:
        """Cell-centre position as (x, y) meters."""
        r, c = self.tx_coord
        return ((c + 0.5) * self.meters_per_cell, (r + 0.5) * self.meters_per_cell)


def generate_building_map(rng: np.random.Generator, spec: MapSpec) -> np.ndarray:
    """Random axis-aligned rectangles of building cells (overlap allowed).

    Retries the whole layout until at least one free cell remains.
    """
    H, W = spec.height, spec.width
    lo, hi = spec.building_size_range
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        grid = np.zeros((H, W), dtype=np.uint8)
        for _ in range(spec.n_buildings):
            h = min(int(rng.integers(lo, hi + 1)), H)
            w = min(int(rng.integers(lo, hi + 1)), W)
            r0 = int(rng.integers(0, H - h + 1))
            c0 = int(rng.integers(0, W - w + 1))
            grid[r0 : r0 + h, c0 : c0 + w] = 1
        if (grid == 0).any():
            return grid
    raise RuntimeError(
        f"no free transmitter cell after {MAX_PLACEMENT_ATTEMPTS} layout attempts"
    )


def place_transmitter(rng: np.random.Generator, building: np.ndarray) -> tuple[int, int]:
    free = np.flatnonzero(building.ravel() == 0)
    if free.size == 0:
        raise ValueError("building map has no free cell")
    idx = int(free[rng.integers(free.size)])
    r, c = divmod(idx, building.shape[1])
    return r, c


def count_walls(building: np.ndarray, tx_coord: tuple[int, int]) -> np.ndarray:
    """Building cells strictly between ``tx_coord`` and every cell of the grid."""
    H, W = building.shape
    r0, c0 = tx_coord
    rows, cols = np.mgrid[0:H, 0:W]
    dr, dc = rows - r0, cols - c0
    n = np.maximum(np.abs(dr), np.abs(dc))
    n_max = int(n.max())
    walls = np.zeros((H, W), dtype=np.int64)
    safe_n = np.maximum(n, 1)
    for k in range(1, n_max):
        active = k < n
        rr = r0 + np.rint(k * dr / safe_n).astype(np.int64)
        cc = c0 + np.rint(k * dc / safe_n).astype(np.int64)
        rr = np.where(active, rr, r0)
        cc = np.where(active, cc, c0)
        walls += active & (building[rr, cc] == 1)
    return walls


def compute_pathloss(
    building: np.ndarray, tx_coord: tuple[int, int], spec: MapSpec
) -> np.ndarray:
    """Normalized received-power map in [0, 1] (float64)."""
    H, W = building.shape
    r0, c0 = tx_coord
    if not (0 <= r0 < H and 0 <= c0 < W):
        raise ValueError(f"tx_coord {tx_coord} out of bounds")
    if building[r0, c0]:
        raise ValueError("transmitter placed inside a building")
    rows, cols = np.mgrid[0:H, 0:W]
    dist = np.hypot(rows - r0, cols - c0)
    dist = np.maximum(dist, spec.reference_distance)
    loss = (
        spec.pl0_db
        + 10.0 * spec.path_exponent * np.log10(dist / spec.reference_distance)
        + spec.wall_loss_db * count_walls(building, tx_coord)
    )
    value = np.clip(1.0 - (loss - spec.pl0_db) / (spec.max_pl_db - spec.pl0_db), 0.0, 1.0)
    value[r0, c0] = 1.0
    return value


def make_sample(
    building: np.ndarray, tx_coord: tuple[int, int], spec: MapSpec, map_id: int = 0
) -> RadioSample:
    raster = np.zeros_like(building)
    raster[tx_coord] = 1
    target = compute_pathloss(building, tx_coord, spec).astype(np.float32)
    return RadioSample(building, raster, target, tx_coord, spec.meters_per_cell, map_id)


@dataclass
class RadioDataset:
    """Stacked samples; ``map_id`` groups transmitter realizations of one map."""

    building: np.ndarray  # (N, H, W) uint8
    tx_raster: np.ndarray  # (N, H, W) uint8
    target: np.ndarray  # (N, H, W) float32
    tx_coord: np.ndarray  # (N, 2) int64, (row, col)
    map_id: np.ndarray  # (N,) int64
    meters_per_cell: np.ndarray  # (N,) float32
    _inputs: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.map_id)

    def __getitem__(self, i: int) -> RadioSample:
        return RadioSample(
            self.building[i],
            self.tx_raster[i],
            self.target[i],
            (int(self.tx_coord[i, 0]), int(self.tx_coord[i, 1])),
            float(self.meters_per_cell[i]),
            int(self.map_id[i]),
        )

    @classmethod
    def from_samples(cls, samples: list[RadioSample]) -> "RadioDataset":
        return cls(
            np.stack([s.building for s in samples]).astype(np.uint8),
            np.stack([s.tx_raster for s in samples]).astype(np.uint8),
            np.stack([s.target for s in samples]).astype(np.float32),
            np.array([s.tx_coord for s in samples], dtype=np.int64).reshape(-1, 2),
            np.array([s.map_id for s in samples], dtype=np.int64),
            np.array([s.meters_per_cell for s in samples], dtype=np.float32),
        )

    def subset(self, idx) -> "RadioDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return RadioDataset(
            self.building[idx],
            self.tx_raster[idx],
            self.target[idx],
            self.tx_coord[idx],
            self.map_id[idx],
            self.meters_per_cell[idx],
        )

    def inputs(self) -> np.ndarray:
        """Network input (N, 2, H, W) float64: building, transmitter raster."""
        if self._inputs is None:
            self._inputs = np.stack([self.building, self.tx_raster], axis=1).astype(np.float64)
        return self._inputs

    def targets(self) -> np.ndarray:
        """(N, 1, H, W) float64."""
        return self.target[:, None].astype(np.float64)

    def coords_m(self) -> np.ndarray:
        """(N, 2) transmitter positions as (x, y) meters."""
        mpc = self.meters_per_cell.astype(np.float64)
        x = (self.tx_coord[:, 1] + 0.5) * mpc
        y = (self.tx_coord[:, 0] + 0.5) * mpc
        return np.stack([x, y], axis=1)


def generate_dataset(
    rng: np.random.Generator, spec: MapSpec, n_maps: int, tx_per_map: int
) -> RadioDataset:
    samples = []
    for map_id in range(n_maps):
        building = generate_building_map(rng, spec)
        for _ in range(tx_per_map):
            tx = place_transmitter(rng, building)
            samples.append(make_sample(building, tx, spec, map_id))
    if not samples:
        H, W = spec.height, spec.width
        return RadioDataset(
            np.zeros((0, H, W), np.uint8),
            np.zeros((0, H, W), np.uint8),
            np.zeros((0, H, W), np.float32),
            np.zeros((0, 2), np.int64),
            np.zeros(0, np.int64),
            np.zeros(0, np.float32),
        )
    return RadioDataset.from_samples(samples)


def partition_clients(
    map_ids: np.ndarray, K: int, rng: np.random.Generator, n_val_maps: int = 0
) -> tuple[list[np.ndarray], np.ndarray]:
    """Split sample indices by map: validation maps first, then K shards.

    Returns ``(shards, val_idx)``; shard sizes differ by at most one map.
    """
    map_ids = np.asarray(map_ids)
    maps = np.unique(map_ids)
    if len(maps) - n_val_maps < K:
        raise ValueError(
            f"{len(maps) - n_val_maps} training maps cannot cover {K} clients"
        )
    order = rng.permutation(maps)
    val_maps, train_maps = order[:n_val_maps], order[n_val_maps:]
    val_idx = np.flatnonzero(np.isin(map_ids, val_maps))
    shards = [
        np.flatnonzero(np.isin(map_ids, group)) for group in np.array_split(train_maps, K)
    ]
    return shards, val_idx


def write_dataset(path: str | Path, data: RadioDataset) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(data)))
        for i in range(len(data)):
            H, W = data.building[i].shape
            fh.write(struct.pack("<HHH", H, W, int(data.map_id[i])))
            for grid in (data.building[i], data.tx_raster[i], data.target[i]):
                fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())
            fh.write(
                struct.pack(
                    "<fff",
                    float(data.tx_coord[i, 0]),
                    float(data.tx_coord[i, 1]),
                    float(data.meters_per_cell[i]),
                )
            )


def read_dataset(path: str | Path) -> RadioDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 12
    samples = []
    for _ in range(count):
        H, W, map_id = struct.unpack_from("<HHH", raw, pos)
        pos += 6
        grids = []
        for _ in range(3):
            grids.append(np.frombuffer(raw, dtype="<f4", count=H * W, offset=pos).reshape(H, W))
            pos += 4 * H * W
        tx_row, tx_col, mpc = struct.unpack_from("<fff", raw, pos)
        pos += 12
        samples.append(
            RadioSample(
                grids[0].astype(np.uint8),
                grids[1].astype(np.uint8),
                grids[2].astype(np.float32),
                (int(tx_row), int(tx_col)),
                float(np.float32(mpc)),
                map_id,
            )
        )
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return RadioDataset.from_samples(samples)
