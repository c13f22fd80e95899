"""Wafer map domain: the 38-class defect taxonomy, a deterministic
synthetic generator, preprocessing to network inputs, and the
stratified train/val split.

A wafer map is a 52x52 uint8 die grid (0=background, 1=pass, 2=fail);
valid dies live on the disc inscribed in the square. Defect classes are
unions of eight primitive patterns (center, donut, edge-loc, edge-ring,
loc, near-full, scratch, random). Each primitive renders from a child
seed derived from (map seed, primitive id), so the footprint of a
primitive is identical whether it appears alone or inside a mixed
class, and a mixed-class map is exactly the union of its parts plus the
shared 0.5% background noise field.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .tensor import Tensor

GRID_SIDE = 52
RADIUS = GRID_SIDE / 2.0
_CENTER = (GRID_SIDE - 1) / 2.0
NOISE_RATE = 0.005

_YY, _XX = np.mgrid[0:GRID_SIDE, 0:GRID_SIDE]
_RR = np.sqrt((_YY - _CENTER) ** 2 + (_XX - _CENTER) ** 2)
_THETA = np.arctan2(_YY - _CENTER, _XX - _CENTER)
DISC = _RR <= RADIUS

PRIMITIVES = ("C", "D", "EL", "ER", "L", "NF", "S", "R")
_PRIM_INDEX = {p: i for i, p in enumerate(PRIMITIVES)}
_NOISE_STREAM = 99

_SINGLE_NAMES = {
    "C": "Center", "D": "Donut", "EL": "Edge-Loc", "ER": "Edge-Ring",
    "L": "Loc", "NF": "Near-full", "S": "Scratch", "R": "Random",
}

_MIX2 = ["C+EL", "C+ER", "C+L", "C+S", "D+EL", "D+L", "ER+L", "EL+S",
         "ER+S", "L+S", "D+ER", "D+S", "EL+L"]
_MIX3 = ["C+EL+L", "C+EL+S", "C+ER+L", "C+ER+S", "C+L+S", "D+EL+L",
         "D+EL+S", "D+L+S", "D+ER+L", "D+ER+S", "EL+L+S", "ER+L+S"]
_MIX4 = ["C+L+EL+S", "C+L+ER+S", "D+L+EL+S", "D+L+ER+S"]


def _mix(codes):
    return tuple(codes.split("+"))


CLASS_DEFS = (
    [("Normal", ())]
    + [(_SINGLE_NAMES[p], (p,)) for p in PRIMITIVES]
    + [(m, _mix(m)) for m in _MIX2 + _MIX3 + _MIX4]
)
CLASS_NAMES = [name for name, _ in CLASS_DEFS]
NUM_CLASSES = len(CLASS_DEFS)
assert NUM_CLASSES == 38


@dataclass
class WaferMap:
    grid: np.ndarray  # (52, 52) uint8 in {0, 1, 2}
    label: int
    seed: int


def _rng_for(seed, stream):
    return np.random.default_rng(np.random.SeedSequence((seed, stream)))


def _prim_center(rng):
    rho = rng.uniform(0.15, 0.30) * RADIUS
    return _RR <= rho


def _prim_donut(rng):
    r_in = rng.uniform(0.25, 0.40)
    r_out = rng.uniform(r_in + 0.07, 0.50)
    return (_RR >= r_in * RADIUS) & (_RR <= r_out * RADIUS)


def _prim_edge_loc(rng):
    # deep enough to read as a wedge, but clear of the donut's outer
    # radius so EL and D stay visually distinct in mixed maps
    start = rng.uniform(0, 2 * np.pi)
    width = np.deg2rad(rng.uniform(30.0, 70.0))
    r_in = rng.uniform(0.68, 0.80) * RADIUS
    ang = (_THETA - start) % (2 * np.pi)
    return (_RR >= r_in) & (ang <= width)


def _prim_edge_ring(rng):
    thickness = rng.uniform(2.0, 3.0)
    band = _RR >= RADIUS - thickness
    if rng.random() < 0.65:
        return band
    start = rng.uniform(0, 2 * np.pi)
    span = np.deg2rad(rng.uniform(270.0, 360.0))
    ang = (_THETA - start) % (2 * np.pi)
    return band & (ang <= span)


def _prim_loc(rng):
    # grow a compact blob: always extend at a cell touching the most
    # filled neighbours, so the cluster stays roundish instead of
    # wandering into scratch-like tendrils
    size = int(rng.integers(8, 41))
    region = (_RR >= 0.25 * RADIUS) & (_RR <= 0.85 * RADIUS)
    ang = rng.uniform(0, 2 * np.pi)
    rad = rng.uniform(0.35, 0.65) * RADIUS
    sy = int(round(_CENTER + rad * np.sin(ang)))
    sx = int(round(_CENTER + rad * np.cos(ang)))
    mask = np.zeros((GRID_SIDE, GRID_SIDE), dtype=bool)
    mask[sy, sx] = True
    count = 1
    while count < size:
        ys, xs = np.nonzero(mask)
        candidates = {}
        for y, x in zip(ys, xs):
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if (0 <= ny < GRID_SIDE and 0 <= nx < GRID_SIDE
                        and region[ny, nx] and not mask[ny, nx]):
                    candidates[ny, nx] = candidates.get((ny, nx), 0) + 1
        if not candidates:
            break
        best = max(candidates.values())
        pool = sorted(k for k, v in candidates.items() if v == best)
        ny, nx = pool[int(rng.integers(len(pool)))]
        mask[ny, nx] = True
        count += 1
    return mask


def _prim_near_full(rng):
    rate = rng.uniform(0.60, 0.85)
    return rng.random((GRID_SIDE, GRID_SIDE)) < rate


def _prim_scratch(rng):
    width = int(rng.integers(1, 3))
    total_len = rng.uniform(0.40, 0.90) * 2 * RADIUS
    segments = int(rng.integers(2, 4))
    start_rad = rng.uniform(0.0, 0.55) * RADIUS
    start_ang = rng.uniform(0, 2 * np.pi)
    y = _CENTER + start_rad * np.sin(start_ang)
    x = _CENTER + start_rad * np.cos(start_ang)
    heading = rng.uniform(0, 2 * np.pi)
    mask = np.zeros((GRID_SIDE, GRID_SIDE), dtype=bool)
    step = 0.5
    per_segment = max(1, int(total_len / segments / step))
    for _ in range(segments):
        dy, dx = np.sin(heading), np.cos(heading)
        for _ in range(per_segment):
            y += step * dy
            x += step * dx
            iy, ix = int(round(y)), int(round(x))
            if 0 <= iy < GRID_SIDE and 0 <= ix < GRID_SIDE:
                mask[iy, ix] = True
                if width == 2:
                    py = int(round(y - dx))
                    px = int(round(x + dy))
                    if 0 <= py < GRID_SIDE and 0 <= px < GRID_SIDE:
                        mask[py, px] = True
        heading += rng.uniform(-0.3, 0.3)
    return mask


def _prim_random(rng):
    rate = rng.uniform(0.08, 0.20)
    return rng.random((GRID_SIDE, GRID_SIDE)) < rate


_RENDER = {
    "C": _prim_center,
    "D": _prim_donut,
    "EL": _prim_edge_loc,
    "ER": _prim_edge_ring,
    "L": _prim_loc,
    "NF": _prim_near_full,
    "S": _prim_scratch,
    "R": _prim_random,
}


def generate_wafer_map(class_id, seed):
    """Render one wafer map for a taxonomy class, deterministically."""
    if not 0 <= class_id < NUM_CLASSES:
        raise DataError(f"class_id must be in [0, {NUM_CLASSES}), got {class_id}")
    grid = np.zeros((GRID_SIDE, GRID_SIDE), dtype=np.uint8)
    grid[DISC] = 1
    for code in CLASS_DEFS[class_id][1]:
        prim_mask = _RENDER[code](_rng_for(seed, _PRIM_INDEX[code]))
        grid[prim_mask & DISC] = 2
    noise = _rng_for(seed, _NOISE_STREAM).random((GRID_SIDE, GRID_SIDE)) < NOISE_RATE
    grid[noise & DISC] = 2
    assert (grid == 1).any(), "generator produced a wafer with no passing dies"
    return WaferMap(grid=grid, label=class_id, seed=seed)


def derive_mask(wafer):
    """Ground-truth defect mask: exactly the failing dies."""
    grid = wafer.grid if isinstance(wafer, WaferMap) else np.asarray(wafer)
    return grid == 2


@dataclass
class WaferSample:
    image: Tensor  # (1, S, S) float32 in {0, 0.5, 1}
    mask: Tensor   # (1, S, S) float32 in {0, 1}
    label: Tensor  # (1, num_classes) one-hot float32


def resize_indices(dst, src=GRID_SIDE):
    """Nearest-neighbor source row/col for each destination index."""
    return (np.arange(dst) * src) // dst


def preprocess(wafer, input_size=224):
    """One wafer map -> network-ready WaferSample at the given size."""
    grid = wafer.grid
    if grid.shape != (GRID_SIDE, GRID_SIDE):
        raise DataError(f"expected ({GRID_SIDE},{GRID_SIDE}) grid, got {grid.shape}")
    if grid.max(initial=0) > 2:
        raise DataError("die states must be 0, 1, or 2")
    si = resize_indices(input_size)
    big = grid[si[:, None], si[None, :]]
    image = (big.astype(np.float32) / 2.0)[None]
    mask = (big == 2).astype(np.float32)[None]
    label = np.zeros((1, NUM_CLASSES), dtype=np.float32)
    label[0, wafer.label] = 1.0
    return WaferSample(Tensor(image), Tensor(mask), Tensor(label))


@dataclass
class WaferDataset:
    grids: np.ndarray   # (N, 52, 52) uint8
    labels: np.ndarray  # (N,) int64

    def __len__(self):
        return len(self.grids)

    def class_counts(self):
        return np.bincount(self.labels, minlength=NUM_CLASSES)


def make_dataset(per_class, seed=0):
    """38 * per_class synthetic wafers, class-major order, deterministic."""
    grids = np.empty((NUM_CLASSES * per_class, GRID_SIDE, GRID_SIDE), dtype=np.uint8)
    labels = np.empty(NUM_CLASSES * per_class, dtype=np.int64)
    i = 0
    for c in range(NUM_CLASSES):
        for k in range(per_class):
            map_seed = int(np.random.SeedSequence((seed, c, k)).generate_state(1)[0])
            grids[i] = generate_wafer_map(c, map_seed).grid
            labels[i] = c
            i += 1
    return WaferDataset(grids, labels)


def batch_arrays(dataset, indices, input_size=224, dtype=np.float32):
    """Assemble (images (B,1,S,S), masks (B,1,S,S), one-hot (B,1,K)) arrays."""
    idx = np.asarray(indices)
    g = dataset.grids[idx]
    si = resize_indices(input_size)
    big = g[:, si[:, None], si[None, :]]
    images = (big.astype(dtype) / 2.0)[:, None]
    masks = (big == 2).astype(dtype)[:, None]
    onehot = np.zeros((len(idx), 1, NUM_CLASSES), dtype=dtype)
    onehot[np.arange(len(idx)), 0, dataset.labels[idx]] = 1.0
    return images, masks, onehot


def split_dataset(dataset, fraction=0.8, seed=0):
    """Deterministic stratified split; train size is exactly floor(N * fraction).

    The per-class train counts follow largest-remainder apportionment,
    so equal-sized classes split identically and the totals are exact.
    Classes with at least two members keep at least one sample on each
    side.
    """
    if not 0.0 < fraction < 1.0:
        raise DataError(f"split fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    counts = dataset.class_counts()
    train_total = int(np.floor(n * fraction))
    exact = counts * fraction
    base = np.floor(exact).astype(int)
    # keep both sides nonempty where possible
    for k in range(NUM_CLASSES):
        if counts[k] >= 2:
            base[k] = min(max(base[k], 1), counts[k] - 1)
        else:
            base[k] = min(base[k], counts[k])
    remainder = exact - np.floor(exact)
    order = sorted(range(NUM_CLASSES), key=lambda k: (-remainder[k], k))
    drift = train_total - int(base.sum())
    while drift != 0:
        moved = False
        for k in order:
            if drift == 0:
                break
            step = 1 if drift > 0 else -1
            new = base[k] + step
            lo = 1 if counts[k] >= 2 else 0
            hi = counts[k] - 1 if counts[k] >= 2 else counts[k]
            if lo <= new <= hi:
                base[k] = new
                drift -= step
                moved = True
        if not moved:
            break  # nonempty-side guards win over the exact total
    rng = np.random.default_rng(np.random.SeedSequence((seed, 4242)))
    train_idx, val_idx = [], []
    for k in range(NUM_CLASSES):
        members = np.flatnonzero(dataset.labels == k)
        members = members[rng.permutation(len(members))]
        train_idx.extend(members[: base[k]])
        val_idx.extend(members[base[k] :])
    train_idx = np.sort(np.asarray(train_idx, dtype=np.int64))
    val_idx = np.sort(np.asarray(val_idx, dtype=np.int64))
    return (
        WaferDataset(dataset.grids[train_idx], dataset.labels[train_idx]),
        WaferDataset(dataset.grids[val_idx], dataset.labels[val_idx]),
    )
