import numpy as np
import pytest

from wscn import data as D
from wscn.errors import DataError


def fails(class_id, seed):
    return D.generate_wafer_map(class_id, seed).grid == 2


# --- taxonomy -----------------------------------------------------------------

def test_taxonomy_shape():
    assert D.NUM_CLASSES == 38
    assert len(D.CLASS_NAMES) == 38
    assert len(set(D.CLASS_NAMES)) == 38
    sizes = [len(prims) for _, prims in D.CLASS_DEFS]
    assert sizes.count(0) == 1   # normal
    assert sizes.count(1) == 8   # singles
    assert sizes.count(2) == 13  # doubles
    assert sizes.count(3) == 12  # triples
    assert sizes.count(4) == 4   # quadruples
    for _, prims in D.CLASS_DEFS:
        assert all(p in D.PRIMITIVES for p in prims)
        assert len(set(prims)) == len(prims)


def test_class_zero_is_normal():
    assert D.CLASS_DEFS[0] == ("Normal", ())


# --- generator invariants -------------------------------------------------------

def test_generator_deterministic():
    a = D.generate_wafer_map(13, seed=99)
    b = D.generate_wafer_map(13, seed=99)
    np.testing.assert_array_equal(a.grid, b.grid)
    c = D.generate_wafer_map(13, seed=100)
    assert not np.array_equal(a.grid, c.grid)


def test_wafer_region_is_disc():
    assert 2000 < D.DISC.sum() < 2200  # inscribed disc of the 52x52 square
    for cid in (0, 4, 6, 20, 37):
        g = D.generate_wafer_map(cid, seed=1).grid
        assert g.shape == (52, 52) and g.dtype == np.uint8
        assert set(np.unique(g)) <= {0, 1, 2}
        assert (g[~D.DISC] == 0).all()        # off-disc stays background
        assert (g[D.DISC] != 0).all()         # on-disc is pass or fail
        assert (g == 1).any()                 # at least one pass die


def test_mixed_class_is_union_of_singles():
    # primitive footprints come from per-primitive child seeds, so a mixed
    # map must equal the exact union of its single-defect parts
    single_of = {prims[0]: cid for cid, (_, prims) in enumerate(D.CLASS_DEFS)
                 if len(prims) == 1}
    for cid, (_, prims) in enumerate(D.CLASS_DEFS):
        if len(prims) < 2:
            continue
        for seed in (0, 7):
            expected = np.zeros((52, 52), dtype=bool)
            for p in prims:
                expected |= fails(single_of[p], seed)
            np.testing.assert_array_equal(fails(cid, seed), expected,
                                          err_msg=f"class {cid} seed {seed}")


def test_normal_has_only_noise():
    rates = [fails(0, s).sum() / D.DISC.sum() for s in range(10)]
    assert max(rates) < 0.02
    assert np.mean(rates) == pytest.approx(0.005, abs=0.003)


def test_near_full_rate_band():
    for s in range(5):
        rate = fails(6, s).sum() / D.DISC.sum()
        assert 0.55 < rate < 0.90


def test_center_defect_sits_in_center():
    for s in range(5):
        f = fails(1, s) & ~fails(0, s)  # drop the shared noise dies
        ys, xs = np.nonzero(f)
        r = np.sqrt((ys - 25.5) ** 2 + (xs - 25.5) ** 2)
        assert r.max() <= 0.3 * D.RADIUS + 1.0


def test_edge_ring_hugs_rim():
    for s in range(5):
        f = fails(4, s) & ~fails(0, s)
        ys, xs = np.nonzero(f)
        r = np.sqrt((ys - 25.5) ** 2 + (xs - 25.5) ** 2)
        assert r.min() >= D.RADIUS - 3.5


def test_loc_blob_size_band():
    for s in range(5):
        f = fails(5, s) & ~fails(0, s)
        assert 4 <= f.sum() <= 45


def test_scratch_is_thin_and_long():
    for s in range(5):
        f = fails(7, s) & ~fails(0, s)
        n = f.sum()
        # a 1-2 die wide polyline: bounded by twice the length budget,
        # and elongated rather than blob-shaped
        assert 10 <= n <= 2 * int(0.9 * 2 * D.RADIUS * 2) + 8
        ys, xs = np.nonzero(f)
        assert max(ys.max() - ys.min(), xs.max() - xs.min()) >= 8


def test_generator_rejects_bad_class():
    with pytest.raises(DataError):
        D.generate_wafer_map(38, seed=0)
    with pytest.raises(DataError):
        D.generate_wafer_map(-1, seed=0)


def test_derive_mask():
    w = D.generate_wafer_map(9, seed=5)
    np.testing.assert_array_equal(D.derive_mask(w), w.grid == 2)
    np.testing.assert_array_equal(D.derive_mask(w.grid), w.grid == 2)


# --- preprocessing ---------------------------------------------------------------

def test_resize_indices_cover_source():
    si = D.resize_indices(224)
    assert si[0] == 0 and si[-1] == 51
    assert (np.diff(si) >= 0).all()
    assert set(si.tolist()) == set(range(52))


def test_preprocess_values_and_shapes():
    w = D.generate_wafer_map(17, seed=2)
    s = D.preprocess(w, input_size=224)
    assert s.image.shape == (1, 224, 224)
    assert s.mask.shape == (1, 224, 224)
    assert s.label.shape == (1, 38)
    assert set(np.unique(s.image.data)) <= {0.0, 0.5, 1.0}
    assert set(np.unique(s.mask.data)) <= {0.0, 1.0}
    # the mask is exactly the fail-valued pixels of the image
    np.testing.assert_array_equal(s.mask.data, (s.image.data == 1.0).astype(np.float32))
    assert s.label.data[0, 17] == 1.0 and s.label.data.sum() == 1.0


def test_preprocess_nearest_neighbor_exact_2x():
    w = D.generate_wafer_map(3, seed=4)
    s = D.preprocess(w, input_size=104)
    expected = np.kron((w.grid == 2).astype(np.float32), np.ones((2, 2), np.float32))
    np.testing.assert_array_equal(s.mask.data[0], expected)


def test_preprocess_rejects_bad_grids():
    w = D.WaferMap(grid=np.zeros((10, 10), dtype=np.uint8), label=0, seed=0)
    with pytest.raises(DataError):
        D.preprocess(w)
    w = D.WaferMap(grid=np.full((52, 52), 7, dtype=np.uint8), label=0, seed=0)
    with pytest.raises(DataError):
        D.preprocess(w)


# --- dataset / batches ------------------------------------------------------------

def test_make_dataset_layout():
    ds = D.make_dataset(per_class=2, seed=0)
    assert len(ds) == 76
    assert ds.grids.shape == (76, 52, 52)
    np.testing.assert_array_equal(ds.labels, np.repeat(np.arange(38), 2))
    np.testing.assert_array_equal(ds.class_counts(), np.full(38, 2))
    # samples within a class differ (per-sample seeds)
    assert not np.array_equal(ds.grids[2], ds.grids[3])


def test_make_dataset_deterministic():
    a = D.make_dataset(per_class=1, seed=3)
    b = D.make_dataset(per_class=1, seed=3)
    np.testing.assert_array_equal(a.grids, b.grids)
    c = D.make_dataset(per_class=1, seed=4)
    assert not np.array_equal(a.grids, c.grids)


def test_batch_arrays_contract():
    ds = D.make_dataset(per_class=1, seed=0)
    images, masks, onehot = D.batch_arrays(ds, [0, 5, 37], input_size=112)
    assert images.shape == (3, 1, 112, 112)
    assert masks.shape == (3, 1, 112, 112)
    assert onehot.shape == (3, 1, 38)
    np.testing.assert_array_equal(onehot.sum(axis=2), np.ones((3, 1)))
    assert onehot[0, 0, 0] == 1 and onehot[1, 0, 5] == 1 and onehot[2, 0, 37] == 1
    np.testing.assert_array_equal(masks, (images == 1.0).astype(np.float32))


# --- split -------------------------------------------------------------------------

def test_split_uniform_exact():
    ds = D.make_dataset(per_class=10, seed=0)
    train, val = D.split_dataset(ds, fraction=0.8, seed=0)
    assert len(train) == 304 and len(val) == 76
    np.testing.assert_array_equal(train.class_counts(), np.full(38, 8))
    np.testing.assert_array_equal(val.class_counts(), np.full(38, 2))


def test_split_total_is_floor_of_fraction():
    ds = D.make_dataset(per_class=5, seed=1)  # 190 samples
    train, val = D.split_dataset(ds, fraction=0.7, seed=0)
    assert len(train) == int(np.floor(190 * 0.7)) == 133
    assert len(val) == 57
    counts = train.class_counts()
    assert set(counts.tolist()) == {3, 4}  # largest remainder bumps some classes


def test_split_nonempty_guard_beats_exact_total():
    # 3 members per class at 0.8 asks for 2.4 each; leaving one sample
    # for validation caps train at 2, so the total lands below the target
    ds = D.make_dataset(per_class=3, seed=1)
    train, val = D.split_dataset(ds, fraction=0.8, seed=0)
    np.testing.assert_array_equal(train.class_counts(), np.full(38, 2))
    np.testing.assert_array_equal(val.class_counts(), np.full(38, 1))


def test_split_deterministic_and_disjoint():
    ds = D.make_dataset(per_class=3, seed=1)
    t1, v1 = D.split_dataset(ds, fraction=0.8, seed=5)
    t2, v2 = D.split_dataset(ds, fraction=0.8, seed=5)
    np.testing.assert_array_equal(t1.grids, t2.grids)
    np.testing.assert_array_equal(v1.grids, v2.grids)
    # different seed, different membership
    t3, _ = D.split_dataset(ds, fraction=0.8, seed=6)
    assert not np.array_equal(t1.grids, t3.grids)
    # every sample lands on exactly one side
    assert len(t1) + len(v1) == len(ds)


def test_split_largest_remainder_non_uniform():
    grids = np.zeros((10, 52, 52), dtype=np.uint8)
    labels = np.asarray([0] * 5 + [1] * 4 + [2] * 1, dtype=np.int64)
    ds = D.WaferDataset(grids, labels)
    train, val = D.split_dataset(ds, fraction=0.5, seed=0)
    assert len(train) == 5
    counts = train.class_counts()[:3]
    # exact shares 2.5/2.0/0.5 -> floors 2/2/0, remainder goes to class 0
    np.testing.assert_array_equal(counts, [3, 2, 0])


def test_split_keeps_both_sides_nonempty_per_class():
    grids = np.zeros((8, 52, 52), dtype=np.uint8)
    labels = np.asarray([0, 0, 1, 1, 2, 2, 3, 3], dtype=np.int64)
    ds = D.WaferDataset(grids, labels)
    train, val = D.split_dataset(ds, fraction=0.9, seed=0)
    assert (train.class_counts()[:4] >= 1).all()
    assert (val.class_counts()[:4] >= 1).all()


def test_split_rejects_bad_fraction():
    ds = D.make_dataset(per_class=1, seed=0)
    for bad in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(DataError):
            D.split_dataset(ds, fraction=bad)
