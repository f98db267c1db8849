import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anisoseg.volume import (
    Grid3,
    GridMismatchError,
    InvalidGridError,
    Mask,
    NoOverlapError,
    Volume,
    crop_or_pad,
    intersect_grids,
    normalize_percentile,
    random_crop,
    read_vraw,
    resample_linear,
    resample_nearest,
    write_vraw,
)


def brute_trilinear(arr, src, pt):
    """Trilinear value at world point ``pt``, evaluated from the eight corners."""
    u = [min(max((pt[a] - src.origin[a]) / src.spacing[a], 0.0), src.dims[a] - 1) for a in range(3)]
    base = [int(np.floor(x)) for x in u]
    val = 0.0
    for corner in itertools.product((0, 1), repeat=3):
        w = 1.0
        idx = []
        for a in range(3):
            i = min(base[a] + corner[a], src.dims[a] - 1)
            t = u[a] - base[a]
            w *= t if corner[a] else 1 - t
            idx.append(i)
        val += w * arr[tuple(idx)]
    return val


def brute_nearest(lab, src, pt):
    best, best_d = None, np.inf
    for idx in np.ndindex(src.dims):
        d = np.sum((src.index_to_world(idx) - pt) ** 2)
        if d < best_d:
            best, best_d = idx, d
    return lab[best]


def test_grid_validation():
    with pytest.raises(InvalidGridError):
        Grid3((0, 2, 2))
    with pytest.raises(InvalidGridError):
        Grid3((2, 2, 2), (1.0, 0.0, 1.0))
    with pytest.raises(InvalidGridError):
        Grid3((2, 2))
    g = Grid3((4, 5, 6), (0.5, 0.5, 2.0))
    assert g.extent == (2.0, 2.5, 12.0)


def test_resample_identity_bitwise(rng):
    g = Grid3((5, 4, 3), (0.5, 0.5, 2.0), (1.0, -2.0, 3.0))
    v = Volume(g, rng.standard_normal(g.dims).astype(np.float32))
    np.testing.assert_array_equal(resample_linear(v, g).samples, v.samples)
    # a grid that only differs by float noise in origin takes the snapping path
    g2 = Grid3(g.dims, g.spacing, (1.0 + 1e-12, -2.0, 3.0))
    np.testing.assert_array_equal(resample_linear(v, g2).samples, v.samples)


def test_resample_constant_field():
    src = Volume(Grid3((3, 4, 2), (1, 1, 3)), np.full((3, 4, 2), 2.5))
    out = resample_linear(src, Grid3((7, 3, 9), (0.7, 1.3, 0.4), (-3.0, 1.0, -2.0)))
    assert np.all(out.samples == 2.5)


def test_resample_two_voxel_example():
    src = Volume(Grid3((2, 1, 1)), np.array([0.0, 1.0]).reshape(2, 1, 1))
    target = Grid3((3, 1, 1), (0.5, 1, 1), (0.0, 0, 0))
    got = resample_linear(src, target).samples.ravel()
    ref = [brute_trilinear(src.samples, src.grid, target.index_to_world((i, 0, 0))) for i in range(3)]
    np.testing.assert_allclose(got, ref, atol=1e-12)
    np.testing.assert_allclose(got, [0.0, 0.5, 1.0], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_resample_matches_brute_trilinear(seed):
    r = np.random.default_rng(seed)
    src = Grid3(tuple(r.integers(1, 5, 3)), tuple(r.uniform(0.4, 2.0, 3)), tuple(r.uniform(-2, 2, 3)))
    tgt = Grid3(tuple(r.integers(1, 5, 3)), tuple(r.uniform(0.3, 2.5, 3)), tuple(r.uniform(-3, 3, 3)))
    arr = r.standard_normal(src.dims)
    got = resample_linear(Volume(src, arr), tgt).samples
    for idx in np.ndindex(tgt.dims):
        assert abs(got[idx] - brute_trilinear(arr, src, tgt.index_to_world(idx))) < 1e-12


def test_resample_nearest_vs_exhaustive(rng):
    src = Grid3((4, 4, 4))
    lab = (rng.random(src.dims) < 0.5).astype(np.uint8)
    tgt = Grid3((8, 8, 8), (0.5, 0.5, 0.5), (-0.25, -0.25, -0.25))
    got = resample_nearest(Mask(src, lab), tgt).labels
    for idx in np.ndindex(tgt.dims):
        assert got[idx] == brute_nearest(lab, src, tgt.index_to_world(idx))
    assert set(np.unique(got)) <= {0, 1}


def test_resample_nearest_trivial(rng):
    g = Grid3((3, 3, 3))
    m = Mask(g, rng.random(g.dims) < 0.5)
    np.testing.assert_array_equal(resample_nearest(m, g).labels, m.labels)
    ones = Mask(g, np.ones(g.dims, np.uint8))
    assert resample_nearest(ones, Grid3((5, 2, 7), (0.3, 2, 0.5), (4, 4, 4))).labels.all()


def test_intersect_grids_interval_arithmetic():
    a = Grid3((100, 10, 10), (1, 1, 1), (0.5, 0.5, 0.5))  # [0, 100]
    b = Grid3((100, 10, 10), (1, 1, 1), (20.5, 0.5, 0.5))  # [20, 120]
    out = intersect_grids([a, b], spacing=(2.0, 1.0, 1.0))
    np.testing.assert_allclose(out.lower, [20, 0, 0])
    np.testing.assert_allclose(out.upper, [100, 10, 10])
    assert out.dims == (40, 10, 10)
    single = intersect_grids([a], spacing=a.spacing)
    np.testing.assert_allclose([single.lower, single.upper], [a.lower, a.upper])
    np.testing.assert_allclose(intersect_grids([a, a], a.spacing).upper, a.upper)


def test_intersect_grids_no_overlap():
    a = Grid3((4, 4, 4))
    b = Grid3((4, 4, 4), origin=(10, 0, 0))
    with pytest.raises(NoOverlapError):
        intersect_grids([a, b])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(3, 12)), min_size=3, max_size=3))
def test_intersect_commutative_associative(specs):
    grids = [Grid3((n, 3, 3), (1, 1, 1), (o, 0, 0)) for o, n in specs]
    try:
        ref = intersect_grids(grids, (1, 1, 1))
    except NoOverlapError:
        return
    for perm in itertools.permutations(grids):
        out = intersect_grids(perm, (1, 1, 1))
        np.testing.assert_allclose([out.lower, out.upper], [ref.lower, ref.upper])
    try:
        nested = intersect_grids([intersect_grids(grids[:2], (1, 1, 1)), grids[2]], (1, 1, 1))
    except NoOverlapError:
        pytest.fail("nested intersection lost the overlap")
    np.testing.assert_allclose([nested.lower, nested.upper], [ref.lower, ref.upper])


def test_crop_center_and_origin():
    g = Grid3((10, 10, 10), (1, 1, 2), (0, 0, 0))
    arr = np.arange(1000.0).reshape(g.dims)
    out = crop_or_pad(Volume(g, arr), (6, 6, 6))
    np.testing.assert_array_equal(out.samples, arr[2:8, 2:8, 2:8])
    np.testing.assert_allclose(out.grid.origin, (2, 2, 4))


def test_crop_odd_remainder_high_side():
    v = Volume(Grid3((5, 1, 1)), np.arange(5.0).reshape(5, 1, 1))
    assert crop_or_pad(v, (2, 1, 1)).samples.ravel().tolist() == [1.0, 2.0]
    padded = crop_or_pad(v, (8, 1, 1), fill=-1)
    assert padded.samples.ravel().tolist() == [-1, 0, 1, 2, 3, 4, -1, -1]
    assert padded.grid.origin[0] == -1.0


def test_pad_then_crop_round_trip(rng):
    v = Volume(Grid3((4, 3, 5), (0.5, 1, 2), (1, 2, 3)), rng.standard_normal((4, 3, 5)))
    same = crop_or_pad(v, v.grid.dims)
    np.testing.assert_array_equal(same.samples, v.samples)
    big = crop_or_pad(v, (6, 6, 6), fill=0)
    assert np.all(big.samples[0] == 0) and np.all(big.samples[:, :, -1] == 0)
    back = crop_or_pad(big, v.grid.dims)
    np.testing.assert_array_equal(back.samples, v.samples)
    assert back.grid == v.grid


def test_normalize_constant_and_range():
    g = Grid3((2, 2, 2))
    assert np.all(normalize_percentile(Volume(g, np.full(g.dims, 7.0))).samples == 0)
    v = normalize_percentile(Volume(Grid3((100, 1, 1)), np.linspace(-3, 5, 100).reshape(100, 1, 1)), 0, 100)
    assert v.samples.min() == 0 and v.samples.max() == 1


def test_normalize_outliers_vs_sorted_percentile(rng):
    x = rng.normal(size=200)
    x[17], x[101] = 1e6, -1e6
    v = normalize_percentile(Volume(Grid3((200, 1, 1)), x.reshape(200, 1, 1))).samples.ravel()

    def pct(sorted_x, p):
        pos = p / 100 * (len(sorted_x) - 1)
        lo = int(np.floor(pos))
        return sorted_x[lo] + (pos - lo) * (sorted_x[min(lo + 1, len(sorted_x) - 1)] - sorted_x[lo])

    s = sorted(x)
    a, b = pct(s, 1), pct(s, 99)
    assert v[17] == 1.0 and v[101] == 0.0
    np.testing.assert_allclose(v, (np.clip(x, a, b) - a) / (b - a), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60))
def test_normalize_always_in_unit_interval(vals):
    v = normalize_percentile(Volume(Grid3((len(vals), 1, 1)), np.array(vals).reshape(-1, 1, 1)))
    assert np.all((v.samples >= 0) & (v.samples <= 1))


def test_normalize_idempotent(rng):
    x = np.sort(rng.random(301))
    x[:4], x[-4:] = 0.0, 1.0  # 1st and 99th percentiles are exactly 0 and 1
    v = Volume(Grid3((301, 1, 1)), x.reshape(-1, 1, 1))
    np.testing.assert_array_equal(normalize_percentile(v).samples, v.samples)


def test_random_crop_offsets_and_bookkeeping():
    g = Grid3((146, 146, 146), (0.5, 0.5, 0.5), (3.0, -1.0, 2.0))
    vol = Volume(g, np.zeros(g.dims, np.float32))
    lab = np.zeros(g.dims, np.uint8)
    lab[70, 71, 72] = 1
    mask = Mask(g, lab)
    seen = set()
    for seed in range(20):
        (v,), m = random_crop([vol], mask, (144, 144, 144), np.random.default_rng(seed))
        offset = tuple(np.rint(g.world_to_index(m.grid.origin)).astype(int))
        assert all(0 <= o <= 2 for o in offset)
        seen.add(offset)
        assert v.grid == m.grid
        fg = np.argwhere(m.labels)[0]
        np.testing.assert_allclose(m.grid.index_to_world(fg), g.index_to_world((70, 71, 72)))
        (v2,), m2 = random_crop([vol], mask, (144, 144, 144), np.random.default_rng(seed))
        assert m2.grid == m.grid
    assert len(seen) > 1


def test_random_crop_identity_and_mismatch(rng):
    g = Grid3((4, 4, 4))
    vol = Volume(g, rng.random(g.dims))
    (v,), m = random_crop([vol], Mask(g, np.zeros(g.dims)), (4, 4, 4), rng)
    np.testing.assert_array_equal(v.samples, vol.samples)
    with pytest.raises(GridMismatchError):
        random_crop([Volume(Grid3((4, 4, 5)), np.zeros((4, 4, 5)))], Mask(g, np.zeros(g.dims)), (2, 2, 2), rng)


def test_vraw_round_trip(tmp_path, rng):
    g = Grid3((3, 4, 5), (0.5, 0.5, 2.0), (1.5, -2.0, 0.25))
    v = Volume(g, rng.standard_normal(g.dims).astype(np.float32))
    m = Mask(g, rng.random(g.dims) < 0.3)
    write_vraw(tmp_path / "vol.raw", v)
    write_vraw(tmp_path / "mask.raw", m)
    v2, m2 = read_vraw(tmp_path / "vol.json"), read_vraw(tmp_path / "mask.raw")
    assert v2.grid == g and m2.grid == g
    assert v2.samples.tobytes() == v.samples.tobytes()
    np.testing.assert_array_equal(m2.labels, m.labels)
    # first axis fastest on disk
    raw = np.frombuffer((tmp_path / "vol.raw").read_bytes(), "<f4")
    assert raw[1] == v.samples[1, 0, 0]


def test_mask_rejects_non_binary():
    with pytest.raises(ValueError):
        Mask(Grid3((2, 1, 1)), np.array([0, 2]).reshape(2, 1, 1))
