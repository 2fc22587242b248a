import datetime as dt
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sen4x.datapipe import (
    AllMaskedError,
    DataError,
    DatasetManifest,
    DateWindowError,
    HistogramMatcher,
    InsufficientDataError,
    PercentileNormalizer,
    PrepareConfig,
    RevisitCandidate,
    band_percentiles,
    clip_normalize,
    downsample_bilinear,
    downsample_labels,
    extract_patches,
    high_reflectance_fraction,
    histogram_match,
    impute_masked,
    load_patch_arrays,
    prepare_dataset,
    score_revisit,
    select_revisits,
    split_dataset,
)
from sen4x.synth import synth_raw_tiles

from oracles import percentile_sorted, pure_footprint_scan, windows_cover

REF = dt.date(2022, 6, 1)


def cand(i, days, cloud=0.0, invalid=0.0, bright=0.0):
    return RevisitCandidate(f"c{i:02d}", REF + dt.timedelta(days=days), REF, cloud, invalid, bright)


# revisit selection

def test_score_components():
    t, c, s = score_revisit(cand(0, -365, cloud=0.2, invalid=0.3, bright=0.1))
    assert t == pytest.approx(0.5) and c == pytest.approx(0.7) and s == pytest.approx(0.9)
    assert score_revisit(cand(1, 730))[0] == 0.0


def test_score_rejects_outside_window():
    with pytest.raises(DateWindowError):
        score_revisit(cand(0, 731))


def test_fraction_validation():
    with pytest.raises(ValueError):
        cand(0, 0, cloud=1.5)


def test_select_orders_and_breaks_ties():
    cs = [cand(0, 10), cand(1, -10), cand(2, 5, cloud=0.5), cand(3, 0)]
    # c00 and c01 tie on score and |days|; id decides
    assert select_revisits(cs, k=4) == ["c03", "c00", "c01", "c02"]


def test_select_drops_out_of_window_and_errors_when_short():
    cs = [cand(i, i) for i in range(8)] + [cand(9, 900)]
    assert "c09" not in select_revisits(cs)
    with pytest.raises(InsufficientDataError, match="tileX"):
        select_revisits(cs[:7] + [cand(9, 900)], tile_id="tileX")


@given(st.lists(st.tuples(st.integers(-730, 730), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)),
                min_size=8, max_size=20))
@settings(max_examples=50, deadline=None)
def test_select_is_permutation_invariant(specs):
    cs = [cand(i, *s) for i, s in enumerate(specs)]
    a = select_revisits(cs)
    b = select_revisits(list(reversed(cs)))
    assert a == b and len(set(a)) == 8


def test_high_reflectance_fraction():
    img = np.zeros((4, 2, 2))
    img[3, 0, 0] = 0.9
    assert high_reflectance_fraction(img) == 0.25
    valid = np.array([[True, False], [False, False]])
    assert high_reflectance_fraction(img, valid) == 1.0


# radiometry

@given(arrays(np.float64, (3, 6, 5), elements=st.floats(-5, 5)), st.floats(0, 49), st.floats(51, 100))
@settings(max_examples=50, deadline=None)
def test_percentiles_match_sorted_oracle(x, lo, hi):
    plo, phi = band_percentiles(x, lo_pct=lo, hi_pct=hi)
    for b in range(3):
        vals = list(x[b].ravel())
        assert plo[b] == pytest.approx(percentile_sorted(vals, lo), abs=1e-9)
        assert phi[b] == pytest.approx(percentile_sorted(vals, hi), abs=1e-9)


def test_percentiles_use_valid_pixels_only():
    x = np.zeros((2, 1, 2, 2))
    x[0] = 100.0
    valid = np.array([[[False, False], [False, False]], [[True, True], [True, True]]])
    lo, hi = band_percentiles(x, valid, 0, 100)
    assert lo[0] == 0 and hi[0] == 0


@given(arrays(np.float64, (2, 2, 5, 5), elements=st.floats(0, 10000)))
@settings(max_examples=50, deadline=None)
def test_clip_normalize_range(x):
    out = clip_normalize(x)
    assert out.dtype == np.float32
    assert np.all(out >= 0) and np.all(out <= 1)


def test_clip_normalize_constant_band_is_zero():
    x = np.full((1, 3, 4, 4), 7.0)
    assert np.all(clip_normalize(x) == 0)


def test_clip_normalize_empty_valid_raises():
    with pytest.raises(DataError):
        clip_normalize(np.ones((1, 1, 2, 2)), valid=np.zeros((1, 2, 2), bool))


def test_percentile_normalizer_estimator():
    rng = np.random.default_rng(0)
    x = rng.random((3, 4, 8, 8)) * 5000
    norm = PercentileNormalizer().fit(x)
    np.testing.assert_array_equal(norm.transform(x), clip_normalize(x))
    assert norm.get_params() == {"lo_pct": 2.0, "hi_pct": 98.0}


# imputation

@given(st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_impute_identity_on_valid_and_mean_elsewhere(seed):
    rng = np.random.default_rng(seed)
    v = rng.random((4, 2, 5, 5)).astype(np.float32)
    m = rng.random((4, 5, 5)) > 0.4
    m[0] |= ~m.any(axis=0)
    out, full = impute_masked(v, m)
    assert full.all()
    assert np.array_equal(out[:, :][np.broadcast_to(m[:, None], v.shape)], v[np.broadcast_to(m[:, None], v.shape)])
    n, c, h, w = np.argwhere(~np.broadcast_to(m[:, None], v.shape))[0] if (~m).any() else (None,) * 4
    if n is not None:
        expect = np.mean([v[k, c, h, w] for k in range(4) if m[k, h, w]])
        assert out[n, c, h, w] == pytest.approx(expect, rel=1e-6)


def test_impute_all_masked_names_location():
    m = np.ones((2, 3, 3), bool)
    m[:, 1, 2] = False
    with pytest.raises(AllMaskedError, match=r"\(1, 2\)"):
        impute_masked(np.zeros((2, 1, 3, 3)), m)


# histogram matching

@given(st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_histogram_match_idempotent_and_monotone(seed):
    rng = np.random.default_rng(seed)
    src = rng.gamma(2.0, size=(12, 12))
    ref = rng.beta(2, 5, size=(10, 14))
    once = histogram_match(src, ref)
    twice = histogram_match(once, ref)
    assert np.max(np.abs(once - twice)) <= 1e-6
    order = np.argsort(src.ravel(), kind="stable")
    assert np.all(np.diff(once.ravel()[order]) >= 0)
    assert once.min() >= ref.min() and once.max() <= ref.max()


def test_histogram_match_onto_itself_is_identity():
    x = np.random.default_rng(3).random((9, 9))
    np.testing.assert_array_equal(histogram_match(x, x), x)


def test_histogram_match_reproduces_reference_distribution():
    rng = np.random.default_rng(4)
    src, ref = rng.random(1000), rng.normal(size=1000)
    np.testing.assert_allclose(np.sort(histogram_match(src, ref)), np.sort(ref), atol=1e-12)


def test_histogram_matcher_per_band():
    rng = np.random.default_rng(5)
    ref, src = rng.random((3, 6, 6)), rng.random((3, 8, 8))
    out = HistogramMatcher().fit(ref).transform(src)
    for b in range(3):
        np.testing.assert_array_equal(out[b], histogram_match(src[b], ref[b]))
    with pytest.raises(ValueError):
        histogram_match(np.array([]), ref)


# resampling

def test_bilinear_constant_and_coordinates():
    assert np.all(downsample_bilinear(np.full((2, 8, 8), 0.3, np.float32), 4, 4) == np.float32(0.3))
    ramp = np.tile(np.arange(8, dtype=np.float32), (8, 1))[None]
    out = downsample_bilinear(ramp, 4, 4)
    # output pixel i samples source coordinate (i + 0.5) * 2 - 0.5
    np.testing.assert_allclose(out[0, 0], [0.5, 2.5, 4.5, 6.5])
    with pytest.raises(ValueError):
        downsample_bilinear(ramp, 0, 4)


def test_bilinear_non_integer_ratio_oracle():
    x = np.random.default_rng(0).random((1, 10, 10)).astype(np.float32)
    out = downsample_bilinear(x, 4, 4)
    for i in range(4):
        for j in range(4):
            sy = min(max((i + 0.5) * 2.5 - 0.5, 0), 9)
            sx = min(max((j + 0.5) * 2.5 - 0.5, 0), 9)
            y0, x0 = int(sy), int(sx)
            y1, x1 = min(y0 + 1, 9), min(x0 + 1, 9)
            fy, fx = sy - y0, sx - x0
            v = ((1 - fy) * (1 - fx) * x[0, y0, x0] + (1 - fy) * fx * x[0, y0, x1]
                 + fy * (1 - fx) * x[0, y1, x0] + fy * fx * x[0, y1, x1])
            assert out[0, i, j] == pytest.approx(v, abs=1e-6)


@pytest.mark.parametrize("n", [64, 112, 158])
def test_patch_grid_total_coverage(n):
    origins = extract_patches(n, n)
    assert windows_cover(n, n, origins, 64)
    assert len(set(origins)) == len(origins)
    rows = sorted({r for r, _ in origins})
    assert rows[0] == 0 and rows[-1] == n - 64
    assert all(r % 48 == 0 for r in rows[:-1])


def test_patch_grid_158_origins():
    assert sorted({r for r, _ in extract_patches(158, 158)}) == [0, 48, 94]
    with pytest.raises(ValueError):
        extract_patches(63, 100)


@given(st.integers(0, 2**31 - 1), st.sampled_from([2, 4]))
@settings(max_examples=50, deadline=None)
def test_label_purification_matches_footprint_scan(seed, f):
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, 3, (4 * f, 4 * f)).astype(np.uint8)
    # add some uniform blocks so pure pixels occur
    lab[:f, :f] = 1
    lab[f : 2 * f, 2 * f : 3 * f] = 6
    np.testing.assert_array_equal(downsample_labels(lab, f), pure_footprint_scan(lab, f))


# splits and manifest

def make_tiles(n_blocks, per_block=2):
    return [{"tile_id": f"t{b:02d}_{k}", "geo_block": b} for b in range(n_blocks) for k in range(per_block)]


def test_split_blocks_whole_and_test_contiguous():
    m = split_dataset(make_tiles(10), seed=3)
    by_block = {}
    for t in m.tiles:
        by_block.setdefault(t["geo_block"], set()).add(t["split"])
    assert all(len(s) == 1 for s in by_block.values())
    test_blocks = sorted(b for b, s in by_block.items() if "test" in s)
    assert test_blocks == [9]
    counts = {s: sum(1 for b in by_block.values() if s in b) for s in ("train", "val", "test")}
    assert counts == {"train": 7, "val": 2, "test": 1}


def test_split_deterministic_and_seeded():
    tiles = make_tiles(20)
    assert split_dataset(tiles, seed=1).dumps() == split_dataset(list(reversed(tiles)), seed=1).dumps()
    vals = {tuple(t["tile_id"] for t in split_dataset(tiles, seed=s).split("val")) for s in range(5)}
    assert len(vals) > 1


def test_split_too_few_blocks():
    with pytest.raises(ValueError):
        split_dataset(make_tiles(2))


def test_manifest_round_trip_and_missing_file(tmp_path):
    m = split_dataset(make_tiles(3), seed=0)
    m.tiles[0]["patches"] = [{"id": "p", "lr": "x/lr.s4xr", "hr": "x/hr.s4xr"}]
    m.write(tmp_path / "manifest.json")
    with pytest.raises(DataError, match="missing"):
        DatasetManifest.read(tmp_path / "manifest.json")
    again = DatasetManifest.read(tmp_path / "manifest.json", check_files=False)
    assert again == m
    assert json.loads((tmp_path / "manifest.json").read_text())["version"] == m.version


# end to end preparation on synthetic raw tiles

@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("prep")
    synth_raw_tiles(root / "raw", n_tiles=4, tile_lr=80, seed=1)
    m = prepare_dataset(root / "raw", root / "out", PrepareConfig(fractions=(0.5, 0.25, 0.25)), seed=0)
    return root, m


def test_prepare_dataset_outputs(prepared):
    root, m = prepared
    assert {t["split"] for t in m.tiles} == {"train", "val", "test"}
    X, Y, L, ids = load_patch_arrays(DatasetManifest.read(root / "out" / "manifest.json"), "train", True)
    assert X.shape[1:] == (8, 4, 64, 64) and Y.shape[1:] == (4, 256, 256) and L.shape[1:] == (256, 256)
    assert 0 <= X.min() and X.max() <= 1 and np.isfinite(Y).all()
    assert set(np.unique(L)) <= set(range(7)) | {255}
    assert all(len(t["patches"]) == 4 for t in m.tiles)  # 80 px tile: origins 0 and 16 per axis


def test_prepare_dataset_is_byte_reproducible(prepared, tmp_path):
    root, m = prepared
    m2 = prepare_dataset(root / "raw", tmp_path / "out", PrepareConfig(fractions=(0.5, 0.25, 0.25)), seed=0, threads=2)
    assert m2.dumps() == m.dumps()
    for a, b in zip(m.files(), m2.files()):
        assert a.read_bytes() == b.read_bytes()
