import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossreg.errors import EmptyStructureError, FormatError, ShapeError
from crossreg.metrics import (MetricsReport, aggregate, dsc, dsc_flagged, evaluate_case, extract_surface, hd95,
                              mean_surface_distance, surface_distances)

from oracles import surface_metrics_brute, surface_voxels


def random_blob(rng, shape=(16, 16, 16), label=1):
    """A random union of boxes, labelled ``label``."""
    vol = np.zeros(shape, np.uint8)
    for _ in range(int(rng.integers(1, 4))):
        lo = rng.integers(0, np.array(shape) - 2)
        hi = lo + rng.integers(2, 8, size=3)
        vol[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = label
    return vol


def test_surface_of_solid_cube():
    m = np.zeros((7, 7, 7), bool)
    m[1:6, 1:6, 1:6] = True
    s = extract_surface(m)
    assert len(s) == 5 ** 3 - 3 ** 3
    ref = surface_voxels(m)
    assert sorted(map(tuple, s)) == sorted(map(tuple, ref.astype(int)))


def test_volume_border_counts_as_outside():
    m = np.ones((4, 4, 4), bool)
    assert len(extract_surface(m)) == 4 ** 3 - 2 ** 3


def test_metrics_equal_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(25):
        p, t = random_blob(rng), random_blob(rng)
        spacing = tuple(rng.uniform(0.5, 2.0, size=3))
        ref = surface_metrics_brute(p, t, 1, spacing)
        for method in ("brute", "edt"):
            d_pt, d_tp = surface_distances(p, t, 1, spacing, method)
            msd = 0.5 * (d_pt.mean() + d_tp.mean())
            h = float(np.percentile(np.concatenate([d_pt, d_tp]), 95))
            assert abs(msd - ref[1]) <= 1e-9
            assert abs(h - ref[2]) <= 1e-9
        assert abs(dsc(p, t, 1) - ref[0]) <= 1e-9


def test_known_offset_cubes():
    a = np.zeros((12, 12, 12), np.uint8)
    b = np.zeros_like(a)
    a[2:6, 2:6, 2:6] = 1
    b[2:6, 2:6, 4:8] = 1
    assert dsc(a, b, 1) == pytest.approx(0.5)
    assert hd95(a, a, 1) == 0.0 and mean_surface_distance(a, a, 1) == 0.0


@given(st.integers(0, 2**20))
def test_symmetry(seed):
    rng = np.random.default_rng(seed)
    p, t = random_blob(rng), random_blob(rng)
    assert dsc(p, t, 1) == dsc(t, p, 1)
    assert mean_surface_distance(p, t, 1) == pytest.approx(mean_surface_distance(t, p, 1), abs=1e-12)
    assert hd95(p, t, 1) == pytest.approx(hd95(t, p, 1), abs=1e-12)


@given(st.integers(0, 2**20), st.integers(-3, 3), st.integers(-3, 3), st.integers(-3, 3))
def test_translation_invariance(seed, dz, dy, dx):
    rng = np.random.default_rng(seed)
    p, t = random_blob(rng, (12, 12, 12)), random_blob(rng, (12, 12, 12))
    big_p = np.zeros((24, 24, 24), np.uint8)
    big_t = np.zeros_like(big_p)
    o = np.array([6 + dz, 6 + dy, 6 + dx])
    big_p[o[0]:o[0] + 12, o[1]:o[1] + 12, o[2]:o[2] + 12] = p
    big_t[o[0]:o[0] + 12, o[1]:o[1] + 12, o[2]:o[2] + 12] = t
    # embed in a larger volume so the border never touches the structures
    small_p = np.pad(p, 6)
    small_t = np.pad(t, 6)
    assert dsc(big_p, big_t, 1) == dsc(small_p, small_t, 1)
    assert mean_surface_distance(big_p, big_t, 1) == pytest.approx(mean_surface_distance(small_p, small_t, 1),
                                                                    abs=1e-12)
    assert hd95(big_p, big_t, 1) == pytest.approx(hd95(small_p, small_t, 1), abs=1e-12)


def test_empty_structures():
    z = np.zeros((4, 4, 4), np.uint8)
    assert dsc_flagged(z, z, 1) == (1.0, True)
    with pytest.raises(EmptyStructureError):
        extract_surface(z.astype(bool))
    one = z.copy()
    one[1, 1, 1] = 1
    res = evaluate_case(z, one, names=("background", "thing"))
    assert res["thing"]["failed"] and res["thing"]["msd"] is None and res["thing"]["dsc"] == 0.0
    with pytest.raises(ShapeError):
        dsc(z, np.zeros((4, 4, 5)), 1)


def test_aggregate_population_std_and_failures():
    a = aggregate([1.0, 3.0, None])
    assert (a.mean, a.std, a.median, a.n, a.n_failed) == (2.0, 1.0, 2.0, 2, 1)
    assert math.isnan(aggregate([None]).mean)


def _report():
    rng = np.random.default_rng(0)
    r = MetricsReport()
    for case in range(3):
        truth = np.zeros((16, 16, 16), np.uint8)
        truth[2:8, 2:8, 2:8] = 1
        truth[9:14, 9:14, 9:14] = 2
        seg = truth.copy()
        seg[int(rng.integers(2, 5)):8, 2:8, 2:8] = 0
        reg = np.roll(truth, case + 1, axis=2)
        names = ("background", "bladder", "prostate")
        r.add_case("CrossStitch", "Segmentation", f"c{case}", evaluate_case(seg, truth, names=names))
        r.add_case("CrossStitch", "Registration", f"c{case}", evaluate_case(reg, truth, names=names))
    return r


def test_report_layout_has_both_paths_and_selection():
    text = _report().to_text()
    assert "Output Path" in text
    dsc_block = text.split("== DSC ==")[1].split("==")[0]
    lines = [l for l in dsc_block.splitlines() if "|" in l]
    paths = [l.split("|")[1].strip() for l in lines[1:]]
    assert paths == ["Segmentation", "Registration", "Selected"]


def test_report_round_trips():
    r = _report()
    assert MetricsReport.from_tsv(r.to_tsv()).entries == r.entries
    assert MetricsReport.from_text(r.to_text()).entries == r.entries


def test_selection_prefers_lower_msd():
    r = _report()
    sel = r.selection("CrossStitch")
    for s, path in sel.items():
        other = "Registration" if path == "Segmentation" else "Segmentation"
        assert r.summary("CrossStitch", path, s, "msd").mean <= r.summary("CrossStitch", other, s, "msd").mean


def test_from_text_rejects_garbage():
    with pytest.raises(FormatError):
        MetricsReport.from_text("hello")
