import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import ConvexHull

from facekit.benchmark import (BenchmarkConfig, BenchmarkReport, CylindricalConfig, align_depth,
                               chamfer_distance, chamfer_distance_bruteforce, complete_rate,
                               cylinder_axis, cylindrical_resample, mean_normal_error,
                               report_csv, report_markdown, run_benchmark)
from facekit.camera import CameraParams
from facekit.errors import AlignmentError, ValidationError
from facekit.io import load_manifest
from facekit.mesh import Mesh, RasterMap
from facekit.synth import FaceGenerator, benchmark_fixture, cylinder_mesh

DH = 210.0 / 512          # cylindrical row height on the fixture: 200 mm + 5% padding
N_GT_ROWS = 488           # GT-valid rows of the fixture cylinder


def unit_sphere(n=6000):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    th = np.pi * (1 + 5 ** 0.5) * i
    p = np.c_[np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)]
    f = ConvexHull(p).simplices
    nrm = np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]])
    flip = (nrm * p[f].mean(1)).sum(1) < 0
    f[flip] = f[flip][:, ::-1]
    return Mesh(p, f)


# --- cylindrical resampling --------------------------------------------------------

def test_cylinder_radius_exact():
    r = 80.0
    mesh = cylinder_mesh(radius=r, segments=2048)       # chord sagitta < 1e-4 mm
    cfg = CylindricalConfig(256, 128)
    pos, _ = cylindrical_resample(mesh, cfg)
    p = pos.data[pos.valid_mask]
    assert len(p) > 0.9 * 256 * 128
    radius = np.hypot(p[:, 0], p[:, 2])
    assert np.abs(radius - r).max() <= 1e-3


def test_sphere_normals_are_radial():
    pos, nrm = cylindrical_resample(unit_sphere(), CylindricalConfig(128, 128))
    ok = pos.valid_mask
    assert ok.mean() > 0.9
    p = pos.data[ok]
    assert np.abs(nrm.data[ok] - p / np.linalg.norm(p, axis=1, keepdims=True)).max() <= 1e-2


def test_long_bridging_face_is_ignored():
    mesh = cylinder_mesh()                    # 64 segments, 10 mm rings; all edges < 15 mm
    segs = 64
    ring = lambda k, s: k * segs + s          # noqa: E731
    v = mesh.vertices
    band = (v[mesh.faces][:, :, 1].min(1) >= -10 - 1e-9) & (v[mesh.faces][:, :, 1].max(1) <= 10 + 1e-9)
    hole = band & (np.abs(v[mesh.faces][:, :, 0]).max(1) < 20) & (v[mesh.faces][:, :, 2].min(1) > 0)
    bridge = np.array([[ring(9, 0), ring(11, 0), ring(10, 1)]])          # 20 mm vertical edge
    assert np.isclose(np.linalg.norm(v[ring(11, 0)] - v[ring(9, 0)]), 20.0)
    holed = mesh.replace(faces=mesh.faces[~hole])
    bridged = mesh.replace(faces=np.r_[mesh.faces[~hole], bridge])
    cfg = CylindricalConfig(256, 256)
    ref, _ = cylindrical_resample(holed, cfg)
    out, _ = cylindrical_resample(bridged, cfg, cylinder_axis(holed, cfg))
    loose, _ = cylindrical_resample(bridged, CylindricalConfig(256, 256, max_edge_mm=25.0),
                                    cylinder_axis(holed, cfg))
    bridge_px = loose.valid_mask & ~ref.valid_mask
    assert bridge_px.sum() > 10                  # the face is hit when the cutoff allows it
    assert not out.valid_mask[bridge_px].any()
    assert np.array_equal(out.valid_mask, ref.valid_mask)


def test_degenerate_axis():
    flat = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 0, 1.0]]), np.array([[0, 1, 2]]))
    with pytest.raises(ValidationError):
        cylinder_axis(flat)
    with pytest.raises(ValidationError):
        cylindrical_resample(Mesh(np.zeros((0, 3)), np.zeros((0, 3), int)))


# --- chamfer distance ---------------------------------------------------------------

def test_chamfer_examples():
    a = np.random.default_rng(0).normal(size=(50, 3))
    assert chamfer_distance(a, a) == 0.0
    assert chamfer_distance([[0, 0, 0]], [[0, 3.0, 0]]) == 6.0
    assert chamfer_distance([[0, 0, 0]], [[0, 3.0, 0]], halve=True) == 3.0
    with pytest.raises(ValidationError):
        chamfer_distance(np.zeros((0, 3)), a)


def test_chamfer_position_maps_use_valid_pixels():
    d = np.full((2, 2, 3), np.nan)
    d[0, 0] = [0, 0, 0]
    g = np.full((2, 2, 3), np.nan)
    g[1, 1] = [4.0, 0, 0]
    assert chamfer_distance(RasterMap(d), RasterMap(g)) == 8.0


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_chamfer_index_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.normal(size=(500, 3)) * 10, rng.normal(size=(rng.integers(1, 500), 3)) * 10
    cd = chamfer_distance(p, g)
    assert abs(cd - chamfer_distance_bruteforce(p, g)) <= 1e-9
    assert cd == chamfer_distance(g, p)


# --- normal error / complete rate ---------------------------------------------------

def test_mne_examples():
    rng = np.random.default_rng(1)
    n = rng.normal(size=(8, 8, 3))
    n /= np.linalg.norm(n, axis=2, keepdims=True)
    assert mean_normal_error(RasterMap(n), RasterMap(n)) == pytest.approx(0.0, abs=1e-15)
    a = np.zeros((4, 4, 3))
    a[..., 2] = 1
    b = np.zeros((4, 4, 3))
    b[..., 0], b[..., 2] = math.sin(math.pi / 3), math.cos(math.pi / 3)
    assert mean_normal_error(RasterMap(b), RasterMap(a)) == pytest.approx(0.5, abs=1e-15)
    assert mean_normal_error(RasterMap(-a), RasterMap(a)) == 2.0
    with pytest.raises(ValidationError):
        mean_normal_error(RasterMap(np.full((2, 2, 3), np.nan)), RasterMap(a[:2, :2]))


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_mne_matches_scalar_loop_and_range(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 6, 7, 3))
    x[rng.random((6, 7)) < 0.3] = np.nan
    total, count = [], 0
    for i in range(6):
        for j in range(7):
            if np.isfinite(x[i, j]).all():
                u, v = x[i, j], y[i, j]
                cos = sum(u[k] * v[k] for k in range(3)) / (math.sqrt(sum(u * u)) * math.sqrt(sum(v * v)))
                total.append(1 - cos)
                count += 1
    if count == 0:
        return
    m = mean_normal_error(RasterMap(x), RasterMap(y))
    assert abs(m - math.fsum(total) / count) <= 1e-12
    assert 0.0 <= m <= 2.0


def test_complete_rate_examples_and_errors():
    g = np.zeros((4, 4, 3))
    p = g.copy()
    assert complete_rate(RasterMap(p), RasterMap(g)) == 1.0
    p[:2] = np.nan
    assert complete_rate(RasterMap(p), RasterMap(g)) == 0.5
    with pytest.raises(ValidationError):
        complete_rate(RasterMap(g), RasterMap(np.full_like(g, np.nan)))
    with pytest.raises(ValidationError):
        complete_rate(RasterMap(g[:2]), RasterMap(g))


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_complete_rate_counting_and_monotone(seed):
    rng = np.random.default_rng(seed)
    gv = rng.random((9, 9)) < 0.7
    gv[0, 0] = True
    pv = rng.random((9, 9)) < 0.5
    g = np.where(gv[..., None], 1.0, np.nan) * np.ones((9, 9, 3))
    p = np.where(pv[..., None], 1.0, np.nan) * np.ones((9, 9, 3))
    cr = complete_rate(RasterMap(p), RasterMap(g))
    assert cr == (gv & pv).sum() / gv.sum() and 0.0 <= cr <= 1.0
    grown = pv | (rng.random((9, 9)) < 0.3)
    p2 = np.where(grown[..., None], 1.0, np.nan) * np.ones((9, 9, 3))
    assert complete_rate(RasterMap(p2), RasterMap(g)) >= cr


# --- depth alignment -----------------------------------------------------------------

@pytest.fixture(scope="module")
def face():
    return FaceGenerator(0).mesh(0, 3, 61)


@pytest.mark.parametrize("cam", [
    CameraParams("weak_perspective", [0.97, 0.1, 0.2, 0.0], scale=2.0, translation=[100.0, 120.0]),
    CameraParams("perspective", [0.97, 0.1, 0.2, 0.0], focal_length=800.0,
                 translation=[5.0, -3.0, 600.0]),
], ids=["weak", "perspective"])
def test_depth_offset_recovered(face, cam):
    gt = face.replace(vertices=cam.to_camera_frame(face.vertices))
    _, off = align_depth(gt, gt, cam, return_offset=True)
    assert abs(off) < 1e-9
    pred = gt.replace(vertices=gt.vertices + [0, 0, 30.0])
    aligned, off = align_depth(pred, gt, cam, return_offset=True)
    assert abs(off + 30.0) <= 0.2
    assert np.abs(aligned.vertices - gt.vertices).max() <= 0.2


def test_disjoint_prediction_fails(face):
    cam = CameraParams("weak_perspective", [1.0, 0, 0, 0])
    gt = face.replace(vertices=cam.to_camera_frame(face.vertices))
    pred = gt.replace(vertices=gt.vertices + [1000.0, 0, 0])
    with pytest.raises(AlignmentError):
        align_depth(pred, gt, cam)


# --- fixture report -------------------------------------------------------------------

HAND = {   # sample -> (CD, MNE, CR)
    "copy": (0.0, 0.0, 1.0),
    "depth": (0.0, 0.0, 1.0),
    "flipped": (0.0, 2.0, 1.0),
    "cut": (DH * sum(range(1, 245)) / N_GT_ROWS, 0.0, 244 / N_GT_ROWS),
    "shifted": (DH * (1 + 2 + 1 + 2) / N_GT_ROWS, 0.0, (N_GT_ROWS - 2) / N_GT_ROWS),
}


@pytest.fixture(scope="module")
def report(bench_manifest):
    return run_benchmark(load_manifest(bench_manifest))


def test_fixture_report_matches_hand_values(report):
    assert report.success_rate == 100.0
    for s in report.samples:
        cd, mne, cr = HAND[s.sample_id]
        assert abs(s.cd - cd) <= 1e-6 and abs(s.mne - mne) <= 1e-6 and abs(s.cr - cr) <= 1e-6, s
    assert [s.depth_offset for s in report.samples if s.sample_id == "depth"] == [pytest.approx(-30, abs=0.2)]


def test_bucket_means_exclude_nothing_and_match_samples(report):
    for name, b in report.pose_buckets.items():
        mine = [s for s in report.samples if s.pose_bucket == name]
        assert b.n_samples == len(mine)
        assert b.cd == pytest.approx(np.mean([s.cd for s in mine]), abs=1e-12)
    assert set(report.focal_buckets) == {"long", "mid", "short"}


def test_missing_prediction_counts_as_failure(tmp_path):
    rep = run_benchmark(load_manifest(benchmark_fixture(tmp_path, with_missing=True)))
    assert rep.success_rate == 80.0
    failed = [s for s in rep.samples if not s.success]
    assert [s.sample_id for s in failed] == ["shifted"] and failed[0].cd is None
    ok = [s for s in rep.samples if s.success]
    assert rep.overall.n_success == 4
    assert rep.overall.cd == pytest.approx(math.fsum(s.cd for s in ok) / 4, abs=1e-15)
    assert rep.pose_buckets["30-60"].cd is None and rep.pose_buckets["30-60"].success_rate == 0.0


def test_missing_gt_is_hard_error(tmp_path):
    m = load_manifest(benchmark_fixture(tmp_path))
    m.entries[0].gt_mesh_path.unlink()
    with pytest.raises(OSError):
        run_benchmark(m)


def test_thread_count_invariance(bench_manifest):
    m = load_manifest(bench_manifest)
    a = run_benchmark(m, BenchmarkConfig(threads=1)).to_dict()
    b = run_benchmark(m, BenchmarkConfig(threads=3)).to_dict()
    assert a == b


def test_report_serialisation_and_tables(report):
    again = BenchmarkReport.from_dict(json.loads(report.to_json()))
    assert again.to_dict() == report.to_dict()
    csv = report_csv(report).splitlines()
    assert csv[0] == "bucket,n,CD,MNE,CR,success_rate"
    assert csv[-1].startswith("overall,5,") and csv[-1].endswith(",100.00")
    md = report_markdown(report).splitlines()
    assert md[0].startswith("| bucket |") and md[-1].startswith("| overall | 5 |")


def test_config_validation():
    with pytest.raises(ValidationError):
        CylindricalConfig(0, 10)
    with pytest.raises(ValidationError):
        BenchmarkConfig(threads=0)
