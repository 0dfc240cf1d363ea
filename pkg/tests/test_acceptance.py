"""Acceptance criteria; each test prints one ``ACCEPTANCE <n>: PASS|FAIL`` line."""

import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facekit.benchmark import (chamfer_distance, chamfer_distance_bruteforce, complete_rate,
                               align_depth, mean_normal_error, run_benchmark)
from facekit.camera import CameraParams, axis_angle_quat, matrix_to_quat, project, quat_to_matrix
from facekit.cli import main
from facekit.detail import (KeyExpressionDetails, activation_masks, blend_displacements,
                            rig_detailed, weight_masks)
from facekit.fitting import FitConfig, compute_visibility, e_landmark, e_pixel, fit_image
from facekit.io import load_manifest, save_float_map, save_mesh, save_model
from facekit.mesh import RasterMap
from facekit.morphable import (BlendshapeSet, generate_blendshapes, generate_mesh, relative_error,
                               tucker_decompose)
from facekit.raycast import BVH, point_to_mesh_distance
from facekit.registration import apply_displacement, bake_displacement, refine_with_flow
from facekit.shading import AlbedoBasis, ambient_sh
from facekit.synth import FaceGenerator, benchmark_fixture, flow_case, grid_topology, synthetic_tensor

CANONICAL = np.array([0.0, 1.0, 0.0, 0.0])


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} -- {detail}")
        assert ok, detail
    return emit


def run_property(fn):
    try:
        fn()
        return True, ""
    except Exception as exc:          # hypothesis re-raises the shrunk failure
        return False, f"{type(exc).__name__}: {str(exc)[:200]}"


# --- 1 & 2: displacement round trip and compression ---------------------------------

@pytest.fixture(scope="module")
def disp_fixtures(tmp_path_factory):
    out = tmp_path_factory.mktemp("disp")
    t0 = time.perf_counter()
    rows = []
    for seed in range(10):
        gen = FaceGenerator(seed)
        e = 1 + seed % 5
        base = gen.mesh(0, e, 41)
        dense = gen.detailed_mesh(0, e, 201)
        disp = bake_displacement(base, dense, 256)
        rec = apply_displacement(base, disp, 2)
        mae = float(point_to_mesh_distance(rec.vertices, dense).mean())
        rows.append((seed, dense.n_vertices, mae, base, dense, disp))
    elapsed = time.perf_counter() - t0
    for seed, _, _, base, dense, disp in rows:
        save_mesh(base, out / f"{seed}_base.ply")
        save_mesh(dense, out / f"{seed}_dense.ply")
        save_float_map(disp, out / f"{seed}_disp.fmap")
    return out, rows, elapsed


def test_criterion_1_displacement_round_trip(disp_fixtures, verdict):
    _, rows, elapsed = disp_fixtures
    worst = max(r[2] for r in rows)
    ok = all(r[1] <= 50000 for r in rows) and worst < 0.3 and elapsed < 60
    verdict(1, ok, f"10 fixtures ({rows[0][1]} dense vertices, 256^2 maps): max MAE "
                   f"{worst:.4f} mm (< 0.3), bake+apply {elapsed:.1f} s (< 60)")


def test_criterion_2_compression(disp_fixtures, verdict):
    out, rows, _ = disp_fixtures
    ratios = []
    for seed, *_ in rows:
        small = (out / f"{seed}_base.ply").stat().st_size + (out / f"{seed}_disp.fmap").stat().st_size
        ratios.append(small / (out / f"{seed}_dense.ply").stat().st_size)
    worst = max(ratios)
    verdict(2, worst < 0.05, f"(base PLY + 256^2 map) / dense PLY = {worst:.2%} "
                             f"(< 5% required; 2% reference figure at production density)")


# --- 3: Tucker ------------------------------------------------------------------------

def test_criterion_3_tucker(verdict):
    t0 = time.perf_counter()
    tensor = synthetic_tensor(30, 20, seed=0)           # 300 vertices, 20 exp, 30 id
    full = relative_error(tensor, tucker_decompose(tensor, 20, 30))
    err = np.array([[relative_error(tensor, tucker_decompose(tensor, re, ri))
                     for ri in range(2, 31)] for re in range(2, 21)])
    mono = bool((np.diff(err, axis=0) <= 1e-12).all() and (np.diff(err, axis=1) <= 1e-12).all())
    elapsed = time.perf_counter() - t0
    verdict(3, full <= 1e-6 and mono and elapsed < 30,
            f"full-rank error {full:.2e} (<= 1e-6), monotone over 19x29 sweep: {mono}, "
            f"{elapsed:.1f} s (< 30)")


# --- 4: bilinearity / blendshape consistency ------------------------------------------

def test_criterion_4_bilinearity_and_blendshapes(verdict):
    model = tucker_decompose(synthetic_tensor(30, 20, seed=0), 20, 30)
    count = [0]

    @settings(max_examples=1000, database=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
    def trial(seed, a, b):
        count[0] += 1
        rng = np.random.default_rng(seed)
        w1, w2 = rng.normal(size=(2, 30))
        e1, e2 = rng.normal(size=(2, 20))
        v = lambda w, e: generate_mesh(model, w, e).vertices  # noqa: E731
        tol = lambda x: 1e-9 * max(np.abs(x).max(), 1.0)      # noqa: E731
        rhs = a * v(w1, e1) + b * v(w2, e1)
        assert np.abs(v(a * w1 + b * w2, e1) - rhs).max() <= tol(rhs)
        rhs = a * v(w1, e1) + b * v(w1, e2)
        assert np.abs(v(w1, a * e1 + b * e2) - rhs).max() <= tol(rhs)
        bs = generate_blendshapes(model, w1)
        for i, shape in enumerate(bs.shapes):
            ref = v(w1, model.canonical_exp_params[i])
            assert np.abs(shape.vertices - ref).max() <= tol(ref)

    ok, msg = run_property(trial)
    verdict(4, ok and count[0] >= 1000, f"{count[0]} randomized trials {msg}")


# --- 5: fitting ------------------------------------------------------------------------

def random_state(model, rng, scale=(2.5, 3.0), centre=300.0):
    k, j = rng.integers(model.identity_count), rng.integers(model.expression_count)
    w_id = model.id_basis[k] + 0.02 * rng.standard_normal(model.id_rank)
    w_exp = model.canonical_exp_params[j] + 0.02 * rng.standard_normal(model.exp_rank)
    tilt = quat_to_matrix(axis_angle_quat(rng.standard_normal(3), rng.uniform(0, 25)))
    q = matrix_to_quat(tilt @ quat_to_matrix(CANONICAL))
    cam = CameraParams(rotation=q, scale=rng.uniform(*scale), translation=centre + rng.uniform(-20, 20, 2))
    return w_id, w_exp, cam


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(len(x)):
        a, b = x.copy(), x.copy()
        a[i] += h
        b[i] -= h
        g[i] = (f(a) - f(b)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_criterion_5_fitting(toy, verdict):
    model, idx = toy
    lm_err, v_err = [], []
    for s in range(20):
        w_id, w_exp, cam = random_state(model, np.random.default_rng(1000 + s))
        truth = generate_mesh(model, w_id, w_exp).vertices
        pts = project(cam, truth[idx])
        fit = fit_image(model, pts, FitConfig(id_mean=w_id, exp_mean=w_exp), landmark_indices=idx)
        v = generate_mesh(model, fit.w_id, fit.w_exp).vertices
        lm_err.append(fit.residuals["landmark_rmse_px"])
        v_err.append(float(np.sqrt(((v - truth) ** 2).sum(1).mean())))

    rng = np.random.default_rng(5)
    n = model.vertex_count
    albedo = AlbedoBasis(0.5 + 0.1 * rng.standard_normal((n, 3)), 0.05 * rng.standard_normal((3 * n, 5)))
    yy, xx = np.mgrid[0:600, 0:600]
    image = np.stack([0.5 + 0.3 * np.sin(xx / 13.0) * np.cos(yy / 17.0),
                      0.5 + 0.2 * np.cos(xx / 9.0), 0.4 + 0.2 * np.sin(yy / 11.0)], -1)
    worst_grad = 0.0
    for s in range(100):
        srng = np.random.default_rng(5000 + s)
        w_id, w_exp, cam = random_state(model, srng)
        lm2 = srng.uniform(0, 600, (len(idx), 2))
        _, g = e_landmark(model, w_id, w_exp, cam, lm2, idx)
        fl = lambda a, b, c: e_landmark(model, a, b, c, lm2, idx)[0]  # noqa: E731
        errs = [rel_err(g.w_id, central_diff(lambda x: fl(x, w_exp, cam), w_id)),
                rel_err(g.w_exp, central_diff(lambda x: fl(w_id, x, cam), w_exp)),
                rel_err(g.camera, central_diff(lambda x: fl(w_id, w_exp, cam.with_vector(x)),
                                               cam.to_vector()))]
        w_alb = 0.3 * srng.standard_normal(5)
        sh = ambient_sh(0.8) + 0.1 * srng.standard_normal((9, 3))
        vis = compute_visibility(model, w_id, w_exp, cam, image.shape)
        _, gp = e_pixel(model, w_id, w_exp, cam, image, albedo, w_alb, sh, vis)

        def fp(a=w_id, b=w_exp, c=cam, d=w_alb, e=sh):
            return e_pixel(model, a, b, c, image, albedo, d, e, vis)[0]

        errs += [rel_err(gp.w_id, central_diff(lambda x: fp(a=x), w_id)),
                 rel_err(gp.w_exp, central_diff(lambda x: fp(b=x), w_exp)),
                 rel_err(gp.camera, central_diff(lambda x: fp(c=cam.with_vector(x)), cam.to_vector())),
                 rel_err(gp.w_alb, central_diff(lambda x: fp(d=x), w_alb)),
                 rel_err(gp.sh.ravel(), central_diff(lambda x: fp(e=x.reshape(9, 3)), sh.ravel()))]
        worst_grad = max(worst_grad, max(errs))
    ok = max(lm_err) < 0.5 and max(v_err) < 1.0 and worst_grad <= 1e-3
    verdict(5, ok, f"20 fits: landmark RMSE max {max(lm_err):.2e} px (< 0.5), vertex RMSE max "
                   f"{max(v_err):.3f} mm (< 1); gradient rel. error max {worst_grad:.2e} over 100 "
                   f"states (<= 1e-3)")


# --- 6: flow refinement ------------------------------------------------------------------

def test_criterion_6_refinement(verdict):
    case = flow_case(0, resolution=31, flow_resolution=256)
    zero = RasterMap(np.zeros((256, 256, 2)))
    out, rep = refine_with_flow(case.mesh_e, case.mesh_n, zero, return_report=True)
    ident = float(np.abs(out.vertices - case.mesh_e.vertices).max())
    residuals, reductions, reductions_3d = [rep.residual], [], []
    faces_d, uv_d = grid_topology(301)
    for seed in range(5):
        c = flow_case(seed, resolution=31, flow_resolution=256)
        o, r = refine_with_flow(c.mesh_e, c.mesh_n, c.flow, return_report=True)
        # UV misalignment: where on the true surface each vertex sits, versus its own UV
        dense = BVH(FaceGenerator(seed).surface(uv_d, 0, 1), faces_d)

        def uv_error(v):
            cp = dense.closest(v)
            return np.linalg.norm(dense.interpolate(uv_d, cp.face, cp.bary) - c.mesh_e.uv, axis=1).mean()

        reductions.append(1 - uv_error(o.vertices) / uv_error(c.mesh_e.vertices))
        before = np.linalg.norm(c.mesh_e.vertices - c.true_vertices, axis=1).mean()
        after = np.linalg.norm(o.vertices - c.true_vertices, axis=1).mean()
        reductions_3d.append(1 - after / before)
        residuals.append(r.residual)
    ok = ident <= 1e-6 and min(reductions) >= 0.8 and max(residuals) <= 1e-8
    verdict(6, ok, f"zero flow moves vertices {ident:.1e} mm (<= 1e-6); UV misalignment reduced "
                   f"{min(reductions):.1%} (>= 80%; 3D vertex error reduced {min(reductions_3d):.1%}); "
                   f"solver residual {max(residuals):.1e} (<= 1e-8)")


# --- 7: detail synthesis -------------------------------------------------------------------

def test_criterion_7_detail(verdict):
    gen = FaceGenerator(0, 52)
    shapes = BlendshapeSet([gen.mesh(0, k, 41) for k in range(52)])
    maps = [gen.detail_map(k, 128, wrinkles_only=k > 0) for k in range(20)]
    det = KeyExpressionDetails(maps)
    act = activation_masks(shapes, 128)
    zero = blend_displacements(det, weight_masks(act, det.key_weights, np.zeros(51)))
    bitwise = zero.data.tobytes() == maps[0].data.tobytes()
    mesh0 = rig_detailed(shapes, det, np.zeros(51), 1, act)
    bitwise &= mesh0.vertices.tobytes() == apply_displacement(shapes.neutral, maps[0], 1).vertices.tobytes()
    one, nil = np.ones((128, 128)), np.zeros((128, 128))
    onehot = all(np.array_equal(
        blend_displacements(det, [RasterMap(one if i == k else nil) for i in range(20)]).data,
        maps[k].data) for k in range(20))
    count = [0]

    @settings(max_examples=300, database=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
    def homogeneity(seed, c):
        count[0] += 1
        rng = np.random.default_rng(seed)
        a = rng.random(51) * (rng.random(51) < 0.3)
        m1 = weight_masks(act, det.key_weights, a)
        mc = weight_masks(act, det.key_weights, c * a)
        for x, y in zip(m1[1:], mc[1:]):
            assert np.allclose(y.data, c * x.data, rtol=1e-12, atol=1e-15)

    hok, msg = run_property(homogeneity)
    verdict(7, bitwise and onehot and hok,
            f"alpha=0 bitwise: {bitwise}; one-hot masks reproduce maps: {onehot}; "
            f"homogeneity {count[0]} trials {msg or 'passed'}")


# --- 8: benchmark ---------------------------------------------------------------------------

def test_criterion_8_benchmark(tmp_path, verdict):
    rng = np.random.default_rng(0)
    cd_err = 0.0
    for _ in range(100):
        p = rng.normal(size=(500, 3)) * 20
        g = rng.normal(size=(int(rng.integers(50, 500)), 3)) * 20
        cd_err = max(cd_err, abs(chamfer_distance(p, g) - chamfer_distance_bruteforce(p, g)))
    a = np.zeros((8, 8, 3))
    a[..., 2] = 1
    b = np.zeros((8, 8, 3))
    b[..., 0], b[..., 2] = math.sin(math.pi / 3), math.cos(math.pi / 3)
    mne = mean_normal_error(RasterMap(b), RasterMap(a))
    half = a.copy()
    half[:4] = np.nan
    cr = complete_rate(RasterMap(half), RasterMap(a))

    face = FaceGenerator(0).mesh(0, 3, 61)
    cam = CameraParams("weak_perspective", [0.97, 0.1, 0.2, 0.0], scale=2.0, translation=[100.0, 120.0])
    gt = face.replace(vertices=cam.to_camera_frame(face.vertices))
    _, off = align_depth(gt.replace(vertices=gt.vertices + [0, 0, 30.0]), gt, cam, return_offset=True)

    dh = 210.0 / 512
    hand = {"copy": (0, 0, 1), "depth": (0, 0, 1), "flipped": (0, 2, 1),
            "cut": (dh * 29890 / 488, 0, 0.5), "shifted": (6 * dh / 488, 0, 486 / 488)}
    manifest = benchmark_fixture(tmp_path / "bench")
    rep = run_benchmark(load_manifest(manifest))
    fx_err = max(max(abs(s.cd - hand[s.sample_id][0]), abs(s.mne - hand[s.sample_id][1]),
                     abs(s.cr - hand[s.sample_id][2])) for s in rep.samples)
    t0 = time.perf_counter()
    rc = main(["eval", "--manifest", str(manifest), "--out", str(tmp_path / "r.json")])
    elapsed = time.perf_counter() - t0
    ok = (cd_err <= 1e-9 and abs(mne - 0.5) <= 1e-15 and cr == 0.5 and abs(off + 30) <= 0.2
          and fx_err <= 1e-6 and rc == 0 and elapsed < 120)
    verdict(8, ok, f"CD index vs brute force {cd_err:.1e} (<= 1e-9); MNE 60deg {mne:.15f}; "
                   f"CR half {cr}; depth offset {off:.4f} (-30 +- 0.2); fixture error {fx_err:.1e} "
                   f"(<= 1e-6); eval {elapsed:.1f} s (< 120)")


# --- 9: determinism ---------------------------------------------------------------------------

def digest(path):
    p = Path(path)
    files = sorted(x for x in p.rglob("*") if x.is_file()) if p.is_dir() else [p]
    h = hashlib.sha256()
    for f in files:
        h.update(str(f.relative_to(p) if p.is_dir() else f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def test_criterion_9_cli_determinism(toy, tmp_path, verdict):
    fx = tmp_path / "fx"
    assert main(["synth-fixtures", "--seed", "1", "--identities", "2", "--out", str(fx)]) == 0
    model, idx = toy
    save_model(model, tmp_path / "toy.fsbm")
    cam = CameraParams(rotation=CANONICAL, scale=2.5, translation=[300.0, 300.0])
    pts = project(cam, generate_mesh(model, model.id_basis[2], model.canonical_exp_params[4]).vertices[idx])
    (tmp_path / "lm.json").write_text(json.dumps({"indices": idx.tolist(), "points": pts.tolist()}))
    small = tmp_path / "small"
    for i in range(2):
        (small / f"{i:03d}").mkdir(parents=True)
        for e in range(4):
            (small / f"{i:03d}" / f"{e:02d}.ply").write_bytes((fx / f"meshes/{i:03d}/{e:02d}.ply").read_bytes())

    def commands(o):
        return {
            "synth-fixtures": ["synth-fixtures", "--seed", "1", "--identities", "2", "--out", f"{o}/fx"],
            "build-model": ["build-model", "--meshes", str(small), "--out", f"{o}/m.fsbm"],
            "fit": ["fit", "--model", str(tmp_path / "toy.fsbm"), "--landmarks",
                    str(tmp_path / "lm.json"), "--out", f"{o}/fit.json"],
            "rig": ["rig", "--blendshapes", str(fx / "rig/blendshapes"), "--details",
                    str(fx / "rig/details"), "--alpha", str(fx / "rig/alpha.json"), "--out", f"{o}/rig.ply"],
            "bake-disp": ["bake-disp", "--base", str(fx / "meshes/000/01.ply"), "--scan",
                          str(fx / "detailed/000_01.ply"), "--res", "256", "--out", f"{o}/d.fmap"],
            "apply-disp": ["apply-disp", "--base", str(fx / "meshes/000/01.ply"), "--disp",
                           str(fx / "disp/000_01.fmap"), "--subdiv", "1", "--out", f"{o}/a.ply"],
            "refine": ["refine", "--mesh-e", str(fx / "flow/mesh_e.ply"), "--mesh-n",
                       str(fx / "flow/mesh_n.ply"), "--flow", str(fx / "flow/flow.fmap"),
                       "--out", f"{o}/r.ply"],
            "register": ["register", "--template", str(fx / "meshes/000/00.ply"), "--scan",
                         str(fx / "meshes/001/00.ply"), "--out", f"{o}/reg.ply"],
            "eval": ["eval", "--manifest", str(fx / "benchmark/manifest.json"), "--out", f"{o}/ev.json"],
        }

    outputs = {}
    for run, threads in (("a", "1"), ("b", "1"), ("c", "4")):
        o = tmp_path / run
        o.mkdir()
        for name, argv in commands(o).items():
            assert main(["--threads", threads] + argv) == 0, name
            target = Path(argv[argv.index("--out") + 1])
            outputs[(run, name)] = digest(target)
        rep = ["report", "--in", f"{o}/ev.json", "--format", "csv", "--out", f"{o}/t.csv"]
        assert main(["--threads", threads] + rep) == 0
        outputs[(run, "report")] = digest(o / "t.csv")
    names = [k[1] for k in outputs if k[0] == "a"]
    unstable = [n for n in names if outputs[("a", n)] != outputs[("b", n)]]
    threaded = [n for n in names if outputs[("a", n)] != outputs[("c", n)]]
    ev1 = json.loads((tmp_path / "a/ev.json").read_text())["samples"]
    ev4 = json.loads((tmp_path / "c/ev.json").read_text())["samples"]
    tdiff = max(abs(x[k] - y[k]) for x, y in zip(ev1, ev4) for k in ("cd", "mne", "cr"))
    ok = not unstable and tdiff <= 1e-9
    verdict(9, ok, f"{len(names)} subcommands bitwise-reproducible (unstable: {unstable or 'none'}); "
                   f"threads 1 vs 4 max metric diff {tdiff:.1e} (<= 1e-9), "
                   f"differing outputs: {threaded or 'none'}")
