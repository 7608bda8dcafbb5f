import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cafield import fields, so3

seeds = st.integers(0, 2**31 - 1)


def smooth_mixture(rng):
    g = fields.GaussianMixtureField.random(rng, scale=(0.35, 0.5))
    g.weights = g.weights / g.weights.sum()   # peak <= 1, like a normalized density
    return g


# -- normalization ------------------------------------------------------------

def test_normalize_examples():
    d = fields.DEFAULT_DEPTH_STEP
    assert fields.normalize_density(0.0) == 0.0
    assert fields.normalize_density(1e6) == 1.0
    assert fields.normalize_density(1 / d, d) == pytest.approx(1 - math.exp(-1), abs=1e-15)
    assert fields.normalize_density(1 / d) == pytest.approx(0.6321, abs=1e-4)


def test_normalize_errors():
    with pytest.raises(ValueError):
        fields.normalize_density([-1.0])
    with pytest.raises(ValueError):
        fields.normalize_density([1.0], d=0.0)


@given(st.lists(st.floats(0, 1e3), min_size=2, max_size=20))
def test_normalize_monotone_into_unit_interval(sig):
    s = np.sort(np.unique(sig))
    v = fields.normalize_density(s)
    assert np.all(v >= 0) and np.all(v < 1) or s.max() > 1e3
    assert np.all(np.diff(v) >= 0)
    # strict where float resolution allows
    small = s < 100
    assert np.all(np.diff(v[small]) > 0)


# -- scene probe --------------------------------------------------------------

def test_probe_ball_center():
    prov = fields.BallProvider(center=(0.2, 0.0, 0.0), radius=0.3)
    b = fields.scene_probe(prov)
    # brute force: mean of lattice points inside the ball
    X = fields.lattice(np.zeros(3), 2.0, 32)
    ref = X[np.linalg.norm(X - [0.2, 0, 0], axis=1) < 0.3].mean(axis=0)
    assert np.abs(b.center - [0.2, 0, 0]).max() < b.probe.spacing
    assert np.abs(b.center - ref).max() < b.probe.spacing


def test_probe_box_diagonal():
    # a box of full extent (0.4, 0.2, 0.2)
    prov = fields.BoxProvider(half=(0.2, 0.1, 0.1))
    b = fields.scene_probe(prov)
    assert abs(b.diagonal - np.linalg.norm([0.4, 0.2, 0.2])) < 2 * b.probe.spacing


def test_probe_empty_scene():
    with pytest.raises(fields.DegenerateError):
        fields.scene_probe(fields.FunctionProvider(lambda p: np.zeros(len(p))))


def test_probe_rotation_covariance():
    inst, prov = fields.synth_generate("lblock", 3)
    b = fields.scene_probe(prov)
    R = so3.random_rotation(np.random.default_rng(4))
    br = fields.scene_probe(fields.RotatedProvider(prov, R))
    # scene cube is centered at the origin, so c' = R c
    assert np.abs(br.center - R @ b.center).max() < b.probe.spacing
    assert abs(br.diagonal - b.diagonal) < 0.15 * b.diagonal


# -- resampling ---------------------------------------------------------------

def test_resample_identity_and_inverse():
    inst, prov = fields.synth_generate("wedge", 5)
    b = fields.scene_probe(prov)
    g0 = fields.resample_object_grid(prov, b, 16)
    gI = fields.resample_object_grid(prov, b, 16, R_aug=np.eye(3))
    np.testing.assert_array_equal(g0.values, gI.values)
    R = so3.random_rotation(np.random.default_rng(6))
    back = fields.RotatedProvider(prov, R.T, b.center)
    g2 = fields.resample_object_grid(back, b, 16, R_aug=R)
    assert np.abs(g2.values - g0.values).max() < 1e-12
    with pytest.raises(ValueError):
        fields.resample_object_grid(prov, b, 4)


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_resample_symmetric_provider_unchanged(seed):
    prov = fields.BallProvider(center=(0.1, -0.05, 0.0), radius=0.35)
    b = fields.SceneBounds(np.array([0.1, -0.05, 0.0]), 0.9, None, None)
    R = so3.random_rotation(np.random.default_rng(seed))
    g0 = fields.resample_object_grid(prov, b, 12)
    g1 = fields.resample_object_grid(prov, b, 12, R_aug=R)
    assert np.abs(g0.values - g1.values).max() < 1e-9


def test_grid_lattice_consistent():
    g = fields.DensityGrid(np.zeros((4, 4, 4)), (0.5, 0, 0), 2.0)
    X = g.coords()
    assert g.spacing == 0.5
    np.testing.assert_allclose(X.min(axis=0), [-0.25, -0.75, -0.75])
    np.testing.assert_allclose(X[1] - X[0], [0, 0, 0.5])


# -- gradients ----------------------------------------------------------------

def test_gradient_constant_and_linear():
    g = fields.DensityGrid(np.full((6, 6, 6), 0.3), np.zeros(3), 1.2)
    assert np.all(fields.finite_gradient(g) == 0)
    a = np.array([0.1, -0.2, 0.05])
    X = g.coords()
    g.values = (0.5 + X @ a).reshape(6, 6, 6)
    G = fields.finite_gradient(g).reshape(-1, 3)
    assert np.abs(G - a).max() < 1e-10   # one-sided is exact for linear too
    with pytest.raises(ValueError):
        fields.finite_gradient(fields.DensityGrid(np.zeros((2, 5, 5)), np.zeros(3), 1.0))


def test_gradient_radial_blob():
    s = 0.3
    g = fields.DensityGrid(np.zeros((32,) * 3), np.zeros(3), 2.0)
    X = g.coords()
    r2 = (X ** 2).sum(1)
    g.values = np.exp(-0.5 * r2 / s ** 2).reshape(g.values.shape)
    G = fields.finite_gradient(g).reshape(-1, 3)
    exact = -X / s ** 2 * np.exp(-0.5 * r2 / s ** 2)[:, None]
    inner = np.all(np.abs(X) < 1 - 1.5 * g.spacing, axis=1) & (r2 > 0.01)
    assert np.all((G[inner] * X[inner]).sum(1) < 0)   # points toward the center
    # O(dx^2): third derivative of the blob is bounded by ~2.6/s^3
    assert np.abs(G - exact)[inner].max() < 2.6 / s ** 3 / 6 * g.spacing ** 2 * 1.01


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_gradient_equivariance_analytic(seed):
    rng = np.random.default_rng(seed)
    f = fields.GaussianMixtureField.random(rng)
    R = so3.random_rotation(rng)
    x = rng.uniform(-0.8, 0.8, size=(50, 3))
    lhs = f.gradient(x @ R) @ R.T          # R grad f(R^-1 x)
    assert np.abs(lhs - f.rotated(R).gradient(x)).max() < 1e-6


def test_gradient_equivariance_discrete():
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        f = smooth_mixture(rng)
        R = so3.random_rotation(rng)
        g = fields.DensityGrid(np.zeros((32,) * 3), np.zeros(3), 2.0)
        X = g.coords()
        g.values = f.rotated(R)(X).reshape(g.values.shape)
        G = fields.finite_gradient(g).reshape(-1, 3)
        inner = np.all(np.abs(X) < 1 - 1.5 * g.spacing, axis=1)
        ref = f.gradient(X @ R) @ R.T
        worst = max(worst, np.abs(G - ref)[inner].max() / g.spacing ** 2)
    assert worst < 5


def test_local_average_equivariance():
    rng = np.random.default_rng(7)
    f = fields.GaussianMixtureField.random(rng)
    quad = fields.ball_quadrature(0.1)
    worst = 0.0
    for _ in range(5):
        R = so3.random_rotation(rng)
        x = rng.uniform(-0.5, 0.5, size=(20, 3))
        a = fields.ball_mean(f.rotated(R), x, 0.1, quad)
        b = fields.ball_mean(f, x @ R, 0.1, quad)
        worst = max(worst, np.abs(a - b).max())
    assert worst < 1e-4


def test_ball_mean_of_linear_is_center_value():
    f = lambda p: 1.0 + p @ np.array([0.3, -0.1, 0.2])
    x = np.array([[0.1, 0.2, 0.3]])
    assert fields.ball_mean(f, x, 0.2)[0] == pytest.approx(f(x)[0], abs=1e-12)


# -- k-means ------------------------------------------------------------------

def test_kmeans_small_examples():
    labels, means = fields.kmeans_1d([0, 0, 0, 1, 1], 2)
    assert labels.tolist() == [0, 0, 0, 1, 1]
    np.testing.assert_allclose(means, [0, 1])
    labels, means = fields.kmeans_1d([0.2, 0.5, 0.9], 1)
    assert labels.tolist() == [0, 0, 0] and means[0] == pytest.approx(1.6 / 3)
    with pytest.raises(fields.DegenerateError):
        fields.kmeans_1d([1.0, 1.0, 1.0], 2)


def test_kmeans_two_blobs_vs_threshold_oracle():
    rng = np.random.default_rng(8)
    x = np.concatenate([rng.normal(0.05, 0.02, 500), rng.normal(0.9, 0.02, 500)])
    truth = np.repeat([0, 1], 500)
    labels, _ = fields.kmeans_1d(x, 2, seed=3)
    assert np.mean(labels != truth) <= 0.01
    # brute-force best 2-means split over sorted thresholds
    s = np.sort(x)
    costs = [s[:i].var() * i + s[i:].var() * (len(s) - i) for i in range(1, len(s))]
    thr = s[int(np.argmin(costs)) + 1]
    np.testing.assert_array_equal(labels, (x >= thr).astype(int))


# -- synthetic data -----------------------------------------------------------

def test_synth_identity_pose_matches_template():
    inst, prov = fields.synth_generate("slab", 2, R_gt=np.eye(3), offset=np.zeros(3))
    b = fields.SceneBounds(np.zeros(3), 1.0, None, None)
    a = fields.resample_object_grid(prov, b, 12)
    t = fields.resample_object_grid(inst.template.provider(), b, 12)
    np.testing.assert_array_equal(a.values, t.values)


def test_synth_deterministic():
    a = fields.synth_generate("wedge", 9, clutter=0.2, noise=0.01)
    b = fields.synth_generate("wedge", 9, clutter=0.2, noise=0.01)
    np.testing.assert_array_equal(a[0].R_gt, b[0].R_gt)
    X = fields.lattice(np.zeros(3), 2.0, 16)
    np.testing.assert_array_equal(a[1](X), b[1](X))


def test_synth_unknown_category():
    with pytest.raises(KeyError):
        fields.synth_generate("teapot", 0)


def test_clutter_mass_fraction():
    inst, prov = fields.synth_generate("wedge", 10, clutter=0.1)
    _, clean = fields.synth_generate("wedge", 10)
    X = fields.lattice(np.zeros(3), 2.0, 48)
    total = fields.normalize_density(prov(X)).sum()
    obj = fields.normalize_density(clean(X)).sum()
    assert (total - obj) / total < 0.10


@pytest.mark.parametrize("cat", sorted(fields.CATALOG))
def test_catalog_shapes_asymmetric(cat):
    # no nontrivial rotation by pi about a principal axis maps the shape to itself
    t = fields.make_template(cat, 0)
    pts = t.surface_points(400, 0)
    X = pts - pts.mean(0)
    _, V = np.linalg.eigh(X.T @ X)
    for axis in V.T:
        R = so3.axis_angle(axis, math.pi)
        moved = fields.normalize_density(t.density(pts @ R.T + pts.mean(0) - pts.mean(0) @ R.T))
        assert moved.mean() < 0.9


# -- files --------------------------------------------------------------------

def test_grid_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    g = fields.DensityGrid(rng.uniform(size=(16, 16, 16)).astype(np.float32), (0.1, -0.2, 0.3), 0.75)
    p = tmp_path / "g.cafg"
    fields.grid_write(p, g)
    back = fields.grid_read(p)
    np.testing.assert_array_equal(back.values, g.values)
    np.testing.assert_array_equal(back.center, np.float32([0.1, -0.2, 0.3]))
    assert p.stat().st_size == fields.grid_file_size(16) == 34 + 16 ** 3 * 4


def test_grid_format_errors(tmp_path):
    g = fields.DensityGrid(np.zeros((8, 8, 8)), np.zeros(3), 1.0)
    p = tmp_path / "g.cafg"
    fields.grid_write(p, g)
    blob = p.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + blob[4:])
    (tmp_path / "short").write_bytes(blob[:-4])
    (tmp_path / "ver").write_bytes(blob[:4] + b"\x09\x00" + blob[6:])
    for name in ("bad", "short", "ver"):
        with pytest.raises(fields.FormatError):
            fields.grid_read(tmp_path / name)
    with pytest.raises(fields.FormatError):
        fields.grid_write(p, fields.DensityGrid(np.full((8, 8, 8), 2.0), np.zeros(3), 1.0))


def test_grid_provider_reproduces_lattice():
    rng = np.random.default_rng(12)
    g = fields.DensityGrid(rng.uniform(0, 0.9, size=(8, 8, 8)), (0.1, 0, 0), 1.0)
    prov = fields.GridProvider(g)
    back = fields.normalize_density(prov(g.coords())).reshape(g.values.shape)
    np.testing.assert_allclose(back, g.values, atol=1e-12)
    assert prov(np.array([[5.0, 0, 0]]))[0] == 0.0


def test_manifest_round_trip(tmp_path):
    inst, _ = fields.synth_generate("wedge", 1)
    m = fields.DatasetManifest([fields.ManifestEntry("wedge", 1, "wedge-1.cafg", inst.R_gt)],
                               {"clutter": 0.0, "noise": 0.0})
    m.write(tmp_path / "manifest.txt")
    back = fields.DatasetManifest.read(tmp_path / "manifest.txt")
    assert back.entries[0].path == "wedge-1.cafg"
    np.testing.assert_array_equal(back.entries[0].R_gt, inst.R_gt)
    (tmp_path / "junk.txt").write_text("hello\n")
    with pytest.raises(fields.FormatError):
        fields.DatasetManifest.read(tmp_path / "junk.txt")
