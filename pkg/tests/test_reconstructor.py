import math

import numpy as np
import pytest

from quadshade.errors import BoundaryPixel
from quadshade.evalkit import surface_report
from quadshade.patch_model import LightVector
from quadshade.proposal_engine import NoiseModel, ProposalCollection, ScaleProposals, infer_image
from quadshade.reconstructor import (AggregateNormals, Labeling, ReconConfig, _delta_sums,
                                     aggregate_normals, auto_parameters, delta, depth_gradient,
                                     depth_gradient_adjoint, frankot_chellappa, global_cost,
                                     reconstruct, smooth_depth, trace_is_monotone, update_labels,
                                     weighted_energy, weighted_integrate_cg)
from quadshade.synth import make_scene

L = LightVector.from_elevation(60.0)


def make_scale(size, image_shape, shapes, cost, present=None):
    """ScaleProposals over every interior centre from (nr, nc, J, 5) shapes and (nr, nc, J) costs."""
    h = size // 2
    H, W = image_shape
    rows, cols = np.arange(h, H - h), np.arange(h, W - h)
    shapes = np.asarray(shapes, dtype=float)
    nr, nc, J = shapes.shape[:3]
    assert (nr, nc) == (len(rows), len(cols))
    if present is None:
        present = np.ones((nr, nc), dtype=bool)
    theta = np.broadcast_to(np.linspace(-math.pi, math.pi, J, endpoint=False), (nr, nc, J)).copy()
    return ScaleProposals(size, rows, cols, present, theta, shapes,
                          np.zeros((nr, nc, J)), np.asarray(cost, dtype=float))


def collection(image_shape, scales):
    return ProposalCollection(tuple(image_shape), L, NoiseModel(), scales[0].J, scales)


def random_scale(rng, size, image_shape, J):
    h = size // 2
    nr, nc = image_shape[0] - 2 * h, image_shape[1] - 2 * h
    shapes = rng.normal(0, 0.3, (nr, nc, J, 5))
    shapes[..., :3] *= 0.1
    return make_scale(size, image_shape, shapes, rng.uniform(0, 5, (nr, nc, J)))


# ---------------------------------------------------------------- delta

def test_delta_planar_surface_is_zero():
    # Z equal to the patch depth z = 0.3x + 0.4y agrees with a = [0, 0, 0, 0.3, 0.4]
    yy, xx = np.mgrid[0:9, 0:9].astype(float)
    Z = 0.3 * xx + 0.4 * yy
    for x, y in [(1, 1), (4, 4), (7, 2)]:
        assert delta(Z, [0, 0, 0, 0.3, 0.4], x, y, (4, 4)) == pytest.approx(0.0, abs=1e-24)


def test_delta_dummy_is_zero():
    Z = np.random.default_rng(0).normal(size=(6, 6))
    assert delta(Z, None, 2, 3, (2, 2)) == 0.0
    assert delta(Z, None, 0, 0, (2, 2)) == 0.0


def test_delta_flat_depth():
    Z = np.zeros((7, 7))
    for x in range(1, 6):
        for y in range(1, 6):
            assert delta(Z, [0, 0, 0, 0.3, 0], x, y, (3, 3)) == pytest.approx(0.09, rel=1e-12)


def test_delta_uses_patch_centred_coordinates():
    # curved proposal: the normal depends on the offset from the patch centre
    Z = np.zeros((9, 9))
    a = [0.1, 0.0, 0.0, 0.0, 0.0]
    assert delta(Z, a, 4, 4, (4, 4)) == 0.0
    assert delta(Z, a, 6, 4, (4, 4)) == pytest.approx(0.4 ** 2)
    assert delta(Z, a, 6, 4, (4, 6)) == 0.0


def test_delta_boundary_pixel():
    Z = np.zeros((5, 5))
    for x, y in [(0, 2), (4, 2), (2, 0), (2, 4)]:
        with pytest.raises(BoundaryPixel):
            delta(Z, [0, 0, 0, 0, 0], x, y, (2, 2))


def test_delta_sums_match_pointwise_delta():
    rng = np.random.default_rng(1)
    shape = (12, 13)
    sc = random_scale(rng, 5, shape, 3)
    Z = rng.normal(size=shape)
    sums = _delta_sums(Z, sc)
    h = 2
    for i in range(sc.grid_shape[0]):
        for j in range(sc.grid_shape[1]):
            r, c = int(sc.rows[i]), int(sc.cols[j])
            if not (h < r < shape[0] - 1 - h and h < c < shape[1] - 1 - h):
                continue  # border patches use one-sided differences
            for k in range(3):
                ref = sum(delta(Z, sc.shapes[i, j, k], x, y, (r, c))
                          for y in range(r - h, r + h + 1) for x in range(c - h, c + h + 1))
                assert sums[i, j, k] == pytest.approx(ref, rel=1e-9, abs=1e-12)


# ---------------------------------------------------------------- labels and cost

def single_patch(shape_a, D1, image=(5, 5), size=5):
    a = np.zeros((1, 1, 1, 5))
    a[0, 0, 0] = shape_a
    return make_scale(size, image, a, np.array([[[D1]]]))


def test_update_labels_examples():
    sc = single_patch([0, 0, 0, 0, 0], 0.0)
    lab = update_labels(np.zeros((5, 5)), [sc], 1.0, 10.0, True)
    assert lab.labels[0][0, 0] == 0

    # sum of delta over the patch = 25 * 1.0 with a4 = 1 on flat depth
    sc = single_patch([0, 0, 0, 1.0, 0], 0.0)
    assert _delta_sums(np.zeros((5, 5)), sc)[0, 0, 0] == pytest.approx(25.0)
    lab = update_labels(np.zeros((5, 5)), [sc], 1.0, 10.0, True)
    assert lab.labels[0][0, 0] == lab.J
    lab = update_labels(np.zeros((5, 5)), [sc], 1.0, 10.0, False)
    assert lab.labels[0][0, 0] == 0


def test_update_labels_ties_go_to_lowest_index():
    a = np.zeros((1, 1, 3, 5))
    sc = make_scale(5, (5, 5), a, np.zeros((1, 1, 3)))
    assert update_labels(np.zeros((5, 5)), [sc], 1.0, 0.0, True).labels[0][0, 0] == 0


def test_update_labels_skips_absent_patches():
    rng = np.random.default_rng(2)
    sc = random_scale(rng, 3, (6, 6), 4)
    sc.present[1, 2] = False
    lab = update_labels(np.zeros((6, 6)), [sc], 1.0, 10.0, True)
    assert lab.labels[0][1, 2] == -1
    assert np.all(lab.labels[0][sc.present] >= 0)


def test_label_optimality():
    rng = np.random.default_rng(3)
    shape = (10, 11)
    scales = [random_scale(rng, 3, shape, 4), random_scale(rng, 5, shape, 4)]
    Z = rng.normal(0, 0.5, shape)
    lam, D_phi = 0.7, 6.0
    lab = update_labels(Z, scales, lam, D_phi, True)
    base = global_cost(Z, lab, scales, lam, D_phi)
    for s in range(2):
        for i in range(0, scales[s].grid_shape[0], 2):
            for j in range(0, scales[s].grid_shape[1], 3):
                for k in range(lab.J + 1):
                    alt = lab.copy()
                    alt.labels[s][i, j] = k
                    assert global_cost(Z, alt, scales, lam, D_phi) >= base - 1e-9 * abs(base)


def test_global_cost_examples():
    rng = np.random.default_rng(4)
    sc = random_scale(rng, 3, (7, 7), 4)
    lab = Labeling([np.full(sc.grid_shape, 4)], 4)
    P = sc.grid_shape[0] * sc.grid_shape[1]
    assert global_cost(rng.normal(size=(7, 7)), lab, [sc], 0.5, 3.0) == pytest.approx(P * 0.5 * 3.0)

    # perfect depth for a single planar proposal
    yy, xx = np.mgrid[0:5, 0:5].astype(float)
    sc1 = single_patch([0, 0, 0, 0.2, -0.1], 0.0)
    lab1 = Labeling([np.zeros((1, 1), dtype=int)], 1)
    assert global_cost(0.2 * xx - 0.1 * yy, lab1, [sc1], 1.0) == pytest.approx(0.0, abs=1e-24)


def test_global_cost_additive_over_patches():
    rng = np.random.default_rng(5)
    shape = (9, 9)
    sc = random_scale(rng, 3, shape, 3)
    Z = rng.normal(size=shape)
    lab = update_labels(Z, [sc], 1.0, 4.0, True)
    total = global_cost(Z, lab, [sc], 1.0, 4.0)
    parts = 0.0
    for i in range(sc.grid_shape[0]):
        for j in range(sc.grid_shape[1]):
            one = Labeling([np.full(sc.grid_shape, -1)], 3)
            one.labels[0][i, j] = lab.labels[0][i, j]
            parts += global_cost(Z, one, [sc], 1.0, 4.0)
    assert total == pytest.approx(parts, rel=1e-12)


def test_shift_invariance():
    rng = np.random.default_rng(6)
    shape = (9, 10)
    sc = random_scale(rng, 3, shape, 5)
    Z = rng.normal(size=shape)
    lab = update_labels(Z, [sc], 1.0, 4.0, True)
    assert lab == update_labels(Z + 12.5, [sc], 1.0, 4.0, True)
    assert global_cost(Z + 12.5, lab, [sc], 1.0, 4.0) == pytest.approx(
        global_cost(Z, lab, [sc], 1.0, 4.0), rel=1e-12)
    assert delta(Z + 3.0, sc.shapes[1, 1, 0], 3, 3, (2, 2)) == pytest.approx(
        delta(Z, sc.shapes[1, 1, 0], 3, 3, (2, 2)), rel=1e-12)


def test_auto_parameters():
    a = np.zeros((1, 2, 3, 5))
    cost = np.array([[[1.0, 2.0, 5.0], [0.0, 3.0, 4.0]]])
    sc = make_scale(3, (3, 4), a, cost)
    big = make_scale(5, (5, 6), np.zeros((1, 2, 3, 5)), np.zeros((1, 2, 3)) + [0, 100, 200])
    lam, D_phi = auto_parameters([big, sc])
    # median - min gaps: 1 and 3, mean 2
    assert lam == pytest.approx(1 / 8)
    assert D_phi == pytest.approx(80.0)


def test_auto_parameters_rejects_flat_costs():
    sc = make_scale(3, (3, 3), np.zeros((1, 1, 3, 5)), np.ones((1, 1, 3)))
    with pytest.raises(ValueError):
        auto_parameters([sc])


# ---------------------------------------------------------------- aggregate normals

def test_aggregate_single_patch():
    sc = make_scale(3, (7, 7), np.zeros((5, 5, 1, 5)), np.zeros((5, 5, 1)))
    sc.shapes[2, 2, 0] = [0.05, 0.0, 0.0, 0.2, -0.1]
    lab = Labeling([np.full((5, 5), -1)], 1)
    lab.labels[0][2, 2] = 0
    agg = aggregate_normals(lab, [sc], (7, 7))
    assert agg.w.sum() == 9 and agg.w.max() == 1
    # centre (3, 3); pixel (row 3, col 4) is dx = 1
    assert agg.nx[3, 4] == pytest.approx(-0.1 - 0.2)
    assert agg.ny[3, 4] == pytest.approx(0.1)
    assert agg.nx[0, 0] == 0.0 and agg.w[0, 0] == 0


def test_aggregate_all_dummy():
    rng = np.random.default_rng(7)
    sc = random_scale(rng, 3, (6, 6), 2)
    lab = Labeling([np.full(sc.grid_shape, 2)], 2)
    agg = aggregate_normals(lab, [sc], (6, 6))
    assert not agg.w.any() and not agg.nx.any() and not agg.ny.any()


def test_aggregate_mean_of_two():
    s1 = make_scale(3, (3, 3), np.array([[[[0, 0, 0, -0.2, 0]]]]), np.zeros((1, 1, 1)))
    s2 = make_scale(3, (3, 3), np.array([[[[0, 0, 0, -0.4, 0]]]]), np.zeros((1, 1, 1)))
    lab = Labeling([np.zeros((1, 1), dtype=int), np.zeros((1, 1), dtype=int)], 1)
    agg = aggregate_normals(lab, [s1, s2], (3, 3))
    assert np.all(agg.w == 2)
    np.testing.assert_allclose(agg.nx, 0.3)


# ---------------------------------------------------------------- Frankot-Chellappa

def test_fc_zero_field():
    assert not frankot_chellappa(np.zeros((8, 9)), np.zeros((8, 9))).any()


@pytest.mark.parametrize("shape", [(32, 48), (33, 31)])
def test_fc_periodic_analytic_surface(shape):
    H, W = shape
    y, x = np.mgrid[0:H, 0:W].astype(float)
    kx, ky = 2 * np.pi / W, 2 * np.pi / H
    Z = np.sin(kx * x) * np.cos(ky * y)
    nx = -kx * np.cos(kx * x) * np.cos(ky * y)
    ny = ky * np.sin(kx * x) * np.sin(ky * y)
    rec = frankot_chellappa(nx, ny)
    assert abs(rec.mean()) < 1e-12
    assert np.sqrt(np.mean((rec - (Z - Z.mean())) ** 2)) < 1e-6


def periodic_diff_matrix(n):
    """Periodic spectral differentiation on unit-spaced samples (cotangent formula)."""
    h = 2 * np.pi / n
    k = np.arange(n)[:, None] - np.arange(n)[None, :]
    with np.errstate(divide="ignore"):
        if n % 2 == 0:
            col = 0.5 * (-1.0) ** k / np.tan(k * h / 2)
        else:
            col = 0.5 * (-1.0) ** k / np.sin(k * h / 2)
    col[k == 0] = 0.0
    return col * h


def test_fc_nonintegrable_field_is_least_squares_projection():
    n = 16
    y, x = np.mgrid[0:n, 0:n].astype(float)
    nx, ny = y.copy(), np.zeros((n, n))
    D = periodic_diff_matrix(n)
    I = np.eye(n)
    Dx = np.kron(I, D)   # row-major flattening: x varies fastest
    Dy = np.kron(D, I)
    A = np.vstack([Dx, Dy])
    b = np.concatenate([-nx.ravel(), -ny.ravel()])
    z = np.linalg.lstsq(A, b, rcond=None)[0].reshape(n, n)
    z -= z.mean()
    rec = frankot_chellappa(nx, ny)
    assert np.sqrt(np.mean((rec - z) ** 2)) < 1e-9


def test_periodic_diff_matrix_oracle():
    n = 16
    t = np.arange(n)
    f = np.sin(2 * np.pi * 3 * t / n)
    df = 2 * np.pi * 3 / n * np.cos(2 * np.pi * 3 * t / n)
    np.testing.assert_allclose(periodic_diff_matrix(n) @ f, df, atol=1e-12)


# ---------------------------------------------------------------- weighted CG

def test_gradient_adjoint():
    rng = np.random.default_rng(8)
    Z = rng.normal(size=(7, 9))
    vx, vy = rng.normal(size=(7, 9)), rng.normal(size=(7, 9))
    gx, gy = depth_gradient(Z)
    lhs = np.sum(gx * vx) + np.sum(gy * vy)
    rhs = np.sum(Z * depth_gradient_adjoint(vx, vy))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def gradient_matrix(n):
    """Dense 1-D version of the depth-gradient stencil."""
    D = np.zeros((n, n))
    D[0, :2] = [-1, 1]
    D[-1, -2:] = [-1, 1]
    for i in range(1, n - 1):
        D[i, i - 1], D[i, i + 1] = -0.5, 0.5
    return D


def test_cg_matches_dense_least_squares():
    n = 16
    rng = np.random.default_rng(9)
    w = rng.integers(1, 5, (n, n))
    agg = AggregateNormals(w, rng.normal(size=(n, n)), rng.normal(size=(n, n)))
    D = gradient_matrix(n)
    I = np.eye(n)
    sw = np.sqrt(w.ravel().astype(float))
    A = np.vstack([sw[:, None] * np.kron(I, D), sw[:, None] * np.kron(D, I)])
    b = np.concatenate([-sw * agg.nx.ravel(), -sw * agg.ny.ravel()])
    z = np.linalg.lstsq(A, b, rcond=None)[0].reshape(n, n)
    z -= z.mean()
    rec, info = weighted_integrate_cg(agg, np.zeros((n, n)), 2000)
    assert info["converged"]
    assert np.sqrt(np.mean((rec - z) ** 2)) < 1e-6


def test_cg_recovers_discrete_gradient_field():
    rng = np.random.default_rng(10)
    Z0 = smooth_depth(rng.normal(size=(24, 20)), 2.0)
    Z0 -= Z0.mean()
    gx, gy = depth_gradient(Z0)
    agg = AggregateNormals(np.ones(Z0.shape, dtype=int), -gx, -gy)
    rec, info = weighted_integrate_cg(agg, np.zeros(Z0.shape), 1000)
    assert np.sqrt(np.mean((rec - Z0) ** 2)) < 1e-6
    assert weighted_energy(rec, agg) < 1e-12


def test_cg_single_weighted_pixel_descends():
    rng = np.random.default_rng(11)
    w = np.zeros((10, 10), dtype=int)
    w[4, 6] = 1
    agg = AggregateNormals(w, rng.normal(size=(10, 10)), rng.normal(size=(10, 10)))
    Z0 = rng.normal(size=(10, 10))
    rec, _ = weighted_integrate_cg(agg, Z0, 20)
    assert weighted_energy(rec, agg) <= weighted_energy(Z0, agg)


def test_cg_energy_monotone():
    rng = np.random.default_rng(12)
    agg = AggregateNormals(rng.integers(0, 4, (20, 20)), rng.normal(size=(20, 20)),
                           rng.normal(size=(20, 20)))
    _, info = weighted_integrate_cg(agg, rng.normal(size=(20, 20)), 60)
    e = np.array(info["energies"])
    assert np.all(np.diff(e) <= 1e-9 * e[:-1])


def test_cg_rejects_zero_iterations():
    agg = AggregateNormals(np.ones((4, 4), dtype=int), np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        weighted_integrate_cg(agg, np.zeros((4, 4)), 0)


# ---------------------------------------------------------------- config

def test_schedule():
    assert ReconConfig().schedule() == [8.0, 4.0, 2.0, 1.0]
    assert ReconConfig(sigma0=3.0, sigma_factor=0.5).schedule() == [3.0, 1.5, 1.0]
    for bad in ({"sigma0": 1.0}, {"sigma_factor": 1.0}, {"lam": -1.0}, {"cg_iters": 0}):
        with pytest.raises(ValueError):
            ReconConfig(**bad)


# ---------------------------------------------------------------- full alternation

@pytest.fixture(scope="module")
def gentle_scene():
    # low curvature: the quadratic model holds and the dummy is rarely needed
    Z, img, mask, _, rs = make_scene(1, (48, 48), amplitude=2.0)
    col = infer_image(img, mask, rs.light, (5, 9), J=21)
    return Z, col


def test_reconstruct_trace_and_accuracy(gentle_scene):
    Z, col = gentle_scene
    res = reconstruct(col)
    assert res.converged
    assert trace_is_monotone(res.trace, 1e-9)
    stages = list(res.stage_traces())
    assert stages[:4] == ["anneal_sigma=8", "anneal_sigma=4", "anneal_sigma=2", "anneal_sigma=1"]
    assert stages[4:] == ["dummy", "refine"]
    assert abs(res.Z.mean()) < 1e-12
    assert surface_report(res.Z, Z).q50 < 15.0


def test_reconstruct_without_dummy_stage_agrees(gentle_scene):
    _, col = gentle_scene
    full = reconstruct(col)
    nod = reconstruct(col, cfg=ReconConfig(use_dummy=False))
    assert "dummy" not in nod.stage_traces()
    a = np.concatenate([x.ravel() for x in full.labeling.labels])
    b = np.concatenate([x.ravel() for x in nod.labeling.labels])
    assert np.mean(a == b) >= 0.95


def test_reconstruct_deterministic(gentle_scene):
    _, col = gentle_scene
    r1 = reconstruct(col)
    r2 = reconstruct(col, workers=4)
    assert (r1.lam, r1.D_phi) == auto_parameters(col.scales)
    assert r1.lam == r2.lam and r1.D_phi == r2.D_phi
    assert np.array_equal(r1.Z, r2.Z)
    assert r1.labeling == r2.labeling
    assert [t["cost"] for t in r1.trace] == [t["cost"] for t in r2.trace]


def test_reconstruct_manual_lambda(gentle_scene):
    _, col = gentle_scene
    res = reconstruct(col, cfg=ReconConfig(lam=0.5, max_rounds=3, refine_rounds=2,
                                           patch_sizes=[5]))
    assert res.lam == 0.5 and res.D_phi == 20.0
    assert len(res.labeling.labels) == 1


def test_reconstruct_rejects_empty():
    sc = make_scale(3, (5, 5), np.zeros((3, 3, 2, 5)), np.zeros((3, 3, 2)),
                    present=np.zeros((3, 3), dtype=bool))
    with pytest.raises(ValueError):
        reconstruct(collection((5, 5), [sc]))
