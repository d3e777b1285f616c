import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from seneva.errors import InvalidInput
from seneva.evaluation import (
    constant_velocity,
    evaluate_predictions,
    final_yaw_speed,
    gaussian_entropy,
    heatmap,
    min_ade,
    min_fde,
    miss_argoverse,
    miss_interaction,
    ood_report,
    scene_entropies,
    threshold_lon,
    total_entropy,
)
from seneva.model import DTYPE
from seneva.sampling import EndpointDistribution, gaussian2_log_pdf
from seneva.scene import Pose2, SceneMeta

from toys import perturb, set_decoder, set_prior, straight_scene, tiny_model

LOG_2PI_E = math.log(2 * math.pi * math.e)


# ---------------------------------------------------------------- oracles


def brute_ade(preds, gt):
    best = math.inf
    for p in preds:
        tot = 0.0
        for t in range(len(gt)):
            tot += math.sqrt((p[t][0] - gt[t][0]) ** 2 + (p[t][1] - gt[t][1]) ** 2)
        best = min(best, tot / len(gt))
    return best


def brute_fde(preds, gt):
    return min(math.sqrt((p[-1][0] - gt[-1][0]) ** 2 + (p[-1][1] - gt[-1][1]) ** 2) for p in preds)


def brute_miss_argoverse(preds, gt):
    for p in preds:
        if math.hypot(p[-1][0] - gt[-1][0], p[-1][1] - gt[-1][1]) <= 2.0:
            return False
    return True


def brute_threshold(v):
    return 1.0 if v < 1.4 else (2.0 if v > 11 else 1.0 + (v - 1.4) / 9.6)


def brute_miss_interaction(preds, gt, yaw, speed):
    # rotate the world by -yaw with an explicit matrix
    R = [[math.cos(-yaw), -math.sin(-yaw)], [math.sin(-yaw), math.cos(-yaw)]]
    for p in preds:
        dx, dy = p[-1][0] - gt[-1][0], p[-1][1] - gt[-1][1]
        lon = R[0][0] * dx + R[0][1] * dy
        lat = R[1][0] * dx + R[1][1] * dy
        if abs(lon) <= brute_threshold(speed) and abs(lat) <= 1.0:
            return False
    return True


# ---------------------------------------------------------------- entropy


class TestGaussianEntropy:
    def test_unit_2d(self):
        assert abs(gaussian_entropy(np.eye(2)) - LOG_2PI_E) < 1e-12
        assert abs(LOG_2PI_E - 2.8379) < 1e-4

    def test_scaling_adds_log4(self):
        L = np.array([[1.3, 0.0], [0.4, 0.7]])
        diff = gaussian_entropy(2 * L) - gaussian_entropy(L)  # covariance scaled by 4
        assert abs(diff - math.log(4)) < 1e-12

    def test_unit_1d(self):
        assert abs(gaussian_entropy(np.eye(1)) - 0.5 * LOG_2PI_E) < 1e-12
        assert abs(0.5 * LOG_2PI_E - 1.4189) < 1e-4

    def test_matches_determinant_formula(self):
        A = np.random.default_rng(0).normal(size=(3, 3))
        cov = A @ A.T + np.eye(3)
        ref = 0.5 * math.log((2 * math.pi * math.e) ** 3 * np.linalg.det(cov))
        assert abs(gaussian_entropy(np.linalg.cholesky(cov)) - ref) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInput):
            gaussian_entropy(np.eye(2), dim=3)


def unit_model(K=1, T=2):
    m = tiny_model(K=K, d_v=1, T=T, decoder_layers=0)
    for k in range(K):
        set_prior(m.nets, k, [0.0], 0.0, 0.0)
    set_decoder(m.nets, [[1.0], [0.0]], [0.0, 0.0], [0.0, 0.0])
    return m


class TestTotalEntropy:
    def test_unit_variance_closed_form(self):
        m = unit_model()
        x = torch.zeros(1, m.mixture_cfg.d_x, dtype=DTYPE)
        (r,) = total_entropy(m, x, n_mc=4, generator=torch.Generator().manual_seed(0))
        assert r.term_z == 0.0
        assert abs(r.term_s - 2 * LOG_2PI_E) < 1e-12 and abs(r.term_s - 5.6758) < 1e-4
        assert abs(r.term_v - LOG_2PI_E) < 1e-12
        assert r.total == r.term_s + r.term_v + r.term_z

    def test_term_z_is_log_k(self):
        m = unit_model(K=3)
        (r,) = total_entropy(m, torch.zeros(1, 4, dtype=DTYPE), 2, torch.Generator().manual_seed(0))
        assert r.term_z == math.log(3)

    def test_doubling_decoder_variance_increases_total(self):
        m = tiny_model(K=2, d_v=2, T=3)
        perturb(m, 0.3, 1)
        x = torch.randn(3, 4, dtype=DTYPE)
        a = total_entropy(m, x, 8, torch.Generator().manual_seed(5))
        with torch.no_grad():
            m.nets.decoder[-1].bias[2:4] += 0.5 * math.log(2)
            m.nets.decoder[-1].weight[4] *= math.sqrt(2)
            m.nets.decoder[-1].bias[4] *= math.sqrt(2)
        b = total_entropy(m, x, 8, torch.Generator().manual_seed(5))
        for ra, rb in zip(a, b):
            assert rb.total > ra.total
            assert abs(rb.term_s - ra.term_s - 3 * math.log(2)) < 1e-9

    def test_same_stream_bitwise(self):
        m = tiny_model(K=3, d_v=2, T=3)
        perturb(m, 0.3, 2)
        x = torch.randn(2, 4, dtype=DTYPE)
        a = total_entropy(m, x, 5, torch.Generator().manual_seed(9))
        b = total_entropy(m, x, 5, torch.Generator().manual_seed(9))
        assert a == b

    def test_identical_scenes_identical_reports(self):
        m = tiny_model(K=2, d_v=2, T=3)
        perturb(m, 0.3, 3)
        sc = straight_scene(H=2, T=3)
        a, b = scene_entropies(m, [sc, sc], n_mc=4, seed=1)
        assert a == b

    def test_n_mc_checked(self):
        with pytest.raises(InvalidInput):
            total_entropy(unit_model(), torch.zeros(1, 4, dtype=DTYPE), 0)


class TestOODReport:
    def scenes(self, flags, geometry="merge"):
        out = []
        for i, flag in enumerate(flags):
            sc = straight_scene(H=2, T=3)
            sc.meta = SceneMeta(geometry, flag, 0, {})
            out.append(sc)
        return out

    def test_identical_scenes_zero_change(self):
        m = tiny_model(K=2, d_v=2, T=3)
        rep = ood_report(self.scenes([False, False, True]), m, n_mc=3)
        assert rep.change_percent == {"merge": 0.0}
        assert [(g.ood, g.n) for g in rep.groups] == [(False, 2), (True, 1)]
        assert rep.groups[0].std == 0.0

    def test_missing_group_noted(self):
        m = tiny_model(K=2, d_v=2, T=3)
        rep = ood_report(self.scenes([False, False]), m, n_mc=2)
        assert rep.change_percent == {} and any("no OOD" in n for n in rep.notes)
        assert any("no OOD" in line for line in rep.lines())


# ---------------------------------------------------------------- metrics


class TestMetrics:
    def test_examples(self):
        gt = np.column_stack([np.arange(1.0, 6.0), np.zeros(5)])
        assert min_ade(gt[None], gt) == 0.0
        assert min_ade((gt + [1.0, 0.0])[None], gt) == 1.0
        preds = np.stack([gt + [1.0, 0.0], gt + [0.0, 3.0]])
        assert min_fde(preds, gt) == 1.0
        assert min_fde(gt[None], gt) == 0.0

    def test_threshold_lon(self):
        assert threshold_lon(0.5) == 1.0 and threshold_lon(11.0) == 2.0
        assert abs(threshold_lon(6.2) - 1.5) < 1e-15
        assert threshold_lon(1.4) == 1.0 and threshold_lon(np.nextafter(1.4, 0)) == 1.0
        assert threshold_lon(11.0) == threshold_lon(np.nextafter(11.0, 20)) == 2.0

    def test_argoverse_boundary(self):
        gt = np.array([[0.0, 0.0], [5.0, 0.0]])
        assert not miss_argoverse(np.array([[[0, 0], [5.0, 1.99]]]), gt)
        assert miss_argoverse(np.array([[[0, 0], [5.0, 2.01]]]), gt)
        assert not miss_argoverse(gt[None], gt)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0, 20), st.floats(-math.pi, math.pi))
    def test_exact_endpoint_never_misses(self, v, yaw):
        gt = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert not miss_interaction(gt[None], gt, yaw, v)

    def test_interaction_rotation(self):
        gt = np.array([[0.0, 0.0], [0.0, 10.0]])
        # heading +y: a 1.4 m error along y is longitudinal, along x lateral
        lon_err = np.array([[[0, 0], [0.0, 11.4]]])
        lat_err = np.array([[[0, 0], [1.4, 10.0]]])
        assert not miss_interaction(lon_err, gt, math.pi / 2, 6.2)
        assert miss_interaction(lat_err, gt, math.pi / 2, 6.2)

    def test_random_instances_against_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            M, T = rng.integers(1, 7), rng.integers(1, 8)
            gt = rng.normal(0, 5, (T, 2))
            preds = gt + rng.normal(0, rng.uniform(0.1, 4), (M, T, 2))
            yaw, speed = rng.uniform(-math.pi, math.pi), rng.uniform(0, 15)
            assert abs(min_ade(preds, gt) - brute_ade(preds.tolist(), gt.tolist())) <= 1e-12
            assert abs(min_fde(preds, gt) - brute_fde(preds.tolist(), gt.tolist())) <= 1e-12
            assert miss_argoverse(preds, gt) == brute_miss_argoverse(preds.tolist(), gt.tolist())
            assert miss_interaction(preds, gt, yaw, speed) == brute_miss_interaction(preds.tolist(), gt.tolist(), yaw, speed)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_and_rigid_invariance(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.normal(0, 5, (4, 2))
        preds = gt + rng.normal(0, 2, (6, 4, 2))
        th, o = rng.uniform(-3, 3), rng.normal(0, 50, 2)
        R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        perm = rng.permutation(6)
        for f in (min_ade, min_fde, miss_argoverse):
            assert f(preds[perm], gt) == f(preds, gt)
            assert abs(float(f(preds @ R.T + o, gt @ R.T + o)) - float(f(preds, gt))) < 1e-9
        yaw, v = final_yaw_speed(gt, 0.1)
        yaw2, v2 = final_yaw_speed(gt @ R.T + o, 0.1)
        assert miss_interaction(preds, gt, yaw, v) == miss_interaction(preds @ R.T + o, gt @ R.T + o, yaw2, v2)

    def test_final_yaw_speed(self):
        yaw, v = final_yaw_speed(np.array([[0.0, 0.0], [0.0, 0.5]]), 0.1)
        assert abs(yaw - math.pi / 2) < 1e-15 and abs(v - 5.0) < 1e-12
        yaw, v = final_yaw_speed(np.array([[-1.0, 0.0]]), 0.5, anchor=(0.0, 0.0))
        assert abs(abs(yaw) - math.pi) < 1e-15 and v == 2.0

    def test_evaluate_gt_gives_zeros(self):
        gts = [np.random.default_rng(i).normal(size=(5, 2)) for i in range(4)]
        for mr in ("argoverse", "interaction"):
            rep = evaluate_predictions([g[None] for g in gts], gts, mr=mr, step_seconds=0.1)
            assert (rep.min_ade, rep.min_fde, rep.miss_rate, rep.n_scenes, rep.k_used) == (0.0, 0.0, 0.0, 4, 1)

    def test_errors(self):
        with pytest.raises(InvalidInput):
            min_ade(np.zeros((2, 3, 2)), np.zeros((4, 2)))
        with pytest.raises(InvalidInput):
            evaluate_predictions([np.zeros((1, 2, 2))], [np.zeros((2, 2))], mr="nuscenes")
        with pytest.raises(InvalidInput):
            evaluate_predictions([np.zeros((1, 2, 2))], [np.zeros((2, 2))], mr="interaction")

    def test_constant_velocity(self):
        sc = straight_scene(H=3, T=4, speed=2.0)
        np.testing.assert_allclose(constant_velocity(sc, 4), [[2, 0], [4, 0], [6, 0], [8, 0]])


# ---------------------------------------------------------------- heatmap


def two_component_dist():
    rng = np.random.default_rng(1)
    mu = rng.normal(0, 1, (2, 3, 2))
    A = rng.normal(0, 0.4, (2, 3, 2, 2))
    cov = A @ A.transpose(0, 1, 3, 2) + 0.1 * np.eye(2)
    return EndpointDistribution.from_steps(mu, cov, [0.3, 0.7])


class TestHeatmap:
    def test_matches_per_cell_density(self):
        d = two_component_dist()
        hm = heatmap(d, (-6, 6, -5, 5), 0.5)
        for iy in range(0, len(hm.ys), 3):
            for ix in range(0, len(hm.xs), 4):
                g = np.array([hm.xs[ix], hm.ys[iy]])
                dens = [
                    sum(d.weights[c] * math.exp(gaussian2_log_pdf(g, d.means[c, t], d.covs[c, t])) for c in range(2))
                    for t in range(3)
                ]
                assert abs(hm.values[iy, ix] - math.log(max(dens))) < 1e-10

    def test_single_component_argmax_on_mean_path(self):
        d = EndpointDistribution.from_steps([[[1.0, 0.0]] * 4], [[0.05 * np.eye(2)] * 4], [1.0])
        hm = heatmap(d, (-1, 6, -2, 2), 0.25)
        iy, ix = np.unravel_index(np.argmax(hm.values), hm.values.shape)
        cell = np.array([hm.xs[ix], hm.ys[iy]])
        assert np.linalg.norm(d.means[0] - cell, axis=1).min() <= 0.25 * math.sqrt(2) / 2 + 1e-12

    def test_halving_resolution(self):
        d = two_component_dist()
        a = heatmap(d, (-3, 3.2, -2, 2.1), 0.5).values.size
        b = heatmap(d, (-3, 3.2, -2, 2.1), 0.25).values.size
        nx, ny = math.ceil(6.2 / 0.5), math.ceil(4.1 / 0.5)
        assert a == nx * ny
        assert (2 * nx - 1) * (2 * ny - 1) <= b <= (2 * nx + 1) * (2 * ny + 1)
        assert heatmap(d, (0, 4, 0, 4), 0.25).values.size == 4 * heatmap(d, (0, 4, 0, 4), 0.5).values.size

    def test_world_frame_region(self):
        d = two_component_dist()
        pose = Pose2((10.0, 5.0), 0.6)
        local = heatmap(d, (-4, 4, -4, 4), 0.5)
        c, s = math.cos(0.6), math.sin(0.6)
        g = np.array([local.xs[5], local.ys[7]])
        world = np.array([[c, -s], [s, c]]) @ g + np.array([10.0, 5.0])
        hm = heatmap(d, (world[0] - 0.25, world[0] + 0.25, world[1] - 0.25, world[1] + 0.25), 0.5, pose=pose)
        assert hm.values.shape == (1, 1)
        assert abs(hm.values[0, 0] - local.values[7, 5]) < 1e-10

    def test_errors(self):
        d = two_component_dist()
        with pytest.raises(InvalidInput):
            heatmap(d, (0, 1, 0, 1), 0.0)
        with pytest.raises(InvalidInput):
            heatmap(d, (1, 0, 0, 1), 0.5)

    def test_lines_header(self):
        hm = heatmap(two_component_dist(), (0, 1, 0, 1), 0.5)
        lines = hm.lines()
        assert lines[0].startswith("# region") and len(lines) == 1 + len(hm.ys)
