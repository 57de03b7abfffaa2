import numpy as np
import pytest

from mmpid.aggregate import (NetVladParams, average_pool, init_netvlad,
                             netvlad_backward, netvlad_forward,
                             quality_weighted_pool)
from mmpid.frames import select_top_k
from mmpid.numerics import grad_check, make_rng


class TestPooling:
    def test_average_of_identical_frames_is_idempotent(self):
        v = make_rng(0).normal(size=4)
        frames = np.tile(v, (6, 1))
        np.testing.assert_allclose(average_pool(frames), v, atol=1e-15)

    def test_average_of_two_basis_vectors(self):
        out = average_pool(np.array([[1.0, 0.0], [0.0, 1.0]]))
        np.testing.assert_allclose(out, [0.5, 0.5], atol=1e-15)

    def test_average_matches_summation_oracle(self):
        frames = make_rng(1).normal(size=(32, 7))
        oracle = np.zeros(7)
        for row in frames:
            oracle += row
        oracle /= 32
        np.testing.assert_allclose(average_pool(frames), oracle, atol=1e-12)

    def test_accepts_selected_frames(self):
        vectors, quality = make_rng(2).normal(size=(10, 3)), make_rng(3).random(10)
        sel = select_top_k(vectors, quality, 4, make_rng(0))
        np.testing.assert_allclose(average_pool(sel),
                                   sel.vectors.mean(axis=0), atol=1e-12)

    def test_quality_weighted_matches_oracle(self):
        rng = make_rng(4)
        frames, quality = rng.normal(size=(9, 5)), rng.random(9)
        oracle = (frames * quality[:, None]).sum(axis=0) / quality.sum()
        np.testing.assert_allclose(quality_weighted_pool(frames, quality),
                                   oracle, atol=1e-12)

    def test_quality_weighted_all_zero_falls_back_to_mean(self):
        frames = make_rng(5).normal(size=(4, 3))
        np.testing.assert_array_equal(quality_weighted_pool(frames, np.zeros(4)),
                                      average_pool(frames))

    def test_bitwise_permutation_invariance(self):
        rng = make_rng(6)
        frames, quality = rng.normal(size=(32, 6)), rng.random(32)
        perm = rng.permutation(32)
        assert np.array_equal(average_pool(frames), average_pool(frames[perm]))
        assert np.array_equal(quality_weighted_pool(frames, quality),
                              quality_weighted_pool(frames[perm], quality[perm]))


def _hand_params():
    return NetVladParams(
        centers=np.array([[0.5, 0.0], [0.0, 0.5]]),
        assign_w=np.array([[1.0, 0.0], [0.0, 1.0]]),
        assign_b=np.zeros(2),
        proj_w=np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0]]),
        proj_b=np.array([0.1, -0.1]),
        bn_gamma=np.ones(2), bn_beta=np.zeros(2),
        bn_mean=np.zeros(2), bn_var=np.ones(2), bn_batches=1)


class TestNetVladForward:
    def test_hand_computed_example(self):
        # frames e1, e2; assignments softmax([1,0]) / softmax([0,1]);
        # residual sums give v = [.231059, .268941, .268941, .231059];
        # FC yields (0.6, 0.4); BN with zero mean, unit var divides
        # by sqrt(1 + 1e-5)
        out, _ = netvlad_forward(np.eye(2), _hand_params(), mode="infer")
        np.testing.assert_allclose(out, [0.599997000015, 0.399998000010],
                                   atol=1e-9)

    def test_single_cluster_reduces_to_scaled_mean_offset(self):
        rng = make_rng(7)
        d, k = 5, 12
        p = init_netvlad(d, 1, 4, rng)
        x = rng.normal(size=(k, d))
        # with one cluster the softmax weight is 1 per frame:
        # V = sum_t (x_t - c) = k * (mean - c)
        _, cache = netvlad_forward(x, p, mode="train")
        expected = k * (x.mean(axis=0) - p.centers[0])
        np.testing.assert_allclose(cache["v_flat"][0], expected, atol=1e-10)

    def test_frames_at_centers_give_zero_residuals(self):
        # sharp assignment puts each frame fully on its own center, so
        # every accumulated residual vanishes
        rng = make_rng(8)
        p = init_netvlad(3, 2, 4, rng)
        p.assign_w = 200.0 * p.centers
        p.assign_b = -100.0 * np.sum(p.centers ** 2, axis=1)
        x = np.vstack([p.centers[0], p.centers[1], p.centers[0]])
        _, cache = netvlad_forward(x, p, mode="train")
        np.testing.assert_allclose(cache["v_flat"], 0.0, atol=1e-8)

    def test_bitwise_permutation_invariance_infer(self):
        rng = make_rng(9)
        p = init_netvlad(6, 3, 8, rng)
        x = rng.normal(size=(2, 20, 6))
        netvlad_forward(x, p, mode="train")  # initialize running stats
        out1, _ = netvlad_forward(x, p, mode="infer")
        perm = rng.permutation(20)
        out2, _ = netvlad_forward(x[:, perm, :], p, mode="infer")
        assert np.array_equal(out1, out2)

    def test_no_final_normalization_output_scales_with_input(self):
        rng = make_rng(10)
        p = init_netvlad(4, 2, 6, rng)
        p.bn_mean, p.bn_var, p.bn_batches = np.zeros(6), np.ones(6), 1
        p.proj_b = np.zeros(6)
        x = rng.normal(size=(3, 4))
        small, _ = netvlad_forward(x, p, mode="infer")
        big, _ = netvlad_forward(100.0 * x, p, mode="infer")
        ratio = np.linalg.norm(big) / np.linalg.norm(small)
        assert ratio > 20.0  # an L2-normalized output would pin this at 1

    def test_infer_before_any_training_batch_raises(self):
        p = init_netvlad(3, 2, 4, make_rng(11))
        with pytest.raises(RuntimeError, match="running batch-norm"):
            netvlad_forward(np.zeros((2, 3)), p, mode="infer")

    def test_running_stats_update_only_in_train_mode(self):
        rng = make_rng(12)
        p = init_netvlad(3, 2, 4, rng)
        netvlad_forward(rng.normal(size=(4, 5, 3)), p, mode="train")
        mean_before = p.bn_mean.copy()
        netvlad_forward(rng.normal(size=(4, 5, 3)), p, mode="infer")
        np.testing.assert_array_equal(p.bn_mean, mean_before)
        netvlad_forward(rng.normal(size=(4, 5, 3)), p, mode="train")
        assert not np.array_equal(p.bn_mean, mean_before)


class TestNetVladBackward:
    def _flat(self, p, names):
        return np.concatenate([np.atleast_1d(getattr(p, n)).ravel()
                               for n in names])

    def test_gradients_match_central_differences(self):
        rng = make_rng(13)
        p = init_netvlad(3, 2, 5, rng)
        x = rng.normal(size=(4, 4, 3))           # batch=4, frames=4, d=3
        w_loss = rng.normal(size=5)
        names = list(p.PARAM_NAMES)

        def loss_at(theta):
            i = 0
            for n in names:
                a = getattr(p, n)
                a[...] = theta[i:i + a.size].reshape(a.shape)
                i += a.size
            out, _ = netvlad_forward(x, p, mode="train")
            return float((out @ w_loss).sum())

        theta0 = self._flat(p, names)
        out, cache = netvlad_forward(x, p, mode="train")
        grads, _ = netvlad_backward(p, cache, np.tile(w_loss, (4, 1)))
        analytic = np.concatenate([np.atleast_1d(grads[n]).ravel()
                                   for n in names])
        err = grad_check(loss_at, theta0, analytic, eps=1e-5)
        loss_at(theta0)  # restore
        assert err < 1e-5

    def test_input_gradients_match_central_differences(self):
        rng = make_rng(14)
        p = init_netvlad(3, 2, 5, rng)
        x0 = rng.normal(size=(2, 4, 3))
        w_loss = rng.normal(size=5)

        def loss_at(flat):
            out, _ = netvlad_forward(flat.reshape(2, 4, 3), p, mode="train")
            return float((out @ w_loss).sum())

        _, cache = netvlad_forward(x0, p, mode="train")
        _, dframes = netvlad_backward(p, cache, np.tile(w_loss, (2, 1)))
        err = grad_check(loss_at, x0.ravel(), dframes.ravel(), eps=1e-5)
        assert err < 1e-5

    def test_zero_upstream_gives_zero_gradients(self):
        rng = make_rng(15)
        p = init_netvlad(3, 2, 5, rng)
        x = rng.normal(size=(2, 4, 3))
        _, cache = netvlad_forward(x, p, mode="train")
        grads, dframes = netvlad_backward(p, cache, np.zeros((2, 5)))
        for g in grads.values():
            np.testing.assert_array_equal(g, 0.0)
        np.testing.assert_array_equal(dframes, 0.0)

    def test_saturated_away_cluster_gets_no_center_gradient(self):
        rng = make_rng(16)
        p = init_netvlad(3, 2, 5, rng)
        p.assign_b = np.array([50.0, -50.0])  # cluster 1 weight ~ e^-100
        x = rng.normal(size=(2, 4, 3))
        _, cache = netvlad_forward(x, p, mode="train")
        grads, _ = netvlad_backward(p, cache, np.ones((2, 5)))
        assert np.abs(grads["centers"][1]).max() < 1e-20
