"""Attention-gate tests against a straight-line scalar transcription oracle."""

import numpy as np
import numpy.testing as npt
import pytest

from baanet import gate as G
from baanet import tensor as T


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gate_transcription(r_in, t_in, p, w_r, w_t):
    """Scalar-by-scalar transcription of the gate equations on one sample.

    Written independently of baanet.gate: plain loops over channels and pixels,
    no engine ops. Inputs are numpy [C, H, W]; ``p`` is a dict of weight arrays.
    """
    c, h, w = r_in.shape
    cat = np.concatenate([r_in, t_in], axis=0)
    v_c = np.array([cat[ch].mean() for ch in range(2 * c)])
    hidden = np.maximum(p["w1"] @ v_c + p["b1"], 0.0)
    w_tc = _sigmoid(p["wt"] @ hidden + p["bt"])
    w_rc = _sigmoid(p["wr"] @ hidden + p["br"])

    t_dis = np.empty_like(t_in)
    r_dis = np.empty_like(r_in)
    for ch in range(c):
        t_dis[ch] = w_tc[ch] * t_in[ch]
        r_dis[ch] = w_rc[ch] * r_in[ch]

    r_rec = r_in + w_t * t_dis
    t_rec = t_in + w_r * r_dis

    cat2 = np.concatenate([r_rec, t_rec], axis=0)
    w_ts = np.empty((h, w))
    w_rs = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            acc_t = p["sbt"]
            acc_r = p["sbr"]
            for ch in range(2 * c):
                acc_t += p["swt"][ch] * cat2[ch, y, x]
                acc_r += p["swr"][ch] * cat2[ch, y, x]
            w_ts[y, x] = _sigmoid(acc_t)
            w_rs[y, x] = _sigmoid(acc_r)

    r_out = r_rec + w_t * (w_ts[None] * t_rec)
    t_out = t_rec + w_r * (w_rs[None] * r_rec)
    return {"t_dis": t_dis, "r_dis": r_dis, "w_ts": w_ts, "r_out": r_out, "t_out": t_out}


def make_gate(channels, seed=0, reduction=4):
    store = T.ParameterStore()
    params = G.GateParams.create(store, "g", channels, reduction, np.random.default_rng(seed))
    return store, params


def zero_gate(store):
    for _, p in store.items():
        p.array[...] = 0.0


def params_as_dict(params):
    return {
        "w1": params.mlp_shared_w1.array,
        "b1": params.mlp_shared_b1.array,
        "wt": params.mlp_head_t_w2.array,
        "bt": params.mlp_head_t_b2.array,
        "wr": params.mlp_head_r_w2.array,
        "br": params.mlp_head_r_b2.array,
        "swt": params.spatial_conv_t_w.array.reshape(-1),
        "sbt": float(params.spatial_conv_t_b.array[0]),
        "swr": params.spatial_conv_r_w.array.reshape(-1),
        "sbr": float(params.spatial_conv_r_b.array[0]),
    }


class TestChannelDistill:
    def test_zero_mlp_gives_half_gates(self):
        store, params = make_gate(3)
        zero_gate(store)
        rng = np.random.default_rng(1)
        r = T.Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
        t = T.Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
        t_dis, r_dis, w_tc, w_rc = G.channel_distill(r, t, params)
        npt.assert_array_equal(w_tc.array, np.full((2, 3, 1, 1), 0.5))
        npt.assert_array_equal(w_rc.array, np.full((2, 3, 1, 1), 0.5))
        npt.assert_allclose(t_dis.array, 0.5 * t.array, atol=0)

    def test_pooled_descriptor_of_constant_inputs(self):
        r = T.Tensor(np.full((1, 3, 4, 4), 2.0))
        t = T.Tensor(np.full((1, 3, 4, 4), -1.0))
        v_c = T.global_avg_pool(T.concat_channels(r, t)).array.reshape(-1)
        npt.assert_array_equal(v_c[:3], 2.0)
        npt.assert_array_equal(v_c[3:], -1.0)

    def test_matches_scalar_transcription(self):
        store, params = make_gate(2, seed=5)
        rng = np.random.default_rng(6)
        # hand-set, asymmetric weights so the two heads genuinely differ
        params.mlp_shared_w1.array[...] = rng.uniform(-1, 1, params.mlp_shared_w1.dims)
        params.mlp_head_t_w2.array[...] = rng.uniform(-1, 1, params.mlp_head_t_w2.dims)
        params.mlp_head_r_w2.array[...] = rng.uniform(-1, 1, params.mlp_head_r_w2.dims)
        params.mlp_shared_b1.array[...] = 0.1
        r = rng.uniform(-2, 2, (1, 2, 2, 2))
        t = rng.uniform(-2, 2, (1, 2, 2, 2))
        t_dis, _, _, _ = G.channel_distill(T.Tensor(r), T.Tensor(t), params)
        ref = gate_transcription(r[0], t[0], params_as_dict(params), 0.5, 0.5)
        npt.assert_allclose(t_dis.array[0], ref["t_dis"], atol=1e-12)

    def test_dim_mismatch_rejected(self):
        _, params = make_gate(2)
        with pytest.raises(T.ShapeError, match="rgb"):
            G.channel_distill(T.Tensor(np.zeros((1, 2, 4, 4))), T.Tensor(np.zeros((1, 2, 4, 5))), params)

    def test_reduction_clamps_for_single_channel(self):
        store, params = make_gate(1, reduction=4)
        assert params.mlp_shared_w1.dims == (1, 2)
        r = T.Tensor(np.ones((1, 1, 2, 2)))
        G.channel_distill(r, r, params)  # must not raise


class TestRecalibrate:
    def test_zero_weight_is_exact_identity(self):
        rng = np.random.default_rng(2)
        r_in = T.Tensor(rng.uniform(-1, 1, (1, 2, 3, 3)))
        t_in = T.Tensor(rng.uniform(-1, 1, (1, 2, 3, 3)))
        t_dis = T.Tensor(rng.uniform(-1, 1, (1, 2, 3, 3)))
        r_dis = T.Tensor(rng.uniform(-1, 1, (1, 2, 3, 3)))
        r_rec, _ = G.recalibrate(r_in, t_in, t_dis, r_dis, w_r=0.0, w_t=0.0)
        npt.assert_array_equal(r_rec.array, r_in.array)

    def test_unit_weight_reduces_to_plain_sum(self):
        rng = np.random.default_rng(3)
        r_in = T.Tensor(rng.uniform(-1, 1, (1, 2, 3, 3)))
        t_dis = T.Tensor(rng.uniform(-1, 1, (1, 2, 3, 3)))
        z = T.Tensor(np.zeros((1, 2, 3, 3)))
        r_rec, _ = G.recalibrate(r_in, z, t_dis, z, w_r=1.0, w_t=1.0)
        npt.assert_array_equal(r_rec.array, r_in.array + t_dis.array)

    def test_hand_arithmetic(self):
        r_in = T.Tensor(np.ones((1, 1, 2, 2)))
        t_dis = T.Tensor(np.full((1, 1, 2, 2), 2.0))
        z = T.Tensor(np.zeros((1, 1, 2, 2)))
        r_rec, _ = G.recalibrate(r_in, z, t_dis, z, w_r=0.0, w_t=0.5)
        npt.assert_array_equal(r_rec.array, np.full((1, 1, 2, 2), 2.0))


class TestSpatialAggregate:
    def test_zero_weights_pass_recalibrated_through(self):
        store, params = make_gate(3, seed=7)
        rng = np.random.default_rng(8)
        r_rec = T.Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
        t_rec = T.Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
        out = G.spatial_aggregate(r_rec, t_rec, params, w_r=0.0, w_t=0.0)
        npt.assert_array_equal(out.r_out.array, r_rec.array)
        npt.assert_array_equal(out.t_out.array, t_rec.array)

    def test_zero_convs_give_half_plane_gate(self):
        store, params = make_gate(2)
        zero_gate(store)
        rng = np.random.default_rng(9)
        r_rec = T.Tensor(rng.uniform(-1, 1, (1, 2, 3, 3)))
        t_rec = T.Tensor(rng.uniform(-1, 1, (1, 2, 3, 3)))
        out = G.spatial_aggregate(r_rec, t_rec, params, w_r=0.2, w_t=0.8)
        npt.assert_array_equal(out.w_ts.array, np.full((1, 1, 3, 3), 0.5))
        npt.assert_allclose(out.r_out.array, r_rec.array + 0.8 * 0.5 * t_rec.array, atol=1e-15)

    def test_matches_scalar_transcription(self):
        store, params = make_gate(3, seed=10)
        rng = np.random.default_rng(11)
        params.spatial_conv_t_w.array[...] = rng.uniform(-1, 1, (1, 6, 1, 1))
        params.spatial_conv_r_w.array[...] = rng.uniform(-1, 1, (1, 6, 1, 1))
        params.spatial_conv_t_b.array[...] = 0.3
        r = rng.uniform(-2, 2, (1, 3, 4, 4))
        t = rng.uniform(-2, 2, (1, 3, 4, 4))
        w_r, w_t = 0.3, 0.7
        out = G.gate_forward(T.Tensor(r), T.Tensor(t), params, w_r, w_t)
        ref = gate_transcription(r[0], t[0], params_as_dict(params), w_r, w_t)
        npt.assert_allclose(out.r_out.array[0], ref["r_out"], atol=1e-12)
        npt.assert_allclose(out.t_out.array[0], ref["t_out"], atol=1e-12)
        npt.assert_allclose(out.w_ts.array[0, 0], ref["w_ts"], atol=1e-12)


class TestGateForward:
    def test_full_identity_degeneration(self):
        store, params = make_gate(3)
        zero_gate(store)
        rng = np.random.default_rng(12)
        r = T.Tensor(rng.uniform(-1, 1, (2, 3, 5, 5)))
        t = T.Tensor(rng.uniform(-1, 1, (2, 3, 5, 5)))
        out = G.gate_forward(r, t, params, w_r=0.0, w_t=0.0)
        npt.assert_array_equal(out.r_out.array, r.array)
        npt.assert_array_equal(out.t_out.array, t.array)

    def test_gates_strictly_inside_unit_interval(self):
        store, params = make_gate(4, seed=13)
        rng = np.random.default_rng(14)
        for _ in range(5):
            r = T.Tensor(rng.uniform(-50, 50, (1, 4, 3, 3)))
            t = T.Tensor(rng.uniform(-50, 50, (1, 4, 3, 3)))
            out = G.gate_forward(r, t, params, 0.4, 0.6)
            for g in (out.w_tc, out.w_rc, out.w_ts, out.w_rs):
                assert np.all(g.array > 0.0) and np.all(g.array < 1.0)

    def test_affine_in_thermal_weight_with_frozen_spatial_gate(self):
        store, params = make_gate(2, seed=15)
        rng = np.random.default_rng(16)
        r = T.Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))
        t = T.Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))
        w_r = 0.3
        t_dis, r_dis, _, _ = G.channel_distill(r, t, params)
        mid = G.gate_forward(r, t, params, w_r, 0.5)
        w_ts = mid.w_ts.array  # frozen at the midpoint pass

        def r_out_at(w_t):
            r_rec = r.array + w_t * t_dis.array
            t_rec = t.array + w_r * r_dis.array  # independent of w_t
            return r_rec + w_t * (w_ts * t_rec)

        r0, r_half, r1 = r_out_at(0.0), r_out_at(0.5), r_out_at(1.0)
        npt.assert_allclose(r0 + r1, 2.0 * r_half, atol=1e-12)
        # the frozen midpoint reproduces the real gate output there
        npt.assert_allclose(r_half, mid.r_out.array, atol=1e-12)

    def test_orientation_swap_with_mirrored_params(self):
        """Both directions run the same op sequence: swapping inputs and
        mirroring every parameter must swap the outputs exactly."""
        store, params = make_gate(3, seed=17)
        c = 3
        mirror_store = T.ParameterStore()
        mirrored = G.GateParams.create(mirror_store, "m", c, 4, np.random.default_rng(0))

        def swap_halves(a, axis):
            return np.concatenate([np.take(a, range(c, 2 * c), axis), np.take(a, range(0, c), axis)], axis)

        mirrored.mlp_shared_w1.array[...] = swap_halves(params.mlp_shared_w1.array, 1)
        mirrored.mlp_shared_b1.array[...] = params.mlp_shared_b1.array
        mirrored.mlp_head_t_w2.array[...] = params.mlp_head_r_w2.array
        mirrored.mlp_head_t_b2.array[...] = params.mlp_head_r_b2.array
        mirrored.mlp_head_r_w2.array[...] = params.mlp_head_t_w2.array
        mirrored.mlp_head_r_b2.array[...] = params.mlp_head_t_b2.array
        mirrored.spatial_conv_t_w.array[...] = swap_halves(params.spatial_conv_r_w.array, 1)
        mirrored.spatial_conv_t_b.array[...] = params.spatial_conv_r_b.array
        mirrored.spatial_conv_r_w.array[...] = swap_halves(params.spatial_conv_t_w.array, 1)
        mirrored.spatial_conv_r_b.array[...] = params.spatial_conv_t_b.array

        rng = np.random.default_rng(18)
        r = T.Tensor(rng.uniform(-1, 1, (2, c, 4, 4)))
        t = T.Tensor(rng.uniform(-1, 1, (2, c, 4, 4)))
        w_r, w_t = 0.25, 0.75
        fwd = G.gate_forward(r, t, params, w_r, w_t)
        swp = G.gate_forward(t, r, mirrored, w_t, w_r)
        # mirroring permutes the channel-reduction order inside the convs and
        # the shared MLP, so agreement is exact up to float reassociation
        npt.assert_allclose(swp.r_out.array, fwd.t_out.array, atol=1e-12, rtol=0)
        npt.assert_allclose(swp.t_out.array, fwd.r_out.array, atol=1e-12, rtol=0)

    def test_gradient_check_through_full_gate(self):
        store = T.ParameterStore()
        params = G.GateParams.create(store, "g", 2, 4, np.random.default_rng(19))
        rng = np.random.default_rng(20)
        r = store.add("input.r", rng.uniform(-2, 2, (1, 2, 4, 4)))
        t = store.add("input.t", rng.uniform(-2, 2, (1, 2, 4, 4)))

        def loss_fn():
            out = G.gate_forward(r, t, params, 0.3, 0.7)
            return T.sum_all(T.add(out.r_out, out.t_out))

        report = T.grad_check(loss_fn, store, tolerance=1e-4)
        assert report.passed, "\n".join(report.format_lines())

    def test_per_item_weights_broadcast(self):
        store, params = make_gate(2, seed=21)
        rng = np.random.default_rng(22)
        r = T.Tensor(rng.uniform(-1, 1, (3, 2, 4, 4)))
        t = T.Tensor(rng.uniform(-1, 1, (3, 2, 4, 4)))
        w_r = np.array([0.0, 0.5, 1.0])
        out = G.gate_forward(r, t, params, w_r, 1.0 - w_r)
        single = G.gate_forward(
            T.Tensor(r.array[1:2]), T.Tensor(t.array[1:2]), params, 0.5, 0.5
        )
        npt.assert_allclose(out.r_out.array[1], single.r_out.array[0], atol=1e-12)
