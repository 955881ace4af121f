import math

import numpy as np
import pytest

import oracles
from icpe import tensor as T
from icpe.coupling import (CouplingParams, cic_forward, compute_condition, couple,
                           generate_coupled_info)
from icpe.rng import Rng, derive_seed


def make_params(c, d, seed=0, zero_out=False):
    reg = T.ParamRegistry()
    p = CouplingParams.create(reg, lambda n: Rng(derive_seed(seed, n)), c, d)
    if not zero_out:
        rng = Rng(derive_seed(seed, "out"))
        p.proj_out_w.data = rng.uniform_array(p.proj_out_w.shape, -0.7, 0.7)
        p.proj_out_b.data = rng.uniform_array(p.proj_out_b.shape, -0.2, 0.2)
    return p


def as_dict(p):
    return {"q_w": p.proj_q_w.data, "q_b": p.proj_q_b.data, "k_w": p.proj_k_w.data, "k_b": p.proj_k_b.data,
            "v_w": p.proj_v_w.data, "v_b": p.proj_v_b.data, "o_w": p.proj_out_w.data, "o_b": p.proj_out_b.data}


def feat(shape, seed, lo=-1.0, hi=1.0):
    return T.tensor(Rng(seed).uniform_array(shape, lo, hi))


def test_zero_proj_out_is_default_and_annihilates():
    p = make_params(3, 2, zero_out=True)
    assert not p.proj_out_w.data.any() and not p.proj_out_b.data.any()
    x_hat_q, _ = generate_coupled_info(feat((3, 2, 2), 1), feat((3, 3, 3), 2), p)
    assert not x_hat_q.data.any()
    x_s = feat((3, 3, 3), 2)
    for use_ccm in (True, False):
        out = cic_forward(feat((3, 2, 2), 1), x_s, p, use_ccm=use_ccm).x_hat_s
        assert np.array_equal(out.data, x_s.data)


def test_single_query_pixel_gives_unit_attention_and_constant_output():
    p = make_params(3, 2)
    x_hat_q, att = generate_coupled_info(feat((3, 1, 1), 3), feat((3, 2, 3), 4), p)
    assert att.shape == (6, 1) and np.all(att.data == 1.0)
    assert np.allclose(x_hat_q.data, x_hat_q.data[:, :1, :1], atol=1e-15)


def test_hand_set_2x2_query_1x1_support():
    # d=2, C=2 with identity-like projections
    p = make_params(2, 2)
    eye = np.eye(2).reshape(2, 2, 1, 1)
    for w, b in ((p.proj_q_w, p.proj_q_b), (p.proj_k_w, p.proj_k_b), (p.proj_v_w, p.proj_v_b),
                 (p.proj_out_w, p.proj_out_b)):
        w.data = eye.copy()
        b.data = np.zeros(2)
    x_q = np.array([[[1.0, 0.0], [0.0, 2.0]], [[0.0, 1.0], [1.0, 0.0]]])
    x_s = np.array([[[1.0]], [[0.5]]])
    x_hat_q, att = generate_coupled_info(T.tensor(x_q), T.tensor(x_s), p)
    # scores q·k_j for the four query pixels: [1, 0.5, 0.5, 2]
    e = [math.exp(1.0), math.exp(0.5), math.exp(0.5), math.exp(2.0)]
    z = sum(e)
    probs = [v / z for v in e]
    assert np.allclose(att.data[0], probs, atol=1e-15)
    ch0 = probs[0] * 1 + probs[3] * 2
    ch1 = probs[1] + probs[2]
    assert np.allclose(x_hat_q.data.reshape(-1), [ch0, ch1], atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_generator_matches_high_precision_oracle(seed):
    p = make_params(3, 2, seed)
    x_q, x_s = Rng(seed + 10).uniform_array((3, 4, 3), -1, 1), Rng(seed + 20).uniform_array((3, 2, 4), -1, 1)
    x_hat_q, att = generate_coupled_info(T.tensor(x_q), T.tensor(x_s), p)
    ref_att, ref_out = oracles.coupled_info_oracle(x_q, x_s, as_dict(p))
    assert oracles.max_abs_diff(ref_att, att.data) <= 1e-10
    assert oracles.max_abs_diff(ref_out, x_hat_q.data) <= 1e-10


def test_attention_rows_sum_to_one():
    p = make_params(4, 3)
    _, att = generate_coupled_info(feat((4, 4, 4), 5, -5, 5), feat((4, 3, 2), 6, -5, 5), p)
    assert np.all(np.abs(att.data.sum(axis=1) - 1.0) <= 1e-9)


def test_query_permutation_leaves_output_unchanged():
    p = make_params(3, 3)
    x_q = Rng(7).uniform_array((3, 2, 3), -1, 1)
    x_s = feat((3, 2, 2), 8)
    perm = Rng(9).sample(list(range(6)), 6)
    permuted = x_q.reshape(3, 6)[:, perm].reshape(3, 2, 3)
    a, att_a = generate_coupled_info(T.tensor(x_q), x_s, p)
    b, att_b = generate_coupled_info(T.tensor(permuted), x_s, p)
    assert np.allclose(a.data, b.data, atol=1e-14)
    assert np.allclose(att_a.data[:, perm], att_b.data, atol=1e-15)


@pytest.mark.parametrize("clamp", [True, False])
def test_condition_matches_oracle(clamp):
    x_q, x_s = Rng(11).uniform_array((3, 3, 3), -1, 1), Rng(12).uniform_array((3, 4, 2), -1, 1)
    out = compute_condition(T.tensor(x_q), T.tensor(x_s), clamp=clamp)
    assert oracles.max_abs_diff(oracles.condition_oracle(x_q, x_s, clamp), out.data) <= 1e-10
    if clamp:
        assert out.data.min() >= 0 and out.data.max() <= 1


def test_condition_examples():
    x_q = T.tensor(np.ones((2, 2, 2)))
    same = compute_condition(x_q, T.tensor(np.ones((2, 3, 3))))
    assert np.allclose(same.data, 1.0, atol=1e-15)
    ortho = np.zeros((2, 2, 2))
    ortho[0], ortho[1] = 1.0, -1.0
    assert not compute_condition(x_q, T.tensor(ortho)).data.any()
    one = compute_condition(x_q, T.tensor(np.array([[[1.0]], [[0.0]]])))
    assert one.data[0, 0] == pytest.approx(0.70710678, abs=1e-8)


def test_couple_examples_and_oracle():
    x_s = T.tensor(np.ones((2, 2, 2)))
    assert np.array_equal(couple(x_s, T.tensor(np.full((2, 2, 2), 7.0)), T.tensor(np.zeros((2, 2)))).data, x_s.data)
    assert not couple(x_s, T.tensor(-np.ones((2, 2, 2))), T.tensor(np.ones((2, 2)))).data.any()
    half = couple(x_s, T.tensor(np.full((2, 2, 2), 2.0)), T.tensor(np.full((2, 2), 0.5)))
    assert np.all(half.data == 2.0)
    xs, xh, c = Rng(13).uniform_array((3, 2, 3)), Rng(14).uniform_array((3, 2, 3)), Rng(15).uniform_array((2, 3))
    out = couple(T.tensor(xs), T.tensor(xh), T.tensor(c))
    assert oracles.max_abs_diff(oracles.couple_oracle(xs, xh, c), out.data) <= 1e-10
    with pytest.raises(T.ShapeError):
        couple(T.tensor(xs), T.tensor(xh), T.tensor(np.zeros((3, 2))))


def test_zero_condition_is_bitwise_identity():
    p = make_params(3, 2)
    x_s = feat((3, 2, 2), 16)
    x_hat_q, _ = generate_coupled_info(feat((3, 2, 2), 17), x_s, p)
    assert np.array_equal(couple(x_s, x_hat_q, T.tensor(np.zeros((2, 2)))).data, x_s.data)


def test_no_ccm_equals_all_ones_mask():
    p = make_params(3, 2)
    x_q, x_s = feat((3, 3, 2), 18), feat((3, 2, 2), 19)
    got = cic_forward(x_q, x_s, p, use_ccm=False)
    x_hat_q, _ = generate_coupled_info(x_q, x_s, p)
    want = couple(x_s, x_hat_q, T.tensor(np.ones((2, 2))))
    assert np.array_equal(got.x_hat_s.data, want.data)
    assert np.all(got.condition.data == 1.0)


def test_full_cic_matches_composed_oracle():
    p = make_params(3, 2, seed=4)
    x_q, x_s = Rng(21).uniform_array((3, 3, 3), -1, 1), Rng(22).uniform_array((3, 2, 3), -1, 1)
    out = cic_forward(T.tensor(x_q), T.tensor(x_s), p)
    _, x_hat = oracles.coupled_info_oracle(x_q, x_s, as_dict(p))
    cond = oracles.condition_oracle(x_q, x_s)
    ref = [[[cond[r][s] * x_hat[c][r][s] + oracles.mp.mpf(float(x_s[c, r, s])) for s in range(3)]
            for r in range(2)] for c in range(3)]
    assert oracles.max_abs_diff(ref, out.x_hat_s.data) <= 1e-10


def test_output_shape_follows_support():
    p = make_params(3, 2)
    out = cic_forward(feat((3, 5, 1), 23), feat((3, 2, 4), 24), p)
    assert out.x_hat_s.shape == (3, 2, 4) and out.attention.shape == (8, 5)


def test_channel_mismatch_raises():
    p = make_params(3, 2)
    with pytest.raises(T.ShapeError):
        generate_coupled_info(feat((2, 2, 2), 1), feat((3, 2, 2), 2), p)
