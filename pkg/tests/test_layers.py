"""Attention blocks, the recurrent fusion cell, and the mixture head."""

import math

import numpy as np
import pytest
import torch

import helpers
from trajcast.layers import (
    FEEDBACK_PER_MODE,
    VAR_FLOOR,
    AgentToLaneAttention,
    FusionRecurrentCell,
    GaussianMixtureStep,
    GmmHead,
    MultiHeadAttention,
    PolylineEncoder,
    initial_mixture,
    integrate_step,
    lane_alignment_discount,
)

torch.manual_seed(0)


def rand(*shape, dtype=torch.float64, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).normal(size=shape), dtype=dtype)


class TestMultiHeadAttention:
    def test_single_element_reduces_to_value_projection(self):
        mha = MultiHeadAttention(8, 2).double()
        q = rand(1, 1, 8, seed=1)
        kv = rand(1, 1, 8, seed=2)
        out = mha(q, kv, kv)
        expected = q + mha.proj_out(mha.proj_v(kv))
        torch.testing.assert_close(out, expected, atol=1e-12, rtol=0)

    def test_two_identical_keys_attend_half_each(self):
        mha = MultiHeadAttention(8, 2).double()
        q = rand(1, 1, 8, seed=3)
        key = rand(1, 1, 8, seed=4).expand(1, 2, 8).contiguous()
        _, attn = mha(q, key, key, return_weights=True)
        torch.testing.assert_close(attn, torch.full_like(attn, 0.5), atol=0, rtol=0)

    def test_matches_scalar_reference(self):
        d, h = 8, 2
        mha = MultiHeadAttention(d, h).double()
        q_in = rand(1, 3, d, seed=5)
        k_in = rand(1, 4, d, seed=6)
        out, attn = mha(q_in, k_in, k_in, return_weights=True)

        q = mha.proj_q(q_in)[0].detach().numpy()
        k = mha.proj_k(k_in)[0].detach().numpy()
        v = mha.proj_v(k_in)[0].detach().numpy()
        dh = d // h
        fused = np.zeros((3, d))
        for head in range(h):
            sl = slice(head * dh, (head + 1) * dh)
            for i in range(3):
                scores = np.array(
                    [np.dot(q[i, sl], k[j, sl]) / math.sqrt(dh) for j in range(4)]
                )
                w = np.exp(scores - scores.max())
                w /= w.sum()
                np.testing.assert_allclose(attn[0, head, i].detach().numpy(), w, atol=1e-9)
                fused[i, sl] = sum(w[j] * v[j, sl] for j in range(4))
        expected = q_in + mha.proj_out(torch.as_tensor(fused)[None])
        torch.testing.assert_close(out, expected, atol=1e-9, rtol=0)

    def test_rows_sum_to_one(self):
        mha = MultiHeadAttention(8, 2).double()
        x = rand(2, 5, 8, seed=7)
        _, attn = mha(x, x, x, return_weights=True)
        torch.testing.assert_close(
            attn.sum(dim=-1), torch.ones_like(attn.sum(dim=-1)), atol=1e-9, rtol=0
        )
        assert (attn >= 0).all()

    def test_empty_key_set_is_identity(self):
        mha = MultiHeadAttention(8, 2).double()
        q = rand(1, 3, 8, seed=8)
        k = rand(1, 4, 8, seed=9)
        mask = torch.zeros(1, 4, dtype=torch.bool)
        out = mha(q, k, k, key_mask=mask)
        assert torch.equal(out, q)

    def test_masked_key_gets_zero_weight(self):
        mha = MultiHeadAttention(8, 2).double()
        q = rand(1, 3, 8, seed=10)
        k = rand(1, 4, 8, seed=11)
        mask = torch.tensor([[True, True, False, True]])
        _, attn = mha(q, k, k, key_mask=mask, return_weights=True)
        assert (attn[..., 2] == 0).all()

    def test_permutation_equivariance(self):
        mha = MultiHeadAttention(8, 2).double()
        x = rand(1, 5, 8, seed=12)
        perm = torch.tensor([3, 0, 4, 1, 2])
        out = mha(x, x, x)
        out_perm = mha(x[:, perm], x[:, perm], x[:, perm])
        torch.testing.assert_close(out_perm, out[:, perm], atol=1e-12, rtol=0)


class TestPolylineEncoder:
    def test_identical_lanes_identical_embeddings(self):
        enc = PolylineEncoder(8).double()
        pts = rand(1, 1, 6, 2, seed=13).expand(1, 3, 6, 2).contiguous()
        tang = rand(1, 1, 6, 2, seed=14).expand(1, 3, 6, 2).contiguous()
        emb = enc(pts, tang)
        assert torch.equal(emb[0, 0], emb[0, 1])
        assert torch.equal(emb[0, 0], emb[0, 2])

    def test_output_dimension(self):
        enc = PolylineEncoder(64)
        emb = enc(torch.randn(2, 5, 10, 2), torch.randn(2, 5, 10, 2))
        assert emb.shape == (2, 5, 64)

    def test_permuting_lanes_permutes_embeddings(self):
        enc = PolylineEncoder(8).double()
        pts = rand(1, 4, 6, 2, seed=15)
        tang = rand(1, 4, 6, 2, seed=16)
        perm = torch.tensor([2, 0, 3, 1])
        emb = enc(pts, tang)
        emb_perm = enc(pts[:, perm], tang[:, perm])
        torch.testing.assert_close(emb_perm, emb[:, perm], atol=0, rtol=0)


class TestLaneAlignmentDiscount:
    def test_on_lane_aligned_gives_one(self):
        pos = torch.zeros(1, 1, 2, dtype=torch.float64)
        heading = torch.tensor([[[1.0, 0.0]]], dtype=torch.float64)
        lane = torch.tensor([[[[0.0, 0.0], [5.0, 0.0]]]], dtype=torch.float64)
        tang = torch.tensor([[[[1.0, 0.0], [1.0, 0.0]]]], dtype=torch.float64)
        mask = torch.ones(1, 1, dtype=torch.bool)
        disc = lane_alignment_discount(pos, heading, lane, tang, mask)
        torch.testing.assert_close(disc, torch.ones_like(disc), atol=1e-12, rtol=0)

    def test_hand_value_for_distant_opposed_lane(self):
        pos = torch.zeros(1, 1, 2, dtype=torch.float64)
        heading = torch.tensor([[[1.0, 0.0]]], dtype=torch.float64)
        lane = torch.tensor([[[[20.0, 0.0], [25.0, 0.0]]]], dtype=torch.float64)
        tang = torch.tensor([[[[-1.0, 0.0], [-1.0, 0.0]]]], dtype=torch.float64)
        mask = torch.ones(1, 1, dtype=torch.bool)
        disc = lane_alignment_discount(
            pos, heading, lane, tang, mask, decay_length=10.0, misalignment_gain=5.0
        )
        # nearest distance 20, opposed tangent adds 5 * (1 - (-1)) = 10
        assert disc.item() == pytest.approx(math.exp(-3.0), abs=1e-12)

    def test_masked_lane_zeroed(self):
        pos = torch.zeros(1, 1, 2, dtype=torch.float64)
        heading = torch.tensor([[[1.0, 0.0]]], dtype=torch.float64)
        lane = rand(1, 2, 4, 2, seed=17)
        tang = rand(1, 2, 4, 2, seed=18)
        mask = torch.tensor([[True, False]])
        disc = lane_alignment_discount(pos, heading, lane, tang, mask)
        assert (disc[..., 1] == 0).all()


def aligned_two_lane_inputs(d=8):
    """Agent at origin heading +x; lane 0 on top of it and aligned, lane 1
    twenty metres ahead pointing back. Equal lane embeddings make the raw
    attention uniform, so the discounted weights are a hand computation."""
    pos = torch.zeros(1, 1, 2, dtype=torch.float64)
    heading = torch.tensor([[[1.0, 0.0]]], dtype=torch.float64)
    lane0 = torch.tensor([[0.0, 0.0], [5.0, 0.0]], dtype=torch.float64)
    lane1 = torch.tensor([[20.0, 0.0], [25.0, 0.0]], dtype=torch.float64)
    lanes = torch.stack([lane0, lane1])[None]
    tang = torch.stack([
        torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64),
        torch.tensor([[-1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64),
    ])[None]
    mask = torch.ones(1, 2, dtype=torch.bool)
    emb = rand(1, 1, d, seed=19).expand(1, 2, d).contiguous()
    return pos, heading, lanes, tang, mask, emb


class TestAgentToLaneAttention:
    def test_no_lanes_is_identity(self):
        attn = AgentToLaneAttention(8).double()
        agent = rand(1, 2, 8, seed=20)
        lanes = rand(1, 3, 8, seed=21)
        mask = torch.zeros(1, 3, dtype=torch.bool)
        disc = torch.zeros(1, 2, 3, dtype=torch.float64)
        out = attn(agent, lanes, disc, mask)
        assert torch.equal(out, agent)

    def test_fully_discounted_is_identity(self):
        attn = AgentToLaneAttention(8).double()
        agent = rand(1, 2, 8, seed=22)
        lanes = rand(1, 3, 8, seed=23)
        mask = torch.ones(1, 3, dtype=torch.bool)
        disc = torch.zeros(1, 2, 3, dtype=torch.float64)
        out = attn(agent, lanes, disc, mask)
        assert torch.equal(out, agent)

    def test_single_relevant_lane_value_projection(self):
        attn = AgentToLaneAttention(8).double()
        agent = rand(1, 1, 8, seed=24)
        lane = rand(1, 1, 8, seed=25)
        mask = torch.ones(1, 1, dtype=torch.bool)
        disc = torch.ones(1, 1, 1, dtype=torch.float64)
        out = attn(agent, lane, disc, mask)
        expected = agent + attn.proj_out(attn.proj_v(lane))
        torch.testing.assert_close(out, expected, atol=1e-12, rtol=0)

    def test_hand_weights_for_discounted_pair(self):
        pos, heading, lanes, tang, mask, emb = aligned_two_lane_inputs()
        attn = AgentToLaneAttention(8).double()
        disc = lane_alignment_discount(pos, heading, lanes, tang, mask)
        agent = rand(1, 1, 8, seed=26)
        _, weights = attn(agent, emb, disc, mask, return_weights=True)
        e3 = math.exp(-3.0)
        expected = torch.tensor([[[1.0 / (1.0 + e3), e3 / (1.0 + e3)]]], dtype=torch.float64)
        torch.testing.assert_close(weights, expected, atol=1e-9, rtol=0)

    def test_weights_renormalized(self):
        attn = AgentToLaneAttention(8).double()
        agent = rand(1, 3, 8, seed=27)
        lanes = rand(1, 4, 8, seed=28)
        mask = torch.ones(1, 4, dtype=torch.bool)
        disc = torch.rand(1, 3, 4, dtype=torch.float64) * 0.9 + 0.1
        _, weights = attn(agent, lanes, disc, mask, return_weights=True)
        torch.testing.assert_close(
            weights.sum(dim=-1), torch.ones(1, 3, dtype=torch.float64), atol=1e-9, rtol=0
        )


class TestFusionRecurrentCell:
    def make(self, d=6, social=5, feedback=4, dtype=torch.float64):
        cell = FusionRecurrentCell(d, social, feedback).to(dtype)
        return cell

    def test_zero_parameter_hand_values(self):
        cell = self.make()
        with torch.no_grad():
            for p in cell.parameters():
                p.zero_()
        h = rand(3, 6, seed=29)
        c = rand(3, 6, seed=30)
        s = rand(3, 5, seed=31)
        p = rand(3, 4, seed=32)
        h2, c2 = cell(h, c, s, p)
        torch.testing.assert_close(c2, 0.5 * c, atol=1e-9, rtol=0)
        torch.testing.assert_close(h2, 0.5 * torch.tanh(0.5 * c), atol=1e-9, rtol=0)

    def test_memory_ignores_feedback_bitwise(self):
        cell = self.make()
        h = rand(3, 6, seed=33)
        c = rand(3, 6, seed=34)
        s = rand(3, 5, seed=35)
        p = rand(3, 4, seed=36)
        h_a, c_a = cell(h, c, s, p)
        h_b, c_b = cell(h, c, s, p + 100.0)
        assert torch.equal(c_a, c_b)
        assert not torch.allclose(h_a, h_b)

    def test_reduces_to_lstm_when_update_path_disabled(self):
        d, social = 6, 5
        cell = self.make(d=d, social=social)
        with torch.no_grad():
            cell.w_hu.weight.zero_()
            cell.w_pu.weight.zero_()
            cell.b_u.zero_()
            cell.w_po.weight.zero_()
        ref = torch.nn.LSTMCell(social, d).double()
        with torch.no_grad():
            # torch gate order: input, forget, candidate, output
            ref.weight_ih.copy_(torch.cat([
                cell.w_si.weight, cell.w_sf.weight, cell.w_sg.weight,
                torch.zeros(d, social, dtype=torch.float64),
            ]))
            ref.weight_hh.copy_(torch.cat([
                cell.w_hi.weight, cell.w_hf.weight, cell.w_hg.weight, cell.w_ho.weight,
            ]))
            ref.bias_ih.copy_(torch.cat([cell.b_i, cell.b_f, cell.b_g, cell.b_o]))
            ref.bias_hh.zero_()
        h = rand(3, d, seed=37)
        c = rand(3, d, seed=38)
        s = rand(3, social, seed=39)
        p = rand(3, 4, seed=40)
        h_ours, c_ours = cell(h, c, s, p)
        h_ref, c_ref = ref(s, (h, c))
        torch.testing.assert_close(c_ours, c_ref, atol=1e-12, rtol=0)
        torch.testing.assert_close(h_ours, h_ref, atol=1e-12, rtol=0)

    def test_gradients_match_finite_differences(self):
        cell = self.make()
        h = rand(2, 6, seed=41).requires_grad_(True)
        c = rand(2, 6, seed=42).requires_grad_(True)
        s = rand(2, 5, seed=43).requires_grad_(True)
        p = rand(2, 4, seed=44).requires_grad_(True)
        r = rand(2, 6, seed=45)

        def loss():
            h2, c2 = cell(h, c, s, p)
            return (h2 * r).sum() + (c2 * r).sum()

        leaves = [h, c, s, p] + list(cell.parameters())
        checked = helpers.fd_check(
            loss, leaves, max_coords=4, rng=np.random.default_rng(0)
        )
        assert checked > 0


class TestGmmHead:
    def test_weights_sum_to_one(self):
        head = GmmHead(8, 6).double()
        _, _, w = head(rand(3, 4, 8, seed=46))
        torch.testing.assert_close(w.sum(dim=-1), torch.ones(3, 4, dtype=torch.float64),
                                   atol=1e-9, rtol=0)

    def test_variance_floor(self):
        head = GmmHead(8, 6).double()
        _, var, _ = head(rand(5, 8, seed=47) * 100.0)
        assert (var >= VAR_FLOOR).all()

    def test_six_modes_ten_feedback_numbers_each(self):
        head = GmmHead(8, 6).double()
        state = rand(2, 3, 8, seed=48)
        mean_vel, var_vel, weights = head(state)
        assert mean_vel.shape == (2, 3, 6, 2)
        assert var_vel.shape == (2, 3, 6, 2)
        assert weights.shape == (2, 3, 6)
        mix = initial_mixture(rand(2, 3, 2, seed=49), rand(2, 3, 2, seed=50), 6)
        step = integrate_step(mix, mean_vel, var_vel, weights, 0.1)
        assert FEEDBACK_PER_MODE == 10
        assert step.feedback().shape == (2, 3, 60)


class TestMixtureSteps:
    def test_initial_mixture_is_degenerate_at_last_state(self):
        pos = torch.tensor([[1.0, 2.0]], dtype=torch.float64)
        vel = torch.tensor([[0.5, -0.5]], dtype=torch.float64)
        mix = initial_mixture(pos, vel, 3)
        for i in range(3):
            torch.testing.assert_close(mix.mean_pos[0, i], pos[0], atol=0, rtol=0)
            torch.testing.assert_close(mix.mean_vel[0, i], vel[0], atol=0, rtol=0)
        assert (mix.var_pos == 0).all() and (mix.var_vel == 0).all()
        torch.testing.assert_close(mix.weights, torch.full((1, 3), 1.0 / 3.0,
                                                           dtype=torch.float64),
                                   atol=1e-12, rtol=0)

    def test_feedback_layout(self):
        mix = GaussianMixtureStep(
            mean_pos=torch.tensor([[1.0, 2.0]]),
            var_pos=torch.tensor([[3.0, 4.0]]),
            mean_vel=torch.tensor([[5.0, 6.0]]),
            var_vel=torch.tensor([[7.0, 8.0]]),
            weights=torch.tensor([0.25]),
        )
        expected = torch.tensor([1.0, 2, 3, 4, 5, 6, 7, 8, 0.25, 0.25])
        torch.testing.assert_close(mix.feedback(), expected[None].squeeze(0), atol=0, rtol=0)

    def test_integrator_single_step(self):
        mix = initial_mixture(torch.zeros(1, 2), torch.zeros(1, 2), 1)
        vel = torch.tensor([[[1.0, 2.0]]])
        var = torch.tensor([[[0.3, 0.4]]])
        w = torch.ones(1, 1)
        out = integrate_step(mix, vel, var, w, 0.1)
        torch.testing.assert_close(out.mean_pos, torch.tensor([[[0.1, 0.2]]]), atol=1e-9, rtol=0)
        torch.testing.assert_close(out.var_pos, torch.tensor([[[0.003, 0.004]]]), atol=1e-12, rtol=0)

    def test_integrator_zero_velocity_freezes_position(self):
        start = torch.tensor([[3.0, -1.0]])
        mix = initial_mixture(start, torch.zeros(1, 2), 1)
        out = integrate_step(mix, torch.zeros(1, 1, 2), torch.zeros(1, 1, 2),
                             torch.ones(1, 1), 0.1)
        torch.testing.assert_close(out.mean_pos[0, 0], start[0], atol=0, rtol=0)

    def test_thirty_steps_of_unit_velocity(self):
        mix = initial_mixture(torch.zeros(1, 2, dtype=torch.float64),
                              torch.zeros(1, 2, dtype=torch.float64), 1)
        vel = torch.tensor([[[1.0, 0.0]]], dtype=torch.float64)
        var = torch.zeros(1, 1, 2, dtype=torch.float64)
        w = torch.ones(1, 1, dtype=torch.float64)
        for _ in range(30):
            mix = integrate_step(mix, vel, var, w, 0.1)
        torch.testing.assert_close(mix.mean_pos[0, 0],
                                   torch.tensor([3.0, 0.0], dtype=torch.float64),
                                   atol=1e-9, rtol=0)
