"""Building blocks of the forecaster: masked multi-head attention with a
residual skip, a convolutional polyline encoder, direction-aware agent-to-lane
attention, the recurrent fusion cell, and the Gaussian-mixture output head
with its velocity integrator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

VAR_FLOOR = 1e-3  # lower bound on regressed velocity variances
FEEDBACK_PER_MODE = 10  # (mu_p, var_p, mu_v, var_v) pairs + weight for each


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over set elements with a residual skip.

    The output is the query input plus a linear fusion of the per-head
    attention results, so an all-masked key set leaves queries unchanged.
    """

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.proj_q = nn.Linear(d_model, d_model)
        self.proj_k = nn.Linear(d_model, d_model)
        self.proj_v = nn.Linear(d_model, d_model)
        self.proj_out = nn.Linear(d_model, d_model)

    def forward(self, query, key, value, key_mask=None, return_weights=False):
        """query: (B, Nq, d); key/value: (B, Nk, d); key_mask: (B, Nk) bool."""
        b, nq, _ = query.shape
        nk = key.shape[1]

        def split(x, n):
            return x.view(b, n, self.n_heads, self.d_head).transpose(1, 2)

        q = split(self.proj_q(query), nq)
        k = split(self.proj_k(key), nk)
        v = split(self.proj_v(value), nk)

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)  # (B, H, Nq, Nk)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        if key_mask is not None:
            # rows with no valid key softmax to NaN; treat them as "attend to nothing"
            any_valid = key_mask.any(dim=-1)[:, None, None, None]
            attn = torch.where(any_valid, attn, torch.zeros_like(attn))
        fused = (attn @ v).transpose(1, 2).reshape(b, nq, self.d_model)
        out = query + self.proj_out(fused)
        if key_mask is not None:
            # an empty key set leaves the queries untouched
            out = torch.where(key_mask.any(dim=-1)[:, None, None], out, query)
        if return_weights:
            return out, attn
        return out


class PolylineEncoder(nn.Module):
    """Embed resampled lane polylines into fixed-size vectors.

    Each lane arrives as P points with unit tangents, (P, 4) per lane. Two
    1-d convolutions over the point sequence feed a learned softmax pooling
    across points.
    """

    def __init__(self, d_model: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv1d(4, d_model, kernel_size, padding=pad)
        self.conv2 = nn.Conv1d(d_model, d_model, kernel_size, padding=pad)
        self.pool_score = nn.Linear(d_model, 1)

    def forward(self, lane_points, lane_tangents):
        """lane_points/lane_tangents: (B, L, P, 2) -> (B, L, d)."""
        b, l, p, _ = lane_points.shape
        x = torch.cat([lane_points, lane_tangents], dim=-1)  # (B, L, P, 4)
        x = x.view(b * l, p, 4).transpose(1, 2)
        x = torch.relu(self.conv1(x))
        x = torch.relu(self.conv2(x))  # (B*L, d, P)
        x = x.transpose(1, 2)  # (B*L, P, d)
        w = torch.softmax(self.pool_score(x), dim=1)  # (B*L, P, 1)
        pooled = (w * x).sum(dim=1)
        return pooled.view(b, l, -1)


def lane_alignment_discount(
    pos, heading, lane_points, lane_tangents, lane_mask,
    decay_length: float = 10.0, misalignment_gain: float = 5.0,
):
    """Soft relevance of each lane to each agent, in (0, 1].

    The effective distance is the euclidean distance to the nearest lane
    point plus ``misalignment_gain * (1 - cos)`` of the angle between the
    agent heading and the lane tangent at that point; relevance decays as
    exp(-d / decay_length). Masked lanes get 0.

    pos/heading: (B, N, 2); lane_points/tangents: (B, L, P, 2);
    lane_mask: (B, L) -> (B, N, L).
    """
    delta = pos[:, :, None, None, :] - lane_points[:, None, :, :, :]  # (B, N, L, P, 2)
    dist = torch.linalg.norm(delta, dim=-1)  # (B, N, L, P)
    d_min, idx = dist.min(dim=-1)  # (B, N, L)
    tang = lane_tangents[:, None].expand(-1, pos.shape[1], -1, -1, -1)
    nearest_tang = torch.gather(
        tang, 3, idx[..., None, None].expand(-1, -1, -1, 1, 2)
    ).squeeze(3)  # (B, N, L, 2)
    cos = (heading[:, :, None, :] * nearest_tang).sum(dim=-1)
    d_eff = d_min + misalignment_gain * (1.0 - cos)
    disc = torch.exp(-d_eff / decay_length)
    return disc * lane_mask[:, None, :].to(disc.dtype)


class AgentToLaneAttention(nn.Module):
    """Single-head attention pulling lane context into an agent state.

    Lanes provide queries and values, the agent state provides the key; the
    post-softmax weights are discounted by lane relevance and renormalized,
    and the fused context is added to the agent state through a skip.
    """

    def __init__(self, d_model: int):
        super().__init__()
        self.proj_q = nn.Linear(d_model, d_model)
        self.proj_k = nn.Linear(d_model, d_model)
        self.proj_v = nn.Linear(d_model, d_model)
        self.proj_out = nn.Linear(d_model, d_model)
        self.scale = math.sqrt(d_model)

    def forward(self, agent_state, lane_emb, discount, lane_mask, return_weights=False):
        """agent_state: (B, N, d); lane_emb: (B, L, d); discount: (B, N, L)."""
        q = self.proj_q(lane_emb)  # (B, L, d)
        k = self.proj_k(agent_state)  # (B, N, d)
        v = self.proj_v(lane_emb)
        scores = torch.einsum("bnd,bld->bnl", k, q) / self.scale
        scores = scores.masked_fill(~lane_mask[:, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        any_lane = lane_mask.any(dim=-1)[:, None, None]
        attn = torch.where(any_lane, attn, torch.zeros_like(attn))
        attn = attn * discount
        total = attn.sum(dim=-1, keepdim=True)
        attn = attn / total.clamp_min(1e-12)
        context = torch.einsum("bnl,bld->bnd", attn, v)
        out = agent_state + self.proj_out(context)
        # no usable lane (empty set or fully discounted) -> identity fallback
        usable = total.squeeze(-1) > 0
        out = torch.where(usable[..., None], out, agent_state)
        if return_weights:
            return out, attn
        return out


class FusionRecurrentCell(nn.Module):
    """Recurrent cell with two side inputs feeding different gates.

    The social input ``s`` drives the input, candidate and forget gates, so
    interaction context shapes what enters the cell memory. The feedback
    input ``p`` (previous-step output distribution) drives the output gate
    and an additive update term, so the emitted state reacts to the last
    prediction without touching the memory. The additive term leaves the
    hidden state unbounded.
    """

    def __init__(self, d_model: int, social_dim: int, feedback_dim: int):
        super().__init__()
        self.d_model = d_model
        self.social_dim = social_dim
        self.feedback_dim = feedback_dim
        d = d_model
        self.w_hi = nn.Linear(d, d, bias=False)
        self.w_si = nn.Linear(social_dim, d, bias=False)
        self.b_i = nn.Parameter(torch.zeros(d))
        self.w_hg = nn.Linear(d, d, bias=False)
        self.w_sg = nn.Linear(social_dim, d, bias=False)
        self.b_g = nn.Parameter(torch.zeros(d))
        self.w_hf = nn.Linear(d, d, bias=False)
        self.w_sf = nn.Linear(social_dim, d, bias=False)
        self.b_f = nn.Parameter(torch.zeros(d))
        self.w_ho = nn.Linear(d, d, bias=False)
        self.w_po = nn.Linear(feedback_dim, d, bias=False)
        self.b_o = nn.Parameter(torch.zeros(d))
        self.w_hu = nn.Linear(d, d, bias=False)
        self.w_pu = nn.Linear(feedback_dim, d, bias=False)
        self.b_u = nn.Parameter(torch.zeros(d))

    def forward(self, hidden, cell, social, feedback):
        """All args (M, dim); returns (hidden', cell') with the same shapes."""
        i = torch.sigmoid(self.w_hi(hidden) + self.w_si(social) + self.b_i)
        g = torch.tanh(self.w_hg(hidden) + self.w_sg(social) + self.b_g)
        f = torch.sigmoid(self.w_hf(hidden) + self.w_sf(social) + self.b_f)
        cell_new = cell * f + i * g
        o = torch.sigmoid(self.w_ho(hidden) + self.w_po(feedback) + self.b_o)
        u = torch.tanh(self.w_hu(hidden) + self.w_pu(feedback) + self.b_u)
        hidden_new = torch.tanh(cell_new) * o + u
        return hidden_new, cell_new


@dataclass(eq=False)
class GaussianMixtureStep:
    """One prediction step: a mixture of diagonal gaussians over position and
    velocity with shared mode weights. Leading dims are arbitrary (batch and
    agent), mode dim is second to last."""

    mean_pos: torch.Tensor  # (..., I, 2)
    var_pos: torch.Tensor  # (..., I, 2)
    mean_vel: torch.Tensor  # (..., I, 2)
    var_vel: torch.Tensor  # (..., I, 2)
    weights: torch.Tensor  # (..., I)

    @property
    def n_modes(self) -> int:
        return self.weights.shape[-1]

    def feedback(self) -> torch.Tensor:
        """Flatten into the cell feedback vector, (..., I * 10).

        The shared weight appears once per distribution (position and
        velocity), giving ten numbers per mode.
        """
        w = self.weights[..., None]
        per_mode = torch.cat(
            [self.mean_pos, self.var_pos, self.mean_vel, self.var_vel, w, w], dim=-1
        )
        return per_mode.flatten(start_dim=-2)

    def detach(self) -> "GaussianMixtureStep":
        return GaussianMixtureStep(
            self.mean_pos.detach(), self.var_pos.detach(),
            self.mean_vel.detach(), self.var_vel.detach(), self.weights.detach(),
        )


def initial_mixture(last_pos, last_vel, n_modes: int) -> GaussianMixtureStep:
    """Degenerate mixture before the first prediction step: every mode sits
    at the last observed position with the last smoothed velocity, zero
    variance and uniform weight."""
    shape = last_pos.shape[:-1] + (n_modes, 2)
    mean_pos = last_pos[..., None, :].expand(shape)
    mean_vel = last_vel[..., None, :].expand(shape)
    zeros = torch.zeros(shape, dtype=last_pos.dtype, device=last_pos.device)
    weights = torch.full(shape[:-1], 1.0 / n_modes, dtype=last_pos.dtype, device=last_pos.device)
    return GaussianMixtureStep(mean_pos, zeros, mean_vel, zeros.clone(), weights)


class GmmHead(nn.Module):
    """Three fully connected layers regressing per-mode velocity gaussians
    and mode weights from a decoder state."""

    def __init__(self, d_model: int, n_modes: int):
        super().__init__()
        self.n_modes = n_modes
        self.fc1 = nn.Linear(d_model, d_model)
        self.fc2 = nn.Linear(d_model, d_model)
        self.fc3 = nn.Linear(d_model, n_modes * 5)

    def forward(self, state):
        """state: (..., d) -> (mean_vel (..., I, 2), var_vel (..., I, 2),
        weights (..., I))."""
        x = torch.relu(self.fc1(state))
        x = torch.relu(self.fc2(x))
        raw = self.fc3(x).unflatten(-1, (self.n_modes, 5))
        mean_vel = raw[..., 0:2]
        var_vel = torch.nn.functional.softplus(raw[..., 2:4]) + VAR_FLOOR
        weights = torch.softmax(raw[..., 4], dim=-1)
        return mean_vel, var_vel, weights


def integrate_step(prev: GaussianMixtureStep, mean_vel, var_vel, weights, dt: float) -> GaussianMixtureStep:
    """Advance positions by one step of the predicted velocities.

    Position means move by dt * velocity; position variances accumulate the
    velocity variance scaled by dt^2, keeping position uncertainty growing
    along the rollout.
    """
    mean_pos = prev.mean_pos + dt * mean_vel
    var_pos = prev.var_pos + dt * dt * var_vel
    return GaussianMixtureStep(mean_pos, var_pos, mean_vel, var_vel, weights)
