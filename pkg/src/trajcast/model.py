"""The recurrent encoder-decoder forecaster.

An observation encoder (temporal convolutions, an LSTM, social attention)
produces per-agent embeddings; a map encoder embeds lane polylines; the
decoder rolls a fusion cell forward, refreshing agent states from the map on
a fixed cadence, exchanging social context every step, and emitting a
gaussian mixture over velocities that an integrator turns into positions.

Three sub-networks share these parameters: the full decoder, a social-only
path that skips the map, and a map-only path that starts from an embedded
position and skips both the observation encoder and social exchange.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .features import SceneBatch
from .layers import (
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

VARIANTS = ("full", "social_only", "map_only")
MAP_STAGES = ("decoder", "encoder")

_MIN_HEADING_SPEED = 0.1  # m/s; below this the rollout keeps its old heading


class CheckpointError(RuntimeError):
    """Raised when a checkpoint cannot be restored into a model."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 8
    n_modes: int = 6
    n_obs: int = 20
    n_pred: int = 30
    dt: float = 0.1
    map_every_n: int = 10
    lane_points: int = 10
    map_radius: float = 50.0
    use_social: bool = True
    map_stage: str | None = "decoder"
    decay_length: float = 10.0
    misalignment_gain: float = 5.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.map_stage is not None and self.map_stage not in MAP_STAGES:
            raise ValueError(f"map_stage must be one of {MAP_STAGES} or None")
        if self.n_modes < 1 or self.n_pred < 1 or self.n_obs < 1:
            raise ValueError("n_modes, n_obs and n_pred must be positive")
        if self.map_stage == "decoder":
            # the refresh cadence is pinned to one second of rollout
            if abs(self.map_every_n * self.dt - 1.0) > 1e-9:
                raise ValueError(
                    f"map_every_n * dt must equal 1.0, got "
                    f"{self.map_every_n} * {self.dt} = {self.map_every_n * self.dt}"
                )

    @property
    def feedback_dim(self) -> int:
        return self.n_modes * 10


class AgentEncoder(nn.Module):
    """Observed-track encoder: temporal convolutions, an LSTM over the
    observation window, then one round of social attention across agents.

    With ``use_social`` off the attention pass is skipped entirely, so each
    agent is encoded from its own track alone.
    """

    def __init__(self, cfg: ModelConfig, n_features: int = 8):
        super().__init__()
        d = cfg.d_model
        self.use_social = cfg.use_social
        self.conv1 = nn.Conv1d(n_features, d, 3, padding=1)
        self.conv2 = nn.Conv1d(d, d, 3, padding=1)
        self.lstm = nn.LSTM(d, d, batch_first=True)
        self.social = MultiHeadAttention(d, cfg.n_heads)

    def forward(self, features, agent_mask):
        """features: (B, N, T, F); agent_mask: (B, N) -> (B, N, d)."""
        b, n, t, f = features.shape
        x = features.reshape(b * n, t, f).transpose(1, 2)
        x = torch.relu(self.conv1(x))
        x = torch.relu(self.conv2(x))
        x = x.transpose(1, 2)  # (B*N, T, d)
        _, (h_last, _) = self.lstm(x)
        emb = h_last[-1].view(b, n, -1)
        if not self.use_social:
            return emb
        return self.social(emb, emb, emb, key_mask=agent_mask)


class MapEncoder(nn.Module):
    """Lane embeddings refined by attention across lanes of the scene."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.polylines = PolylineEncoder(cfg.d_model)
        self.lane_to_lane = MultiHeadAttention(cfg.d_model, cfg.n_heads)

    def forward(self, lane_points, lane_tangents, lane_mask):
        emb = self.polylines(lane_points, lane_tangents)
        return self.lane_to_lane(emb, emb, emb, key_mask=lane_mask)


class RecurrentForecaster(nn.Module):
    """Full forecaster; ``forward`` picks one of the shared sub-networks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.encoder = AgentEncoder(cfg)
        self.map_encoder = MapEncoder(cfg)
        self.agent_to_lane = AgentToLaneAttention(d)
        self.cell = FusionRecurrentCell(d, social_dim=d, feedback_dim=cfg.feedback_dim)
        self.decoder_social = MultiHeadAttention(d, cfg.n_heads)
        self.gmm_head = GmmHead(d, cfg.n_modes)
        self.pos_embed = nn.Linear(2, d)  # map-only start state from a position

    def _lane_context(self, batch: SceneBatch):
        if self.cfg.map_stage is None:
            return None
        return self.map_encoder(batch.lane_points, batch.lane_tangents, batch.lane_mask)

    def _refresh_from_map(self, hidden, batch, lane_emb, pos, heading):
        disc = lane_alignment_discount(
            pos, heading, batch.lane_points, batch.lane_tangents, batch.lane_mask,
            self.cfg.decay_length, self.cfg.misalignment_gain,
        )
        return self.agent_to_lane(hidden, lane_emb, disc, batch.lane_mask)

    def _rollout(
        self, batch: SceneBatch, h0, lane_emb, use_social: bool,
        map_cadence: bool, n_steps: int,
    ) -> GaussianMixtureStep:
        cfg = self.cfg
        hidden = h0
        memory = h0
        social = torch.zeros_like(h0)
        mixture = initial_mixture(batch.last_pos, batch.last_vel, cfg.n_modes)
        pos = batch.last_pos
        heading = batch.heading
        steps: list[GaussianMixtureStep] = []
        for t in range(n_steps):
            if map_cadence and lane_emb is not None and t % cfg.map_every_n == 0:
                hidden = self._refresh_from_map(hidden, batch, lane_emb, pos, heading)
            hidden, memory = self.cell(hidden, memory, social, mixture.feedback())
            if use_social:
                social = self.decoder_social(
                    hidden, hidden, hidden, key_mask=batch.agent_mask
                )
                head_in = social
            else:
                head_in = hidden
            mean_vel, var_vel, weights = self.gmm_head(head_in)
            mixture = integrate_step(mixture, mean_vel, var_vel, weights, cfg.dt)
            steps.append(mixture)
            vel_mean = (weights[..., None] * mean_vel).sum(dim=-2)
            pos = (weights[..., None] * mixture.mean_pos).sum(dim=-2)
            speed = torch.linalg.norm(vel_mean, dim=-1, keepdim=True)
            heading = torch.where(
                speed > _MIN_HEADING_SPEED, vel_mean / speed.clamp_min(1e-12), heading
            )
        return _stack_steps(steps)

    def forward(
        self, batch: SceneBatch, variant: str = "full", n_steps: int | None = None
    ) -> GaussianMixtureStep:
        """Run one sub-network over a batch.

        Returns a mixture with leading dims (B, N, n_steps); only entries
        where agent_mask holds are meaningful.
        """
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        cfg = self.cfg
        n_steps = cfg.n_pred if n_steps is None else n_steps

        if variant == "map_only":
            h0 = self.pos_embed(batch.last_pos)
            lane_emb = self._lane_context(batch)
            if cfg.map_stage == "encoder" and lane_emb is not None:
                h0 = self._refresh_from_map(h0, batch, lane_emb, batch.last_pos, batch.heading)
                lane_emb = None
            return self._rollout(
                batch, h0, lane_emb, use_social=False,
                map_cadence=cfg.map_stage == "decoder", n_steps=n_steps,
            )

        h0 = self.encoder(batch.features, batch.agent_mask)
        use_social = cfg.use_social
        if variant == "social_only":
            return self._rollout(
                batch, h0, None, use_social=use_social, map_cadence=False, n_steps=n_steps
            )

        lane_emb = self._lane_context(batch)
        if cfg.map_stage == "encoder" and lane_emb is not None:
            h0 = self._refresh_from_map(h0, batch, lane_emb, batch.last_pos, batch.heading)
            lane_emb = None
        return self._rollout(
            batch, h0, lane_emb, use_social=use_social,
            map_cadence=cfg.map_stage == "decoder", n_steps=n_steps,
        )


def _stack_steps(steps: list[GaussianMixtureStep]) -> GaussianMixtureStep:
    """Stack per-step mixtures into one with a time axis at dim 2."""
    return GaussianMixtureStep(
        mean_pos=torch.stack([s.mean_pos for s in steps], dim=2),
        var_pos=torch.stack([s.var_pos for s in steps], dim=2),
        mean_vel=torch.stack([s.mean_vel for s in steps], dim=2),
        var_vel=torch.stack([s.var_vel for s in steps], dim=2),
        weights=torch.stack([s.weights for s in steps], dim=2),
    )


@dataclass(eq=False)
class PredictionSet:
    """Discrete multi-modal forecasts for the anchor agent of each scene,
    sorted by descending mode probability."""

    scene_ids: list[str]
    trajectories: np.ndarray  # (B, I, T, 2)
    probabilities: np.ndarray  # (B, I)
    var_pos: np.ndarray  # (B, I, T, 2)


def predict(model: RecurrentForecaster, batch: SceneBatch, variant: str = "full") -> PredictionSet:
    """Forecast a batch and extract per-mode anchor trajectories.

    Mode probability is the rollout-averaged mixture weight of the mode.
    """
    model.eval()
    with torch.no_grad():
        mix = model(batch, variant=variant)
    b = batch.n_scenes
    idx = batch.anchor_index
    rows = torch.arange(b)
    mean_pos = mix.mean_pos[rows, idx].double().numpy()  # (B, T, I, 2)
    var_pos = mix.var_pos[rows, idx].double().numpy()
    weights = mix.weights[rows, idx].double().numpy()  # (B, T, I)

    probs = weights.mean(axis=1)  # (B, I)
    probs = probs / probs.sum(axis=1, keepdims=True)
    order = np.argsort(-probs, axis=1)
    traj = np.transpose(mean_pos, (0, 2, 1, 3))  # (B, I, T, 2)
    var = np.transpose(var_pos, (0, 2, 1, 3))
    b_idx = np.arange(b)[:, None]
    return PredictionSet(
        scene_ids=list(batch.scene_ids),
        trajectories=traj[b_idx, order],
        probabilities=probs[b_idx, order],
        var_pos=var[b_idx, order],
    )


def save_checkpoint(model: RecurrentForecaster, path, extra: dict | None = None) -> None:
    payload = {
        "version": 1,
        "config": asdict(model.cfg),
        "state_dict": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path, config: ModelConfig | None = None) -> RecurrentForecaster:
    """Restore a model; a provided config must match the stored one."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "config" not in payload or "state_dict" not in payload:
        raise CheckpointError(f"{path} is not a model checkpoint")
    version = payload.get("version")
    if version != 1:
        raise CheckpointError(f"unsupported checkpoint version {version!r}")
    stored = ModelConfig(**payload["config"])
    if config is not None and config != stored:
        diffs = [
            k for k in asdict(stored)
            if getattr(stored, k) != getattr(config, k)
        ]
        raise CheckpointError(
            f"checkpoint config does not match requested config (differs in: {', '.join(diffs)})"
        )
    model = RecurrentForecaster(stored)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint tensors do not fit the model: {exc}") from exc
    return model
