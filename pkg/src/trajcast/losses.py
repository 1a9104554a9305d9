"""Training losses: per-mode negative log likelihood of the joint
position/velocity gaussian, the mixture loss with optional per-mode scaling,
and the annealed endpoint-based winner-take-all scale."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .layers import GaussianMixtureStep

WTA_SHARPNESS = 20.0  # slope of the endpoint-distance scaling
WTA_THRESHOLD = 2.0  # metres; endpoint error at which the scale is 1

_WTA_MIN_EXPONENT = -80.0  # keeps hopeless modes nonzero in single precision

_LN_2PI = math.log(2.0 * math.pi)


def mode_nll(mixture: GaussianMixtureStep, target_pos, target_vel) -> torch.Tensor:
    """Negative log likelihood of the target under each mode.

    The observed vector is (x, y, vx, vy) with a diagonal covariance built
    from the position and velocity variances; the result is
    0.5 * (z - mu)^T Sigma^-1 (z - mu) + ln(2 pi sqrt(det Sigma)).

    mixture fields: (..., I, 2); targets: (..., 2) -> (..., I).
    """
    var = torch.cat([mixture.var_pos, mixture.var_vel], dim=-1)  # (..., I, 4)
    if not torch.all(var > 0):
        raise ValueError("mode_nll needs strictly positive variances")
    err_p = target_pos[..., None, :] - mixture.mean_pos
    err_v = target_vel[..., None, :] - mixture.mean_vel
    err = torch.cat([err_p, err_v], dim=-1)
    quad = 0.5 * (err * err / var).sum(dim=-1)
    log_norm = _LN_2PI + 0.5 * torch.log(var).sum(dim=-1)
    return quad + log_norm


def wta_weights(endpoints, target_endpoint, alpha: float,
                sharpness: float = WTA_SHARPNESS,
                threshold: float = WTA_THRESHOLD) -> torch.Tensor:
    """Per-mode loss scale exp(sharpness * (1 - alpha) * (threshold - D)).

    D is the endpoint distance of the mode. alpha=1 disables the scaling;
    as alpha anneals toward 0 the scale concentrates the loss on modes whose
    endpoint lands within ``threshold`` of the target. The result carries no
    gradient. The exponent is floored so that a scene where every mode is far
    off target still produces a finite mixture log instead of underflowing.

    endpoints: (..., I, 2); target_endpoint: (..., 2) -> (..., I).
    """
    d = torch.linalg.norm(endpoints.detach() - target_endpoint[..., None, :], dim=-1)
    exponent = sharpness * (1.0 - alpha) * (threshold - d)
    return torch.exp(exponent.clamp_min(_WTA_MIN_EXPONENT))


def mixture_loss(
    mixture: GaussianMixtureStep,
    target_pos,
    target_vel,
    valid=None,
    mode_scale=None,
) -> torch.Tensor:
    """Mean negative log of the scaled mixture likelihood.

    Per element the loss is -ln sum_i w_i * a_i * exp(-NLL_i), computed as a
    log-sum-exp; the scales a_i are used as given, without renormalizing the
    products w_i * a_i.

    mixture: leading dims (B, N, T); mode_scale: (B, N, I) broadcast over
    time; valid: (B, N, T) bool selecting supervised elements.
    """
    nll = mode_nll(mixture, target_pos, target_vel)  # (B, N, T, I)
    log_term = torch.log(mixture.weights) - nll
    if mode_scale is not None:
        log_term = log_term + torch.log(mode_scale)[..., None, :]
    loss = -torch.logsumexp(log_term, dim=-1)  # (B, N, T)
    if valid is None:
        return loss.mean()
    count = valid.sum()
    if count == 0:
        return loss.sum() * 0.0
    return (loss * valid.to(loss.dtype)).sum() / count.to(loss.dtype)


@dataclass(frozen=True)
class WtaSchedule:
    """Linear annealing of alpha from 1 toward 0 over training.

    Epochs are 0-based: alpha(0) = 1, alpha(e) = 1 - e / total_epochs. With
    ``enabled`` False the schedule pins alpha to 1.
    """

    total_epochs: int
    enabled: bool = True

    def alpha(self, epoch: int) -> float:
        if not self.enabled:
            return 1.0
        if self.total_epochs <= 0:
            return 1.0
        return max(0.0, 1.0 - epoch / self.total_epochs)
