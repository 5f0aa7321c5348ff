"""Accelerated half-quadratic-splitting scaffold.

The reconstruction alternates a closed-form data-fidelity solve against the
learned continuous-spectrum prior, with a momentum step between stages.
Because the Gram operator of the sensing map is diagonal, the quadratic
subproblem

    x = argmin 0.5 ||y - Phi x||^2 + (mu/2) ||x - z_hat||^2

has the exact solution

    x = z_hat + Phi^T ((y - Phi z_hat) / (mu + diag(Phi Phi^T)))

which is what ``data_step`` computes.  All per-stage scalars are stored in
raw form and mapped through softplus / sigmoid so the optimizer can never
push them out of their valid ranges.
"""

from __future__ import annotations

import logging
import math

import torch
from torch import nn
import torch.nn.functional as F

from .sensing import SensingOperator

logger = logging.getLogger(__name__)

INIT_EPS = 1e-6


def inverse_softplus(value: float) -> float:
    return math.log(math.expm1(value))


def init_estimate(op: SensingOperator, y: torch.Tensor) -> torch.Tensor:
    """Shift-back initialization: adjoint of the Gram-normalized measurement."""
    diag = op.normal_diag_t(dtype=y.dtype).to(y.device)
    return op.adjoint_t(y / torch.clamp(diag, min=INIT_EPS))


def data_step(op: SensingOperator, y: torch.Tensor, z_hat: torch.Tensor, mu) -> torch.Tensor:
    """Closed-form data-fidelity update via the diagonal Gram inverse."""
    mu_val = float(mu) if not torch.is_tensor(mu) else float(mu.detach())
    if mu_val <= 0:
        raise ValueError(f"data_step requires mu > 0, got {mu_val}")
    diag = op.normal_diag_t(dtype=y.dtype).to(y.device)
    residual = y - op.forward_t(z_hat)
    return z_hat + op.adjoint_t(residual / (mu + diag))


def accelerate(z_new: torch.Tensor, z_old: torch.Tensor, beta) -> torch.Tensor:
    """Momentum extrapolation z_new + beta * (z_new - z_old)."""
    if z_new.shape != z_old.shape:
        raise ValueError(f"accelerate shape mismatch: {tuple(z_new.shape)} vs {tuple(z_old.shape)}")
    return z_new + beta * (z_new - z_old)


class StageScalars(nn.Module):
    """Per-stage learnable scalars in raw (unconstrained) form.

    Effective values: mu = softplus(mu_raw) > 0, eta = softplus(eta_raw) > 0,
    beta = sigmoid(beta_raw) in (0, 1).
    """

    def __init__(self, n_stages: int, mu0: float = 1e-2, beta0: float = 0.5, eta0: float = 0.1):
        super().__init__()
        if n_stages < 1:
            raise ValueError(f"need at least one stage, got {n_stages}")
        self.n_stages = n_stages
        self.mu_raw = nn.Parameter(torch.full((n_stages,), inverse_softplus(mu0)))
        self.beta_raw = nn.Parameter(torch.full((n_stages,), _logit(beta0)))
        self.eta_raw = nn.Parameter(torch.full((n_stages,), inverse_softplus(eta0)))

    def mu(self, k: int) -> torch.Tensor:
        return F.softplus(self.mu_raw[k])

    def beta(self, k: int) -> torch.Tensor:
        return torch.sigmoid(self.beta_raw[k])

    def eta(self, k: int) -> torch.Tensor:
        return F.softplus(self.eta_raw[k])


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


class IdentityPrior(nn.Module):
    """Pass-through prior used by tests and degenerate configurations."""

    def apply(self, x: torch.Tensor, eta, queries, sensed=None) -> torch.Tensor:
        return x


def _check_finite(t: torch.Tensor, stage: int, name: str) -> None:
    if not torch.isfinite(t).all():
        raise FloatingPointError(
            f"non-finite values in '{name}' at unfolding stage {stage}"
        )


class UnfoldedReconstructor(nn.Module):
    """K-stage alternation of data step, learned prior, and momentum step.

    ``prior`` must expose ``apply(x, eta, queries, sensed) -> planes`` where
    ``x`` is a band-first estimate ``[..., N, H, W]``, ``queries`` selects
    the planes to synthesize and ``sensed`` names the wavelengths of ``x``'s
    bands.  The final stage's prior also renders ``query_wavelengths``.
    """

    def __init__(self, prior: nn.Module, n_stages: int, mu0: float = 1e-2,
                 beta0: float = 0.5, eta0: float = 0.1):
        super().__init__()
        self.prior = prior
        self.scalars = StageScalars(n_stages, mu0=mu0, beta0=beta0, eta0=eta0)

    @property
    def n_stages(self) -> int:
        return self.scalars.n_stages

    def forward(self, op: SensingOperator, y: torch.Tensor, query_wavelengths=None):
        """Run all stages; return (reconstruction at sensed bands, rendering).

        The rendering entry is ``None`` when no query wavelengths are given.
        On the final stage the prior is evaluated once over the sensed and
        query wavelengths together, so both outputs share the same latent
        feature.
        """
        sensed = op.sensed_wavelengths.tolist()
        queries = list(query_wavelengths) if query_wavelengths is not None else []
        z_hat = init_estimate(op, y)
        z_prev = z_hat
        _check_finite(z_hat, 0, "init")
        rendered = None
        for k in range(self.n_stages):
            mu_k = self.scalars.mu(k)
            x = data_step(op, y, z_hat, mu_k)
            _check_finite(x, k + 1, "data step")
            last = k == self.n_stages - 1
            if last and queries:
                planes = self.prior.apply(x, self.scalars.eta(k), sensed + queries, sensed)
                z = planes[..., : len(sensed), :, :]
                rendered = planes[..., len(sensed) :, :, :]
            else:
                z = self.prior.apply(x, self.scalars.eta(k), sensed, sensed)
            _check_finite(z, k + 1, "prior")
            z_hat = accelerate(z, z_prev, self.scalars.beta(k))
            _check_finite(z_hat, k + 1, "momentum")
            if logger.isEnabledFor(logging.DEBUG):
                with torch.no_grad():
                    res = torch.linalg.vector_norm(y - op.forward_t(x)).item()
                logger.debug(
                    "stage=%d residual=%.6e mu=%.4e beta=%.4f eta=%.4e",
                    k + 1, res, mu_k.detach().item(),
                    self.scalars.beta(k).detach().item(),
                    self.scalars.eta(k).detach().item(),
                )
            z_prev = z
        if rendered is not None:
            _check_finite(rendered, self.n_stages, "rendering")
        return z_prev, rendered
