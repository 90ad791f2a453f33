"""Stage-agnostic denoising-diffusion machinery.

Steps are 1-indexed: n in [1, N].  The forward process draws
x_n = sqrt(abar_n) x0 + sqrt(1 - abar_n) eps; training minimises the mean
squared error between eps and the denoiser's prediction (optionally with a
per-position emphasis on event cells); sampling runs either the ancestral
recursion or the eta-parameterised deterministic skip-step recursion:

    x_prev = sqrt(abar_prev) * x0_hat
           + sqrt(1 - abar_prev - sigma^2) * eps_hat + sigma * z,
    sigma  = eta * sqrt((1-abar_prev)/(1-abar_cur))
                 * sqrt(1 - abar_cur/abar_prev),

which reduces to a pure function of the initial noise at eta = 0 and to the
ancestral sampler at eta = 1 with a full step grid.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

Denoiser = Callable[..., torch.Tensor]  # (x, n, condition) -> eps_hat


@dataclass
class DiffusionSchedule:
    """Variance schedule: betas strictly in (0, 1), alpha_bars decreasing."""

    betas: np.ndarray
    kind: str = "cosine"
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie strictly in (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, n: int) -> float:
        """Cumulative product at step n (1-indexed); alpha_bar(0) = 1."""
        return 1.0 if n == 0 else float(self.alpha_bars[n - 1])

    @classmethod
    def cosine(cls, n_steps: int = 1000, s: float = 0.008,
               max_beta: float = 0.999) -> "DiffusionSchedule":
        def f(t):
            return math.cos((t / n_steps + s) / (1 + s) * math.pi / 2) ** 2

        betas = np.array([
            min(1 - f(n) / f(n - 1), max_beta) for n in range(1, n_steps + 1)
        ])
        return cls(betas=np.clip(betas, 1e-8, max_beta), kind="cosine")

    @classmethod
    def linear(cls, n_steps: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "DiffusionSchedule":
        return cls(betas=np.linspace(beta_start, beta_end, n_steps), kind="linear")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        return cls(betas=np.array(d["betas"]), kind=d["kind"])


@dataclass
class SamplerConfig:
    kind: str = "ddim"  # "ddim" | "ddpm"
    ddim_steps: int = 50
    eta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler kind: {self.kind!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")


def _gather(values: np.ndarray, n, x: torch.Tensor) -> torch.Tensor:
    """Per-sample scalar (indexed 1..N) broadcast to x's shape."""
    if isinstance(n, int):
        return torch.as_tensor(values[n - 1], dtype=x.dtype, device=x.device)
    idx = torch.as_tensor(n, dtype=torch.long, device=x.device) - 1
    out = torch.as_tensor(values, dtype=x.dtype, device=x.device)[idx]
    return out.reshape(-1, *([1] * (x.ndim - 1)))


def forward_noise(schedule: DiffusionSchedule, x0: torch.Tensor, n,
                  eps: torch.Tensor) -> torch.Tensor:
    """x_n = sqrt(abar_n) x0 + sqrt(1 - abar_n) eps."""
    _check_step(schedule, n)
    abar = _gather(schedule.alpha_bars, n, x0)
    return abar.sqrt() * x0 + (1 - abar).sqrt() * eps


def predict_x0(schedule: DiffusionSchedule, x_n: torch.Tensor, n,
               eps: torch.Tensor) -> torch.Tensor:
    """Invert forward_noise given the exact noise."""
    abar = _gather(schedule.alpha_bars, n, x_n)
    return (x_n - (1 - abar).sqrt() * eps) / abar.sqrt()


def eps_loss(schedule: DiffusionSchedule, denoiser: Denoiser, x0: torch.Tensor,
             n, eps: torch.Tensor, condition: Optional[torch.Tensor] = None,
             weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean squared error between eps and the denoiser's prediction.

    `weights` is an optional per-position multiplier (broadcast over
    channels) applied to the squared residual before averaging.
    """
    x_n = forward_noise(schedule, x0, n, eps)
    pred = denoiser(x_n, n, condition) if condition is not None else denoiser(x_n, n)
    if pred.shape != eps.shape:
        raise ValueError(f"denoiser output shape {tuple(pred.shape)} != eps {tuple(eps.shape)}")
    sq = (pred - eps) ** 2
    if weights is not None:
        sq = sq * weights.to(sq.dtype).unsqueeze(-2)  # (B, 1, L) over channels
    return sq.mean()


def ddpm_step(schedule: DiffusionSchedule, denoiser: Denoiser, x_n: torch.Tensor,
              n: int, condition: Optional[torch.Tensor] = None,
              generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """One ancestral step x_n -> x_{n-1}; the noise term is zero at n = 1."""
    _check_step(schedule, n)
    eps_hat = denoiser(x_n, n, condition) if condition is not None else denoiser(x_n, n)
    beta = schedule.betas[n - 1]
    alpha = schedule.alphas[n - 1]
    abar = schedule.alpha_bars[n - 1]
    mean = (x_n - beta / math.sqrt(1 - abar) * eps_hat) / math.sqrt(alpha)
    if n == 1:
        return mean
    abar_prev = schedule.alpha_bar(n - 1)
    var = (1 - abar_prev) / (1 - abar) * beta
    z = torch.randn(x_n.shape, generator=generator, device=x_n.device, dtype=x_n.dtype)
    return mean + math.sqrt(var) * z


def ddpm_sample(schedule: DiffusionSchedule, denoiser: Denoiser, shape,
                condition: Optional[torch.Tensor] = None,
                generator: Optional[torch.Generator] = None,
                initial_noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    x = initial_noise if initial_noise is not None else torch.randn(shape, generator=generator)
    for n in range(schedule.n_steps, 0, -1):
        x = ddpm_step(schedule, denoiser, x, n, condition, generator)
    return x


def ddim_steps(n_steps: int, count: int) -> list[int]:
    """Strictly increasing step grid 0 = tau_0 < ... < tau_count = N."""
    taus = np.unique(np.round(np.linspace(0, n_steps, count + 1)).astype(int))
    return taus.tolist()


def ddim_sample(schedule: DiffusionSchedule, denoiser: Denoiser, shape,
                cfg: SamplerConfig, condition: Optional[torch.Tensor] = None,
                generator: Optional[torch.Generator] = None,
                initial_noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Skip-step sampler; bit-deterministic in the initial noise at eta = 0."""
    if cfg.ddim_steps > schedule.n_steps:
        raise ValueError("ddim_steps cannot exceed the schedule length")
    x = initial_noise if initial_noise is not None else torch.randn(shape, generator=generator)
    taus = ddim_steps(schedule.n_steps, cfg.ddim_steps)
    for i in range(len(taus) - 1, 0, -1):
        cur, prev = taus[i], taus[i - 1]
        abar_cur = schedule.alpha_bar(cur)
        abar_prev = schedule.alpha_bar(prev)
        eps_hat = denoiser(x, cur, condition) if condition is not None else denoiser(x, cur)
        x0_hat = (x - math.sqrt(1 - abar_cur) * eps_hat) / math.sqrt(abar_cur)
        sigma = cfg.eta * math.sqrt((1 - abar_prev) / (1 - abar_cur)) \
            * math.sqrt(1 - abar_cur / abar_prev)
        coeff = math.sqrt(max(1 - abar_prev - sigma ** 2, 0.0))
        x = math.sqrt(abar_prev) * x0_hat + coeff * eps_hat
        if sigma > 0:
            z = torch.randn(x.shape, generator=generator, device=x.device, dtype=x.dtype)
            x = x + sigma * z
    return x


def _check_step(schedule: DiffusionSchedule, n) -> None:
    lo = int(n) if isinstance(n, int) else int(torch.as_tensor(n).min())
    hi = int(n) if isinstance(n, int) else int(torch.as_tensor(n).max())
    if lo < 1 or hi > schedule.n_steps:
        raise ValueError(f"diffusion step out of range [1, {schedule.n_steps}]")


# --- event-emphasis loss weighting ----------------------------------------

@dataclass
class EventEmphasis:
    """Per-position loss weights emphasising mask-active cells.

    w_j = base + ramp(progress) * blur(mask)_j, then rescaled per sequence to
    mean 1.  The blur kernel is Gaussian-shaped with value `neighbor` one
    cell from the peak (k(d) = neighbor ** d^2, |d| <= radius); the peak
    weight cosine-ramps from 0 to `peak` over the first `warmup_frac` of
    training.
    """

    base: float = 0.15
    peak: float = 6.0
    neighbor: float = 0.6
    radius: int = 2
    warmup_frac: float = 0.15

    def ramp(self, progress: float) -> float:
        if self.warmup_frac <= 0:
            return self.peak
        u = min(max(progress / self.warmup_frac, 0.0), 1.0)
        return self.peak * 0.5 * (1 - math.cos(math.pi * u))

    def kernel(self) -> np.ndarray:
        d = np.arange(-self.radius, self.radius + 1)
        return self.neighbor ** (d.astype(float) ** 2)

    def weights(self, mask01: torch.Tensor, progress: float) -> torch.Tensor:
        """mask01: (B, L) binary event mask -> (B, L) weights with mean 1."""
        k = torch.as_tensor(self.kernel(), dtype=mask01.dtype, device=mask01.device)
        blurred = torch.nn.functional.conv1d(
            mask01.unsqueeze(1), k.view(1, 1, -1), padding=self.radius
        ).squeeze(1)
        w = self.base + self.ramp(progress) * blurred
        return w / w.mean(dim=-1, keepdim=True)


# --- EMA of denoiser weights -----------------------------------------------

class EMA:
    """Exponential moving average of a module's parameters and buffers."""

    def __init__(self, model: torch.nn.Module, decay: float = 0.999):
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")
        self.decay = decay
        self.shadow = {
            k: v.detach().clone() for k, v in model.state_dict().items()
        }

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        for k, v in model.state_dict().items():
            if self.shadow[k].shape != v.shape:
                raise ValueError(f"parameter shape changed for {k}")
            if v.dtype.is_floating_point:
                self.shadow[k].mul_(self.decay).add_(v.detach(), alpha=1 - self.decay)
            else:
                self.shadow[k].copy_(v)

    def state_dict(self) -> dict:
        return {k: v.clone() for k, v in self.shadow.items()}

    def copy_to(self, model: torch.nn.Module) -> None:
        model.load_state_dict(self.shadow)


def ema_update(shadow: torch.Tensor, live: torch.Tensor, decay: float) -> torch.Tensor:
    """shadow' = decay * shadow + (1 - decay) * live (elementwise)."""
    if shadow.shape != live.shape:
        raise ValueError("shadow/live shape mismatch")
    return decay * shadow + (1 - decay) * live


# --- checkpoint archive ------------------------------------------------------

CHECKPOINT_VERSION = 1


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()
    ).hexdigest()[:16]


def save_checkpoint(path, *, model_state: dict, ema_state: dict,
                    schedule: DiffusionSchedule, config: dict,
                    extra: Optional[dict] = None) -> None:
    """Single archive: weights, EMA weights, schedule, config hash.

    Written atomically (temp file + rename).
    """
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": config,
        "config_hash": config_hash(config),
        "schedule": schedule.to_dict(),
        "model_state": model_state,
        "ema_state": ema_state,
        "extra": extra or {},
    }
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            torch.save(payload, f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {version}")
    payload["schedule"] = DiffusionSchedule.from_dict(payload["schedule"])
    return payload
