"""Preconditioned conditional denoiser for scalar outcomes.

The denoiser D(y_t; sigma, x, z) predicts the clean outcome from a noised
one under the affine preconditioning

    D = c_skip(sigma) * y_t + c_out(sigma) * net([c_in(sigma)*y_t, ln sigma, x, z])

with the rho-parameterized noise ladder sigma(t) spanning
[sigma_min, sigma_max] over t in [0, 1]. Pretraining regresses D onto the
clean outcome under log-normal noise levels; sampling runs a deterministic
2nd-order Heun integration of the probability-flow update down the ladder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .data import Dataset, StandardizationStats
from .nn import AdamState, Mlp, MlpGrads, adam_step, mlp_backward, mlp_forward

__all__ = [
    "NoiseSchedule",
    "Denoiser",
    "PretrainConfig",
    "TrainingDivergedError",
    "sigma_of_t",
    "precondition_coeffs",
    "denoise",
    "sample_training_sigma",
    "edm_loss_weight",
    "pretrain",
    "sampler_sigmas",
    "sample_reverse",
    "save_denoiser",
    "load_denoiser",
]


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss; diagnostics are in the message."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Noise-level schedule and pretraining sigma-sampling parameters."""

    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    sigma_data: float = 0.5
    t_max: float = 1000.0
    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.rho <= 0 or self.sigma_data <= 0:
            raise ValueError("rho and sigma_data must be positive")
        if not 0.0 < self.t_max <= 1000.0:
            raise ValueError("t_max must lie in (0, 1000]")

    def to_dict(self) -> dict:
        return {
            "sigma_min": self.sigma_min, "sigma_max": self.sigma_max, "rho": self.rho,
            "sigma_data": self.sigma_data, "t_max": self.t_max,
            "p_mean": self.p_mean, "p_std": self.p_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(**d)


def sigma_of_t(schedule: NoiseSchedule, t):
    """Noise level at schedule position t in [0, 1] (t=0 -> sigma_min, t=1 -> sigma_max)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    inv_rho = 1.0 / schedule.rho
    hi = schedule.sigma_max ** inv_rho
    lo = schedule.sigma_min ** inv_rho
    sig = (hi + (1.0 - t) * (lo - hi)) ** schedule.rho
    return float(sig) if sig.ndim == 0 else sig


def precondition_coeffs(schedule: NoiseSchedule, sigma):
    """(c_skip, c_out, c_in, c_noise) at the given noise level(s)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise ValueError("sigma must be positive")
    sd2 = schedule.sigma_data ** 2
    denom = np.sqrt(sigma ** 2 + sd2)
    c_skip = sd2 / (sigma ** 2 + sd2)
    c_out = sigma * schedule.sigma_data / denom
    c_in = 1.0 / denom
    c_noise = np.log(sigma)
    return c_skip, c_out, c_in, c_noise


def sample_training_sigma(schedule: NoiseSchedule, rng: np.random.Generator, size=None):
    """Log-normal noise level: ln sigma ~ N(p_mean, p_std^2)."""
    return np.exp(schedule.p_mean + schedule.p_std * rng.standard_normal(size))


def edm_loss_weight(schedule: NoiseSchedule, sigma):
    """Loss weight lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma*sigma_data)^2."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma ** 2 + schedule.sigma_data ** 2) / (sigma * schedule.sigma_data) ** 2


class Denoiser:
    """Preconditioned MLP denoiser conditioned on covariates and treatment.

    Input layout of the wrapped net: [c_in*y_t, c_noise, x_1..x_d, z],
    so the first layer width must be covariate_dim + 3.
    """

    def __init__(self, net: Mlp, schedule: NoiseSchedule, covariate_dim: int,
                 stats: StandardizationStats | None = None):
        if net.widths[0] != covariate_dim + 3:
            raise ValueError(
                f"net input width {net.widths[0]} != covariate_dim + 3 = {covariate_dim + 3}")
        if net.widths[-1] != 1:
            raise ValueError("denoiser net must have a scalar output")
        self.net = net
        self.schedule = schedule
        self.covariate_dim = covariate_dim
        self.stats = stats

    def copy(self) -> "Denoiser":
        return Denoiser(self.net.copy(), self.schedule, self.covariate_dim, self.stats)

    @classmethod
    def create(cls, covariate_dim: int, hidden=(128, 128, 128),
               schedule: NoiseSchedule | None = None, seed: int = 0,
               stats: StandardizationStats | None = None) -> "Denoiser":
        schedule = schedule or NoiseSchedule()
        widths = [covariate_dim + 3, *hidden, 1]
        net = Mlp(widths, activation="silu", rng=np.random.default_rng(seed))
        return cls(net, schedule, covariate_dim, stats)


def _conditioning(den: Denoiser, y_t, sigma, x, z):
    """Assemble the net input matrix and the per-row coefficients."""
    y_t = np.atleast_1d(np.asarray(y_t, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None] if den.covariate_dim == 1 else x[None, :]
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    n = y_t.shape[0]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
    if x.shape != (n, den.covariate_dim) or z.shape != (n,):
        raise ValueError(
            f"conditioning shapes mismatch: y_t {y_t.shape}, x {x.shape}, z {z.shape}")
    c_skip, c_out, c_in, c_noise = precondition_coeffs(den.schedule, sigma)
    inp = np.concatenate([(c_in * y_t)[:, None], c_noise[:, None], x, z[:, None]], axis=1)
    return inp, y_t, (c_skip, c_out, c_in)


def denoise_with_cache(den: Denoiser, y_t, sigma, x, z):
    inp, y_t, coeffs = _conditioning(den, y_t, sigma, x, z)
    raw, net_cache = mlp_forward(den.net, inp)
    c_skip, c_out, _ = coeffs
    out = c_skip * y_t + c_out * raw[:, 0]
    return out, (net_cache, coeffs)


def denoise(den: Denoiser, y_t, sigma, x, z):
    """Estimate the clean outcome from y_t at noise level sigma, given (x, z)."""
    scalar = np.ndim(y_t) == 0
    out, _ = denoise_with_cache(den, y_t, sigma, x, z)
    return float(out[0]) if scalar else out


def denoise_backward(den: Denoiser, cache, d_out: np.ndarray) -> tuple[MlpGrads, np.ndarray]:
    """Gradients of sum(d_out * D) w.r.t. net parameters and y_t.

    ``d_out`` is the per-row gradient of a scalar loss w.r.t. the denoiser
    output. Returns (parameter grads summed over rows, per-row dL/dy_t).
    """
    net_cache, (c_skip, c_out, c_in) = cache
    d_out = np.asarray(d_out, dtype=np.float64)
    grads, d_inp = mlp_backward(den.net, net_cache, (d_out * c_out)[:, None])
    d_yt = d_out * c_skip + d_inp[:, 0] * c_in
    return grads, d_yt


@dataclass
class PretrainConfig:
    steps: int = 10000
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    hidden: tuple[int, ...] = (128, 128, 128)
    log_interval: int = 200
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)


def pretrain_loss(den: Denoiser, y0, sigma, eps, x, z) -> tuple[float, MlpGrads]:
    """Weighted denoising loss and its parameter gradients on one batch."""
    y0 = np.asarray(y0, dtype=np.float64)
    y_t = y0 + sigma * eps
    out, cache = denoise_with_cache(den, y_t, sigma, x, z)
    lam = edm_loss_weight(den.schedule, sigma)
    resid = out - y0
    loss = float(np.mean(lam * resid ** 2))
    d_out = 2.0 * lam * resid / y0.shape[0]
    grads, _ = denoise_backward(den, cache, d_out)
    return loss, grads


def pretrain(ds: Dataset, config: PretrainConfig,
             stats: StandardizationStats | None = None) -> tuple[Denoiser, list[tuple[int, float]]]:
    """Fit the conditional denoiser on a standardized dataset.

    Each step draws a minibatch, log-normal noise levels, and Gaussian noise,
    then applies one Adam update on the weighted denoising loss. Returns the
    trained denoiser and a (step, loss) history sampled every
    ``log_interval`` steps (step 0 and the final step always included).
    Deterministic given the seed; raises on non-finite loss.
    """
    rng = np.random.default_rng(config.seed)
    den = Denoiser.create(ds.d, hidden=config.hidden, schedule=config.schedule,
                          seed=config.seed, stats=stats)
    state = AdamState.init(den.net, lr=config.lr)
    history: list[tuple[int, float]] = []
    for step in range(config.steps):
        idx = rng.integers(0, ds.n, size=config.batch_size)
        sigma = sample_training_sigma(config.schedule, rng, size=config.batch_size)
        eps = rng.standard_normal(config.batch_size)
        loss, grads = pretrain_loss(den, ds.outcomes[idx], sigma, eps,
                                    ds.covariates[idx], ds.treatments[idx])
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite pretraining loss {loss} at step {step} "
                f"(sigma range [{sigma.min():.3g}, {sigma.max():.3g}])")
        if step % config.log_interval == 0 or step == config.steps - 1:
            history.append((step, loss))
        adam_step(den.net, grads, state)
    return den, history


def sampler_sigmas(schedule: NoiseSchedule, steps: int) -> np.ndarray:
    """Descending noise ladder sigma_max -> sigma_min plus a final 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == 1:
        sig = np.array([schedule.sigma_max])
    else:
        i = np.arange(steps) / (steps - 1)
        inv_rho = 1.0 / schedule.rho
        sig = (schedule.sigma_max ** inv_rho
               + i * (schedule.sigma_min ** inv_rho - schedule.sigma_max ** inv_rho)) ** schedule.rho
    return np.append(sig, 0.0)


def sample_reverse(den: Denoiser, x, z, steps: int = 18,
                   rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Draw outcomes by deterministic Heun integration from sigma_max.

    ``x`` is (B, d) (or (d,) for a single row), ``z`` is (B,). The only
    randomness is the initial y ~ N(0, sigma_max^2); given an rng state the
    draw is reproducible bit for bit.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    single = np.ndim(z) == 0
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :] if single else x[:, None]
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    sig = sampler_sigmas(den.schedule, steps)
    y = rng.standard_normal(z.shape[0]) * sig[0]
    for i in range(steps):
        s_cur, s_next = sig[i], sig[i + 1]
        d_cur = (y - denoise(den, y, s_cur, x, z)) / s_cur
        y_next = y + (s_next - s_cur) * d_cur
        if s_next > 0.0:
            d_next = (y_next - denoise(den, y_next, s_next, x, z)) / s_next
            y_next = y + (s_next - s_cur) * 0.5 * (d_cur + d_next)
        y = y_next
    return float(y[0]) if single else y


def save_denoiser(den: Denoiser, path, kind: str = "denoiser", extra: dict | None = None) -> None:
    header = {
        "kind": kind,
        "widths": list(den.net.widths),
        "activation": den.net.activation,
        "covariate_dim": den.covariate_dim,
        "schedule": den.schedule.to_dict(),
        "standardization": den.stats.to_dict() if den.stats is not None else None,
    }
    if extra:
        header.update(extra)
    ckpt.write_checkpoint(path, header, den.net.params_flat())


def load_denoiser(path) -> Denoiser:
    header, params = ckpt.read_checkpoint(path)
    net = Mlp(header["widths"], activation=header["activation"])
    net.set_params_flat(params)
    stats = header.get("standardization")
    return Denoiser(
        net,
        NoiseSchedule.from_dict(header["schedule"]),
        header["covariate_dim"],
        StandardizationStats.from_dict(stats) if stats else None,
    )
