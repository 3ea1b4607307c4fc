"""One-step generator distillation with randomization-based adjustment.

Three same-architecture denoisers participate: the frozen pretrained teacher,
a fake-score network tracking the generator's output distribution, and the
one-step generator itself, which maps pure noise at a fixed level
``sigma_init`` to an outcome in a single denoiser-form evaluation.

Each training iteration draws a data minibatch, shuffles its covariates and
redraws treatments as fair coin flips for the generator pass (so the
generator trains under the product of marginals, emulating a randomized
trial), then updates the generator and the fake-score network once each.
The explicit inverse-propensity-weighted variant keeps the observational
(x, z) pairs for the generator pass and reweights per-example gradient
contributions instead; it exists mainly as the comparison arm for the
gradient-variance analysis.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .checkpoint import read_checkpoint
from .data import Dataset
from .diffusion import (
    Denoiser,
    NoiseSchedule,
    TrainingDivergedError,
    denoise_backward,
    denoise_with_cache,
    load_denoiser,
    save_denoiser,
    sigma_of_t,
)
from .nn import AdamState, Mlp, MlpGrads, adam_step, mlp_backward, mlp_forward

__all__ = [
    "OneStepGenerator",
    "PropensityModel",
    "DistillConfig",
    "randomization_adjust",
    "generator_forward",
    "time_and_noise",
    "weight_wt",
    "generator_loss",
    "generator_loss_and_grads",
    "fake_loss",
    "fake_loss_and_grads",
    "distill",
    "distill_ipw",
    "propensity_fit",
    "ipw_weight",
    "save_generator",
    "load_generator",
]

logger = logging.getLogger(__name__)

ALPHA_ABLATED_RANGE = (0.3, 1.2)


class OneStepGenerator:
    """Denoiser-shaped network generating outcomes in one forward pass.

    ``generate`` evaluates the denoiser form at input sigma_init * eps and
    noise level sigma_init, conditioned on (x, z).
    """

    def __init__(self, den: Denoiser, sigma_init: float = 2.5):
        sched = den.schedule
        if not sched.sigma_min < sigma_init < sched.sigma_max:
            raise ValueError(
                f"sigma_init {sigma_init} outside ({sched.sigma_min}, {sched.sigma_max})")
        self.den = den
        self.sigma_init = float(sigma_init)

    def copy(self) -> "OneStepGenerator":
        return OneStepGenerator(self.den.copy(), self.sigma_init)

    def generate(self, x, z, eps):
        return generator_forward(self, x, z, eps)

    def sample(self, x, z, rng: np.random.Generator):
        """Draw eps ~ N(0, I) internally and generate."""
        z_arr = np.atleast_1d(np.asarray(z, dtype=np.float64))
        eps = rng.standard_normal(z_arr.shape[0])
        out = generator_forward(self, x, z_arr, eps)
        return float(out[0]) if np.ndim(z) == 0 else out


def generator_forward(gen: OneStepGenerator, x, z, eps):
    """y_g = one-step denoiser-form evaluation at sigma_init * eps."""
    eps = np.atleast_1d(np.asarray(eps, dtype=np.float64))
    out, _ = denoise_with_cache(gen.den, gen.sigma_init * eps, gen.sigma_init, x, z)
    return float(out[0]) if np.ndim(eps) == 0 else out


def _generator_forward_cache(gen: OneStepGenerator, x, z, eps):
    return denoise_with_cache(gen.den, gen.sigma_init * np.asarray(eps, dtype=np.float64),
                              gen.sigma_init, x, z)


def randomization_adjust(x_batch: np.ndarray, rng: np.random.Generator):
    """Shuffle covariate rows and redraw treatments as Bernoulli(0.5).

    Returns (x_shuffled, z_random): a uniformly random row permutation of
    ``x_batch`` paired with i.i.d. fair coin flips, so the batch follows the
    product of marginals instead of the observational joint.
    """
    x_batch = np.asarray(x_batch, dtype=np.float64)
    n = x_batch.shape[0]
    if n < 1:
        raise ValueError("batch must be nonempty")
    perm = rng.permutation(n)
    z_rand = rng.binomial(1, 0.5, size=n).astype(np.float64)
    return x_batch[perm], z_rand


def time_and_noise(schedule: NoiseSchedule, rng: np.random.Generator,
                   batch_size: int, t_max: float | None = None):
    """Sample one schedule position for the iteration plus per-row noise.

    t ~ Unif[0, t_max/1000] shared by the batch (the loss weights are
    functions of t at batch level), sigma_t from the rho schedule, and
    eps_t ~ N(0, I) per row.
    """
    cap = (schedule.t_max if t_max is None else t_max) / 1000.0
    t = float(rng.uniform(0.0, cap)) if cap > 0.0 else 0.0
    sigma_t = sigma_of_t(schedule, t)
    eps_t = rng.standard_normal(batch_size)
    return t, sigma_t, eps_t


def weight_wt(y_g: np.ndarray, teacher_out: np.ndarray, c: float = 1.0) -> float:
    """Loss weight: c over the batch-mean L1 residual, as a constant.

    The residual is |y_g - teacher denoised y_t| averaged over the batch;
    no gradient flows through this quantity. A vanishing residual clamps the
    denominator to 1e-8 (flagged with a warning).
    """
    y_g = np.atleast_1d(np.asarray(y_g, dtype=np.float64))
    if y_g.size == 0:
        raise ValueError("batch must be nonempty")
    denom = float(np.mean(np.abs(y_g - teacher_out)))
    if denom < 1e-8:
        warnings.warn("weight_wt denominator clamped to 1e-8 (generator matches teacher "
                      "on this batch)", RuntimeWarning, stacklevel=2)
        denom = 1e-8
    return c / denom


def generator_loss(f_psi: Denoiser, f_phi: Denoiser, y_g, y_t, sigma_t, x, z,
                   alpha: float, w_t: float) -> float:
    """Generator objective on one batch (value only).

    With u = fake-score output and v = teacher output at (y_t, sigma_t, x, z):

        mean_i[ w_t * (u - v)(u - y_g) + (1 - alpha) * w_t * (u - v)^2 ]
    """
    u = np.atleast_1d(denoise_with_cache(f_psi, y_t, sigma_t, x, z)[0])
    v = np.atleast_1d(denoise_with_cache(f_phi, y_t, sigma_t, x, z)[0])
    y_g = np.atleast_1d(np.asarray(y_g, dtype=np.float64))
    return float(np.mean(w_t * (u - v) * (u - y_g) + (1.0 - alpha) * w_t * (u - v) ** 2))


def generator_loss_and_grads(gen: OneStepGenerator, f_psi: Denoiser, f_phi: Denoiser,
                             x, z, eps, sigma_t, eps_t, alpha: float,
                             w_t: float | None = None, c_norm: float = 1.0,
                             example_weights: np.ndarray | None = None):
    """Evaluate the generator objective and its gradient to the generator.

    Recomputes y_g from (x, z, eps), forms y_t = y_g + sigma_t * eps_t, and
    differentiates through every appearance of y_g -- including through the
    fake-score and teacher evaluations of y_t -- while holding their network
    parameters and the loss weight fixed. When ``w_t`` is None it is computed
    from this batch (stop-gradient). ``example_weights`` multiply per-example
    loss terms before batch averaging (explicit-IPW mode).

    Returns (loss, theta_grads, y_g, y_t, w_t).
    """
    eps = np.asarray(eps, dtype=np.float64)
    batch = eps.shape[0]
    y_g, gen_cache = _generator_forward_cache(gen, x, z, eps)
    y_t = y_g + sigma_t * np.asarray(eps_t, dtype=np.float64)
    u, psi_cache = denoise_with_cache(f_psi, y_t, sigma_t, x, z)
    v, phi_cache = denoise_with_cache(f_phi, y_t, sigma_t, x, z)
    if w_t is None:
        w_t = weight_wt(y_g, v, c_norm)
    ew = np.ones(batch) if example_weights is None else np.asarray(example_weights, dtype=np.float64)
    terms = w_t * (u - v) * (u - y_g) + (1.0 - alpha) * w_t * (u - v) ** 2
    loss = float(np.mean(ew * terms))
    scale = ew * (w_t / batch)
    du = scale * ((u - y_g) + (3.0 - 2.0 * alpha) * (u - v))
    dv = scale * (-(u - y_g) - 2.0 * (1.0 - alpha) * (u - v))
    d_yg_direct = scale * (-(u - v))
    _, d_yt_psi = denoise_backward(f_psi, psi_cache, du)
    _, d_yt_phi = denoise_backward(f_phi, phi_cache, dv)
    s = d_yg_direct + d_yt_psi + d_yt_phi
    theta_grads, _ = denoise_backward(gen.den, gen_cache, s)
    return loss, theta_grads, y_g, y_t, w_t


def fake_loss(f_psi: Denoiser, y_g, y_t, sigma_t, x, z, gamma_t: float) -> float:
    """Fake-score objective: gamma_t * mean squared gap to the generator sample."""
    u = np.atleast_1d(denoise_with_cache(f_psi, y_t, sigma_t, x, z)[0])
    y_g = np.atleast_1d(np.asarray(y_g, dtype=np.float64))
    return float(np.mean(gamma_t * (u - y_g) ** 2))


def fake_loss_and_grads(f_psi: Denoiser, y_g, y_t, sigma_t, x, z, gamma_t: float):
    """Fake-score objective and its gradient to the fake network only.

    ``y_g`` and ``y_t`` are constant targets here; the gradient flows through
    the fake network's parameters alone.
    """
    y_g = np.asarray(y_g, dtype=np.float64)
    u, cache = denoise_with_cache(f_psi, y_t, sigma_t, x, z)
    resid = u - y_g
    loss = float(np.mean(gamma_t * resid ** 2))
    d_out = 2.0 * gamma_t * resid / resid.shape[0]
    psi_grads, _ = denoise_backward(f_psi, cache, d_out)
    return loss, psi_grads


@dataclass
class DistillConfig:
    """Hyperparameters for the distillation loop."""

    alpha: float = 0.7
    eta_theta: float = 1e-4
    eta_psi: float = 1e-4
    batch_size: int = 128
    iterations: int = 10000
    sigma_init: float = 2.5
    t_max: float | None = None          # None: use the schedule's t_max
    mode: str = "marginal"              # "marginal" or "explicit-ipw"
    ipw_clip: float | None = None       # explicit-ipw only; upper bound on weights
    seed: int = 0
    log_interval: int = 100
    val_interval: int = 0               # 0 disables checkpoint selection
    val_samples: int = 8

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (shuffling one row is a no-op)")
        if self.mode not in ("marginal", "explicit-ipw"):
            raise ValueError(f"mode must be 'marginal' or 'explicit-ipw', got {self.mode!r}")
        lo, hi = ALPHA_ABLATED_RANGE
        if not lo <= self.alpha <= hi:
            warnings.warn(f"alpha={self.alpha} outside the ablated range [{lo}, {hi}]",
                          UserWarning, stacklevel=2)


def _factual_val_rmse(gen: OneStepGenerator, val_ds: Dataset, eps_matrix: np.ndarray) -> float:
    """Mean-prediction RMSE against observed outcomes (standardized units)."""
    n, m = eps_matrix.shape
    preds = np.zeros(n)
    for j in range(m):
        preds += gen.generate(val_ds.covariates, val_ds.treatments, eps_matrix[:, j])
    preds /= m
    return float(np.sqrt(np.mean((preds - val_ds.outcomes) ** 2)))


def _distill_loop(f_phi: Denoiser, ds: Dataset, config: DistillConfig,
                  val_ds: Dataset | None, example_weight_fn):
    rng = np.random.default_rng(config.seed)
    gen = OneStepGenerator(f_phi.copy(), config.sigma_init)
    f_psi = f_phi.copy()
    state_theta = AdamState.init(gen.den.net, lr=config.eta_theta)
    state_psi = AdamState.init(f_psi.net, lr=config.eta_psi)
    history: list[tuple[int, float, float, float, float]] = []
    best_rmse, best_params = math.inf, None
    val_eps = None
    if val_ds is not None and config.val_interval > 0:
        val_eps = rng.standard_normal((val_ds.n, config.val_samples))

    for step in range(config.iterations):
        idx = rng.integers(0, ds.n, size=config.batch_size)
        x, z = ds.covariates[idx], ds.treatments[idx]
        if example_weight_fn is None:
            x_gen, z_gen = randomization_adjust(x, rng)
            ew = None
        else:
            x_gen, z_gen = x, z          # observational joint, reweighted
            ew = example_weight_fn(idx, x, z)
        eps = rng.standard_normal(config.batch_size)
        _, sigma_t, eps_t = time_and_noise(f_phi.schedule, rng, config.batch_size, config.t_max)

        loss_theta, theta_grads, y_g, y_t, w_t = generator_loss_and_grads(
            gen, f_psi, f_phi, x_gen, z_gen, eps, sigma_t, eps_t,
            config.alpha, example_weights=ew)
        gamma_t = w_t
        loss_psi, psi_grads = fake_loss_and_grads(f_psi, y_g, y_t, sigma_t, x, z, gamma_t)

        if not (math.isfinite(loss_theta) and math.isfinite(loss_psi)):
            err = TrainingDivergedError(
                f"non-finite distillation loss at iteration {step} "
                f"(L_theta={loss_theta}, L_psi={loss_psi})")
            err.generator = gen          # last-good parameters, pre-update
            err.history = history
            raise err

        adam_step(gen.den.net, theta_grads, state_theta)
        adam_step(f_psi.net, psi_grads, state_psi)

        if step % config.log_interval == 0 or step == config.iterations - 1:
            history.append((step, loss_theta, loss_psi, w_t, gamma_t))
        if val_eps is not None and (step + 1) % config.val_interval == 0:
            rmse = _factual_val_rmse(gen, val_ds, val_eps)
            if rmse < best_rmse:
                best_rmse, best_params = rmse, gen.den.net.params_flat()

    if best_params is not None:
        final = _factual_val_rmse(gen, val_ds, val_eps)
        if final < best_rmse:
            best_rmse, best_params = final, gen.den.net.params_flat()
        gen.den.net.set_params_flat(best_params)
    return gen, f_psi, history


def distill(f_phi: Denoiser, ds: Dataset, config: DistillConfig,
            val_ds: Dataset | None = None):
    """Distill the pretrained denoiser into a one-step generator.

    Both the generator and the fake-score network start as parameter copies
    of the teacher. Per iteration: sample a minibatch, shuffle covariates and
    redraw treatments for the generator pass, form y_g and y_t once, update
    the generator on the adjusted pairs, then update the fake-score network
    on the unadjusted pairs against the same (detached) y_g and y_t.

    When ``val_ds`` is given and ``config.val_interval`` > 0, the returned
    generator carries the parameters with the best factual validation RMSE
    seen during training (fixed iteration budget with checkpoint selection).

    Returns (generator, fake_denoiser, history); history rows are
    (step, loss_theta, loss_psi, w_t, gamma_t).
    """
    if config.mode != "marginal":
        raise ValueError("distill requires config.mode == 'marginal'")
    return _distill_loop(f_phi, ds, config, val_ds, example_weight_fn=None)


class PropensityModel:
    """MLP propensity estimator: x -> P(Z=1 | x) through a logistic link."""

    def __init__(self, net: Mlp):
        if net.widths[-1] != 1:
            raise ValueError("propensity net must output a single logit")
        self.net = net

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None] if self.net.widths[0] == 1 else x[None, :]
        logits, _ = mlp_forward(self.net, x)
        # logits clipped so the link never saturates to exactly 0 or 1
        return expit(np.clip(logits[:, 0], -30.0, 30.0))


def propensity_fit(ds: Dataset, hidden=(64,), steps: int = 2000, lr: float = 1e-2,
                   batch_size: int = 256, seed: int = 0) -> PropensityModel:
    """Fit the propensity network by cross-entropy on (covariates, treatment)."""
    rng = np.random.default_rng(seed)
    net = Mlp([ds.d, *hidden, 1], activation="silu", rng=rng)
    model = PropensityModel(net)
    state = AdamState.init(net, lr=lr)
    batch_size = min(batch_size, ds.n)
    for _ in range(steps):
        idx = rng.integers(0, ds.n, size=batch_size)
        x, z = ds.covariates[idx], ds.treatments[idx]
        logits, cache = mlp_forward(net, x)
        p = expit(np.clip(logits[:, 0], -30.0, 30.0))
        d_logit = (p - z)[:, None] / batch_size
        grads, _ = mlp_backward(net, cache, d_logit)
        adam_step(net, grads, state)
    return model


def ipw_weight(pi_hat, z, clip: float | None = None):
    """Importance weight relative to a fair coin: 0.5/pi if z=1 else 0.5/(1-pi).

    With pi in (0, 1) the weight always exceeds 0.5 (the unnormalized
    1/p(z|x) always exceeds 1). ``clip`` truncates from above only.
    """
    pi_hat = np.asarray(pi_hat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(pi_hat <= 0.0) or np.any(pi_hat >= 1.0):
        raise ValueError("propensity must lie strictly inside (0, 1)")
    w = np.where(z == 1.0, 0.5 / pi_hat, 0.5 / (1.0 - pi_hat))
    if clip is not None:
        w = np.minimum(w, clip)
    return float(w) if w.ndim == 0 else w


def distill_ipw(f_phi: Denoiser, ds: Dataset, config: DistillConfig,
                propensity: PropensityModel | None = None,
                weights: np.ndarray | None = None,
                val_ds: Dataset | None = None):
    """Explicit inverse-propensity-weighted distillation (comparison arm).

    Identical loop to :func:`distill` except the generator pass keeps the
    observational (x, z) pairs and multiplies each example's loss term by its
    importance weight before batch averaging. Weights come from the fitted
    propensity model (or a precomputed per-row ``weights`` array aligned with
    ``ds``); ``config.ipw_clip`` truncates them from above.
    """
    if config.mode != "explicit-ipw":
        raise ValueError("distill_ipw requires config.mode == 'explicit-ipw'")
    if (propensity is None) == (weights is None):
        raise ValueError("pass exactly one of propensity or weights")
    if weights is not None:
        row_w = np.asarray(weights, dtype=np.float64)
        if row_w.shape != (ds.n,):
            raise ValueError(f"weights must have shape ({ds.n},)")
        if config.ipw_clip is not None:
            row_w = np.minimum(row_w, config.ipw_clip)
        weight_fn = lambda idx, x, z: row_w[idx]
        w_all = row_w
    else:
        weight_fn = lambda idx, x, z: ipw_weight(propensity.predict(x), z, config.ipw_clip)
        w_all = weight_fn(None, ds.covariates, ds.treatments)
    w_max = float(np.max(w_all))
    if w_max > 20.0:
        logger.warning("explicit-ipw weights are heavy-tailed: max weight %.3g", w_max)
    return _distill_loop(f_phi, ds, config, val_ds, example_weight_fn=weight_fn)


def save_generator(gen: OneStepGenerator, path) -> None:
    save_denoiser(gen.den, path, kind="generator", extra={"sigma_init": gen.sigma_init})


def load_generator(path) -> OneStepGenerator:
    den = load_denoiser(path)
    header, _ = read_checkpoint(path)
    return OneStepGenerator(den, header.get("sigma_init", 2.5))
