"""Causal metrics and the variance analysis of the two gradient estimators.

Provides potential-outcome prediction from any conditional sampler, RMSE /
PEHE / win-rate metrics, the exact and sampled checks of the importance
weighting identity (reweighted joint expectation equals product-of-marginals
expectation), and a matched-noise Monte Carlo comparison of the gradient
covariance traces under joint-plus-weights sampling versus marginal
sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, StandardizationStats, destandardize_y, standardize_x
from .diffusion import Denoiser, sample_reverse
from .distill import OneStepGenerator, _generator_forward_cache, ipw_weight
from .diffusion import denoise_backward, denoise_with_cache, sigma_of_t
from .nn import per_example_param_grads

__all__ = [
    "MetricsReport",
    "GradVarianceReport",
    "Lemma1Result",
    "OverlapViolationError",
    "TeacherSampler",
    "OracleSampler",
    "predict_po",
    "rmse",
    "pehe",
    "win_rates",
    "delta_pi",
    "lemma1_check_discrete",
    "lemma1_check_sampled",
    "eq6_per_example_grads",
    "variance_compare",
    "grad_variance_experiment",
    "compute_metrics",
]


class OverlapViolationError(ValueError):
    """A propensity of exactly 0 or 1 makes importance weights undefined."""


def rmse(predicted: np.ndarray, actual: np.ndarray) -> float:
    """Root mean squared error over paired rows."""
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape or predicted.ndim != 1 or predicted.size < 1:
        raise ValueError(f"need equal-length 1-D arrays, got {predicted.shape} vs {actual.shape}")
    return float(np.sqrt(np.mean((predicted - actual) ** 2)))


def pehe(tau_hat: np.ndarray, tau: np.ndarray) -> float:
    """Root mean squared error of estimated vs true per-unit treatment effects."""
    return rmse(tau_hat, tau)


def win_rates(scores: np.ndarray, lower_is_better: bool = True) -> np.ndarray:
    """Fraction of datasets on which each method attains the best score.

    ``scores`` is (n_methods, n_datasets). Ties are counted for every tied
    method, so rows can sum past 1.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.size == 0:
        raise ValueError("scores must be a nonempty (methods x datasets) matrix")
    best = scores.min(axis=0) if lower_is_better else scores.max(axis=0)
    return (scores == best).mean(axis=1)


def delta_pi(pi):
    """Excess second moment of the importance weight: 1/(4 pi (1-pi)) - 1.

    Nonnegative, zero only at pi = 0.5, symmetric under pi <-> 1-pi. This is
    the per-covariate factor by which joint-plus-weights sampling inflates
    the gradient second moment relative to marginal sampling.
    """
    pi = np.asarray(pi, dtype=np.float64)
    if np.any(pi <= 0.0) or np.any(pi >= 1.0):
        raise ValueError("pi must lie strictly inside (0, 1)")
    out = 1.0 / (4.0 * pi * (1.0 - pi)) - 1.0
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Lemma1Result:
    lhs: float
    rhs: float
    gap: float
    std_error: float


def lemma1_check_discrete(x_values, p_x, pi_x, h) -> Lemma1Result:
    """Exact check of the weighting identity on a finite covariate set.

    lhs sums p(x) p(z|x) w(x,z) h(x,z) over the joint; rhs sums
    p(x) * 0.5 * h(x,z) over the product of marginals. ``h(x, z)`` is called
    pointwise. Zero/one propensities violate overlap and are rejected.
    """
    x_values = list(x_values)
    p_x = np.asarray(p_x, dtype=np.float64)
    pi_x = np.asarray(pi_x, dtype=np.float64)
    if not (len(x_values) == p_x.size == pi_x.size):
        raise ValueError("x_values, p_x, pi_x must have equal lengths")
    if np.any(pi_x <= 0.0) or np.any(pi_x >= 1.0):
        raise OverlapViolationError("propensity hits 0 or 1: overlap violated")
    lhs = rhs = 0.0
    for xv, px, pi in zip(x_values, p_x, pi_x):
        for z, pz in ((0.0, 1.0 - pi), (1.0, pi)):
            hv = float(h(xv, z))
            lhs += px * pz * (0.5 / pz) * hv
            rhs += px * 0.5 * hv
    return Lemma1Result(lhs=lhs, rhs=rhs, gap=lhs - rhs, std_error=0.0)


def lemma1_check_sampled(x: np.ndarray, z: np.ndarray, pi_hat, h, seed: int = 0) -> Lemma1Result:
    """Monte Carlo check of the weighting identity on observational samples.

    lhs averages w(x,z) h(x,z) over the joint samples with weights from
    ``pi_hat`` (callable or per-row array); rhs averages h(x, z~) with
    treatments redrawn as fair coin flips over the same covariate rows.
    ``h`` must be vectorized. The reported standard error combines both
    stream variances.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    pi = pi_hat(x) if callable(pi_hat) else np.asarray(pi_hat, dtype=np.float64)
    if np.any(pi <= 0.0) or np.any(pi >= 1.0):
        raise OverlapViolationError("estimated propensity hits 0 or 1: overlap violated")
    w = ipw_weight(pi, z)
    lhs_terms = w * np.asarray(h(x, z), dtype=np.float64)
    rng = np.random.default_rng(seed)
    z_rct = rng.binomial(1, 0.5, size=n).astype(np.float64)
    rhs_terms = np.asarray(h(x, z_rct), dtype=np.float64)
    lhs, rhs = float(lhs_terms.mean()), float(rhs_terms.mean())
    se = float(np.sqrt(lhs_terms.var(ddof=1) / n + rhs_terms.var(ddof=1) / n))
    return Lemma1Result(lhs=lhs, rhs=rhs, gap=lhs - rhs, std_error=se)


class TeacherSampler:
    """Multi-step reverse sampler baseline over a pretrained denoiser."""

    def __init__(self, den: Denoiser, steps: int = 18):
        self.den = den
        self.steps = steps

    def sample(self, x, z, rng: np.random.Generator):
        return sample_reverse(self.den, x, z, self.steps, rng)


class OracleSampler:
    """Deterministic sampler from a ground-truth function f(x, z) (testing aid)."""

    def __init__(self, fn):
        self.fn = fn

    def sample(self, x, z, rng: np.random.Generator):
        return np.asarray(self.fn(np.asarray(x), np.asarray(z)), dtype=np.float64)


def predict_po(sampler, ds: Dataset, m_samples: int = 50, seed: int = 0,
               stats: StandardizationStats | None = None):
    """Predict both potential outcomes for every row as sample means.

    For each row and each treatment arm, averages ``m_samples`` conditional
    draws from the sampler. When training standardization stats are given,
    covariates are standardized on the way in and predictions are mapped back
    to original outcome units.
    """
    if m_samples < 1:
        raise ValueError("m_samples must be >= 1")
    rng = np.random.default_rng(seed)
    x = ds.covariates if stats is None else standardize_x(ds.covariates, stats)
    preds = []
    for z_val in (0.0, 1.0):
        z = np.full(ds.n, z_val)
        acc = np.zeros(ds.n)
        for _ in range(m_samples):
            acc += sampler.sample(x, z, rng)
        mean = acc / m_samples
        preds.append(mean if stats is None else destandardize_y(mean, stats))
    return preds[0], preds[1]


@dataclass(frozen=True)
class MetricsReport:
    """Potential-outcome RMSEs and treatment-effect error, in and out of sample."""

    rmse_y0_in: float
    rmse_y0_out: float
    rmse_y1_in: float
    rmse_y1_out: float
    pehe_in: float
    pehe_out: float
    n_eval_samples_per_unit: int

    def __post_init__(self):
        vals = [self.rmse_y0_in, self.rmse_y0_out, self.rmse_y1_in,
                self.rmse_y1_out, self.pehe_in, self.pehe_out]
        if not all(np.isfinite(v) and v >= 0.0 for v in vals):
            raise ValueError(f"metrics must be finite and nonnegative, got {vals}")

    def to_dict(self) -> dict:
        return {
            "rmse_y0_in": self.rmse_y0_in, "rmse_y0_out": self.rmse_y0_out,
            "rmse_y1_in": self.rmse_y1_in, "rmse_y1_out": self.rmse_y1_out,
            "pehe_in": self.pehe_in, "pehe_out": self.pehe_out,
            "n_eval_samples_per_unit": self.n_eval_samples_per_unit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def compute_metrics(sampler, train_ds: Dataset, test_ds: Dataset,
                    stats: StandardizationStats | None, m_samples: int = 50,
                    seed: int = 0) -> MetricsReport:
    """Evaluate a sampler against the stored structural potential outcomes."""
    out = {}
    for tag, ds in (("in", train_ds), ("out", test_ds)):
        if ds.true_y0 is None or ds.true_y1 is None:
            raise ValueError(f"{tag}-sample dataset lacks ground-truth potential outcomes")
        y0_hat, y1_hat = predict_po(sampler, ds, m_samples=m_samples, seed=seed, stats=stats)
        out[f"rmse_y0_{tag}"] = rmse(y0_hat, ds.true_y0)
        out[f"rmse_y1_{tag}"] = rmse(y1_hat, ds.true_y1)
        tau = ds.true_cate if ds.true_cate is not None else ds.true_y1 - ds.true_y0
        out[f"pehe_{tag}"] = pehe(y1_hat - y0_hat, tau)
    return MetricsReport(n_eval_samples_per_unit=m_samples, **out)


def eq6_per_example_grads(gen: OneStepGenerator, f_psi: Denoiser, f_phi: Denoiser,
                          x, z, eps, sigma, eps_t, alpha: float = 0.7) -> np.ndarray:
    """Per-example generator-parameter gradients of the generator objective.

    Each row of the returned (B, n_params) matrix is the gradient of that
    single example's loss term (unit loss weight), differentiated through all
    appearances of y_g with the fake/teacher network parameters held fixed.
    ``sigma`` may vary per row.
    """
    y_g, gen_cache = _generator_forward_cache(gen, x, z, eps)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), y_g.shape)
    y_t = y_g + sigma * np.asarray(eps_t, dtype=np.float64)
    u, psi_cache = denoise_with_cache(f_psi, y_t, sigma, x, z)
    v, phi_cache = denoise_with_cache(f_phi, y_t, sigma, x, z)
    du = (u - y_g) + (3.0 - 2.0 * alpha) * (u - v)
    dv = -(u - y_g) - 2.0 * (1.0 - alpha) * (u - v)
    d_yg_direct = -(u - v)
    _, d_yt_psi = denoise_backward(f_psi, psi_cache, du)
    _, d_yt_phi = denoise_backward(f_phi, phi_cache, dv)
    s = d_yg_direct + d_yt_psi + d_yt_phi
    net_cache, (_, c_out, _) = gen_cache
    return per_example_param_grads(gen.den.net, net_cache, (s * c_out)[:, None])


@dataclass
class GradVarianceReport:
    """Covariance traces of the two gradient estimators with jackknife errors."""

    trace_var_ipw: float
    trace_var_iwdd: float
    mc_std_errors: dict
    n_mc: int
    propensity_regime: str
    norms_ipw: np.ndarray = field(repr=False, default=None)
    norms_iwdd: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.n_mc < 2:
            raise ValueError("n_mc must be >= 2")
        if self.trace_var_ipw < 0 or self.trace_var_iwdd < 0:
            raise ValueError("covariance traces must be nonnegative")

    @property
    def gap(self) -> float:
        return self.trace_var_ipw - self.trace_var_iwdd

    def to_dict(self) -> dict:
        return {
            "trace_var_ipw": self.trace_var_ipw,
            "trace_var_iwdd": self.trace_var_iwdd,
            "gap": self.gap,
            "mc_std_errors": dict(self.mc_std_errors),
            "n_mc": self.n_mc,
            "propensity_regime": self.propensity_regime,
        }


class _TraceAccumulator:
    """Streaming sums for the unbiased covariance trace, batched for jackknife."""

    def __init__(self, n_params: int, n_batches: int):
        self.sum_g = np.zeros((n_batches, n_params))
        self.sum_sq = np.zeros(n_batches)
        self.counts = np.zeros(n_batches, dtype=np.int64)

    def add(self, b: int, grads: np.ndarray) -> None:
        self.sum_g[b] += grads.sum(axis=0)
        self.sum_sq[b] += float((grads ** 2).sum())
        self.counts[b] += grads.shape[0]

    @staticmethod
    def _trace(sum_g, sum_sq, n):
        return (sum_sq - float(sum_g @ sum_g) / n) / (n - 1)

    def trace(self) -> float:
        return self._trace(self.sum_g.sum(axis=0), self.sum_sq.sum(), int(self.counts.sum()))

    def loo_traces(self) -> np.ndarray:
        """Leave-one-batch-out traces, one per jackknife batch."""
        tot_g, tot_sq, tot_n = self.sum_g.sum(axis=0), self.sum_sq.sum(), int(self.counts.sum())
        out = np.empty(len(self.counts))
        for b in range(len(self.counts)):
            out[b] = self._trace(tot_g - self.sum_g[b], tot_sq - self.sum_sq[b],
                                 tot_n - int(self.counts[b]))
        return out


def _jackknife_se(loo: np.ndarray) -> float:
    k = loo.size
    return float(np.sqrt((k - 1) / k * np.sum((loo - loo.mean()) ** 2)))


def variance_compare(grad_fn, x_pool: np.ndarray, propensity_fn, n_mc: int, seed: int = 0,
                     n_jackknife: int = 20, batch_size: int = 500,
                     regime: str = "") -> GradVarianceReport:
    """Matched-noise comparison of the two single-example gradient estimators.

    ``grad_fn(x, z, t, sigma, eps, eps_t) -> (B, P)`` supplies per-example
    gradients. Per index the IPW stream draws x from the pool, z | x from the
    true propensity, and multiplies the gradient by its importance weight;
    the marginal-sampling stream draws x independently from the pool and z as
    a fair coin, unweighted. Both reuse the same (t, sigma, eps, eps_t).
    Standard errors come from a leave-one-batch-out jackknife; the gap SE
    jackknifes the paired difference.
    """
    if n_mc < 100:
        raise ValueError("n_mc < 100 is statistically meaningless; use at least 100")
    rng = np.random.default_rng(seed)
    x_pool = np.asarray(x_pool, dtype=np.float64)
    if x_pool.ndim == 1:
        x_pool = x_pool[:, None]
    per_batch = n_mc // n_jackknife
    n_mc = per_batch * n_jackknife
    # shared noise stream, drawn up front
    t_all = rng.uniform(0.0, 1.0, size=n_mc)
    eps_all = rng.standard_normal(n_mc)
    eps_t_all = rng.standard_normal(n_mc)
    # joint draws for the weighted stream
    idx_ipw = rng.integers(0, x_pool.shape[0], size=n_mc)
    x_ipw = x_pool[idx_ipw]
    pi_ipw = np.asarray(propensity_fn(x_ipw), dtype=np.float64)
    if np.any(pi_ipw <= 0.0) or np.any(pi_ipw >= 1.0):
        raise OverlapViolationError("propensity hits 0 or 1: overlap violated")
    z_ipw = (rng.uniform(size=n_mc) < pi_ipw).astype(np.float64)
    w_ipw = ipw_weight(pi_ipw, z_ipw)
    # product-of-marginals draws for the unweighted stream
    x_iwdd = x_pool[rng.integers(0, x_pool.shape[0], size=n_mc)]
    z_iwdd = rng.binomial(1, 0.5, size=n_mc).astype(np.float64)

    acc_ipw = acc_iwdd = None
    norms_ipw = np.empty(n_mc)
    norms_iwdd = np.empty(n_mc)
    for b in range(n_jackknife):
        sl = slice(b * per_batch, (b + 1) * per_batch)
        for chunk_start in range(sl.start, sl.stop, batch_size):
            ch = slice(chunk_start, min(chunk_start + batch_size, sl.stop))
            t, eps, eps_t = t_all[ch], eps_all[ch], eps_t_all[ch]
            g_ipw = grad_fn(x_ipw[ch], z_ipw[ch], t, eps, eps_t) * w_ipw[ch][:, None]
            g_iwdd = grad_fn(x_iwdd[ch], z_iwdd[ch], t, eps, eps_t)
            if acc_ipw is None:
                acc_ipw = _TraceAccumulator(g_ipw.shape[1], n_jackknife)
                acc_iwdd = _TraceAccumulator(g_ipw.shape[1], n_jackknife)
            acc_ipw.add(b, g_ipw)
            acc_iwdd.add(b, g_iwdd)
            norms_ipw[ch] = np.linalg.norm(g_ipw, axis=1)
            norms_iwdd[ch] = np.linalg.norm(g_iwdd, axis=1)

    loo_ipw, loo_iwdd = acc_ipw.loo_traces(), acc_iwdd.loo_traces()
    return GradVarianceReport(
        trace_var_ipw=acc_ipw.trace(),
        trace_var_iwdd=acc_iwdd.trace(),
        mc_std_errors={
            "ipw": _jackknife_se(loo_ipw),
            "iwdd": _jackknife_se(loo_iwdd),
            "gap": _jackknife_se(loo_ipw - loo_iwdd),
        },
        n_mc=n_mc,
        propensity_regime=regime,
        norms_ipw=norms_ipw,
        norms_iwdd=norms_iwdd,
    )


def grad_variance_experiment(f_phi: Denoiser, f_psi: Denoiser, gen: OneStepGenerator,
                             ds: Dataset, propensity_fn, n_mc: int, seed: int = 0,
                             alpha: float = 0.7, t_max: float | None = None,
                             n_jackknife: int = 20, regime: str = "") -> GradVarianceReport:
    """Compare gradient covariance traces for frozen networks on a dataset.

    Single-example gradients follow the generator objective at unit loss
    weight; the schedule position t is rescaled to [0, t_max/1000]. The
    covariate pool is the dataset's covariate matrix; ``propensity_fn`` gives
    the true (or fitted) P(Z=1 | x) used both to draw the joint stream and to
    weight it.
    """
    schedule = f_phi.schedule
    cap = (schedule.t_max if t_max is None else t_max) / 1000.0

    def grad_fn(x, z, t, eps, eps_t):
        sigma = sigma_of_t(schedule, t * cap)
        return eq6_per_example_grads(gen, f_psi, f_phi, x, z, eps, sigma, eps_t, alpha)

    return variance_compare(grad_fn, ds.covariates, propensity_fn, n_mc, seed=seed,
                            n_jackknife=n_jackknife, regime=regime)
