import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import linalg, special, stats

from app.errors import ParticleDegeneracyError
from app.Model.core_model import build_regressors
from app.Model.types import Dataset, ModelSpec, ReducedFormParams, RegressorBundle, Variant

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class LikelihoodConfig(BaseModel):
    n_particles: int = Field(default=4096, ge=2)
    resampling_threshold: float = Field(default=0.5, gt=0.0, le=1.0)
    seed: int = Field(default=0, ge=0)
    antithetic: bool = True
    quantiles: Tuple[float, ...] = (0.05, 0.5, 0.95)


@dataclass
class LatentEstimate:
    """Filtered and smoothed reduced-form shadow values of the constrained variable."""
    dates: Tuple[str, ...]
    elb: np.ndarray
    observed: np.ndarray
    bound: np.ndarray
    filtered_mean: np.ndarray
    filtered_std: np.ndarray
    filtered_quantiles: np.ndarray
    smoothed_mean: np.ndarray
    smoothed_std: np.ndarray
    smoothed_quantiles: np.ndarray
    smoothed_slot: np.ndarray
    quantiles: Tuple[float, ...]
    loglik: float
    method: str

    @property
    def reduced_shadow(self) -> np.ndarray:
        return np.where(self.elb, self.smoothed_mean, self.observed)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            "date": list(self.dates),
            "elb": self.elb.astype(int),
            "observed": self.observed,
            "bound": self.bound,
            "filtered_mean": self.filtered_mean,
            "filtered_std": self.filtered_std,
            "smoothed_mean": self.smoothed_mean,
            "smoothed_std": self.smoothed_std,
        })
        for j, q in enumerate(self.quantiles):
            frame[f"smoothed_q{q:g}"] = self.smoothed_quantiles[:, j]
        return frame

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "loglik": self.loglik,
            "quantiles": list(self.quantiles),
            "rows": self.to_frame().to_dict(orient="records"),
        }


@dataclass(frozen=True)
class _Moments:
    """Cholesky-based pieces of the per-period density, shared by all periods."""
    L: np.ndarray
    half_logdet: float
    Lw: np.ndarray
    half_logdet_w: float
    gain: np.ndarray
    s: float
    betatilde: np.ndarray

    @classmethod
    def of(cls, rf: ReducedFormParams) -> "_Moments":
        omega = rf.Omega
        n = rf.k - 1
        bt = rf.betatilde
        selector = np.hstack([np.eye(n), -bt[:, None]])
        sigma_ww = selector @ omega @ selector.T
        sigma_w2 = selector @ omega[:, -1]
        Lw = linalg.cholesky(sigma_ww, lower=True)
        gain = linalg.cho_solve((Lw, True), sigma_w2)
        s2 = omega[-1, -1] - sigma_w2 @ gain
        return cls(
            L=rf.omega_chol,
            half_logdet=float(np.sum(np.log(np.abs(np.diag(rf.omega_chol))))),
            Lw=Lw,
            half_logdet_w=float(np.sum(np.log(np.diag(Lw)))),
            gain=gain,
            s=math.sqrt(max(s2, 1e-300)),
            betatilde=bt,
        )

    def log_normal(self, resid: np.ndarray) -> np.ndarray:
        z = linalg.solve_triangular(self.L, resid.T, lower=True)
        return -0.5 * np.sum(z * z, axis=0) - self.half_logdet - 0.5 * resid.shape[1] * LOG_2PI

    def censored_terms(self, y1: np.ndarray, mean: np.ndarray, bound: float):
        """Contribution at the bound and the conditional law of u2 given the Y1 residual."""
        c = bound - mean[:, -1]
        w = (y1[None, :] - mean[:, :-1]) - c[:, None] * self.betatilde[None, :]
        z = linalg.solve_triangular(self.Lw, w.T, lower=True)
        log_w = -0.5 * np.sum(z * z, axis=0) - self.half_logdet_w - 0.5 * w.shape[1] * LOG_2PI
        mu = w @ self.gain
        upper = (c - mu) / self.s
        return log_w + special.log_ndtr(upper), c, mu, upper


def _period_contribution(moments: _Moments, y: np.ndarray, mean: np.ndarray, at_bound: bool,
                         bound: float) -> np.ndarray:
    if at_bound:
        return moments.censored_terms(y[:-1], mean, bound)[0]
    return moments.log_normal(y[None, :] - mean)


def ksvar_contributions(rf: ReducedFormParams, bundle: RegressorBundle) -> np.ndarray:
    """Per-period log densities with every latent slot set to zero."""
    moments = _Moments.of(rf)
    means = bundle.X @ rf.C.T
    out = np.empty(bundle.t_eff)
    for t in range(bundle.t_eff):
        out[t] = _period_contribution(moments, bundle.y[t], means[t:t + 1], bool(bundle.D[t]),
                                      bundle.bound[t])[0]
    return out


def _sum_loglik(contributions: np.ndarray, dates: Tuple[str, ...]) -> float:
    if np.any(np.isneginf(contributions)) or np.any(np.isnan(contributions)):
        bad = [dates[t] for t in np.where(~np.isfinite(contributions))[0][:5]]
        logger.warning("likelihood underflow at %s; returning -inf", bad)
        return -math.inf
    return math.fsum(contributions)


def loglik_ksvar(rf: ReducedFormParams, data: Dataset, spec: ModelSpec,
                 condition_on: Optional[int] = None) -> float:
    """Exact censored-Gaussian likelihood of a model without latent regressors."""
    bundle = build_regressors(data, spec, condition_on=condition_on)
    if spec.variant != Variant.KSVAR and np.any(rf.Cstar != 0.0) and bundle.lag_D.any():
        raise ValueError("latent lags are active; use loglik_cksvar")
    return _sum_loglik(ksvar_contributions(rf, bundle), bundle.dates)


def _weighted_stats(values: np.ndarray, weights: np.ndarray,
                    quantiles: Tuple[float, ...]) -> Tuple[float, float, np.ndarray]:
    mean = float(weights @ values)
    var = float(weights @ (values - mean) ** 2)
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order])
    cum /= cum[-1]
    idx = np.minimum(np.searchsorted(cum, quantiles), values.size - 1)
    return mean, math.sqrt(max(var, 0.0)), values[order][idx]


def _systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = weights.size
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions)


class ParticleFilter:
    """Fully adapted particle filter over the p most recent reduced-form shadow gaps.

    Each particle carries min(Ybar2_{t-j} - b_{t-j}, 0) for j = 1..p. Off the
    bound the new gap is zero; at the bound it is drawn from the exact
    conditional law of u2 given the Y1 residual, truncated to u2 <= b - m2.
    """

    def __init__(self, rf: ReducedFormParams, bundle: RegressorBundle, cfg: LikelihoodConfig,
                 store_history: bool = True):
        self.rf = rf
        self.bundle = bundle
        self.cfg = cfg
        self.store_history = store_history
        self.moments = _Moments.of(rf)
        self.means = bundle.X @ rf.C.T
        self.N = cfg.n_particles
        self.parents: List[np.ndarray] = []
        self.gaps: List[np.ndarray] = []
        self.filtered: List[Tuple[float, float, np.ndarray]] = []
        self.log_weights = np.full(self.N, -math.log(self.N))

    def _uniforms(self, rng: np.random.Generator) -> np.ndarray:
        if not self.cfg.antithetic:
            return rng.random(self.N)
        half = rng.random(self.N // 2)
        extra = rng.random(self.N % 2)
        return np.concatenate([half, 1.0 - half, extra])

    def run(self) -> Tuple[float, np.ndarray]:
        bundle, rf, moments = self.bundle, self.rf, self.moments
        rng = np.random.default_rng(self.cfg.seed)
        if bundle.presample_latent.any():
            logger.warning("latent slots before %s are at the bound; setting them to 0", bundle.dates[0])
        recent = np.zeros((self.N, bundle.p))
        collapsed = True
        contributions = np.empty(bundle.t_eff)
        identity = np.arange(self.N)
        for t in range(bundle.t_eff):
            at_bound = bool(bundle.D[t])
            rows = recent[:1] if collapsed else recent
            mean = self.means[t][None, :] + rows @ rf.Cstar.T
            if at_bound:
                inc, c, mu, upper = moments.censored_terms(bundle.y[t, :-1], mean, bundle.bound[t])
            else:
                inc = moments.log_normal(bundle.y[t][None, :] - mean)
            if collapsed:
                contributions[t] = inc[0]
                if not np.isfinite(inc[0]):
                    raise ParticleDegeneracyError(bundle.dates[t])
            else:
                total = self.log_weights + inc
                contributions[t] = special.logsumexp(total)
                if not np.isfinite(contributions[t]):
                    raise ParticleDegeneracyError(bundle.dates[t])
                self.log_weights = total - contributions[t]

            parents = identity
            weights = np.exp(self.log_weights)
            if not collapsed and 1.0 / np.sum(weights ** 2) < self.cfg.resampling_threshold * self.N:
                parents = _systematic_resample(weights, rng)
                recent = recent[parents]
                self.log_weights = np.full(self.N, -math.log(self.N))
                weights = np.exp(self.log_weights)
                if at_bound:
                    c, mu, upper = c[parents], mu[parents], upper[parents]

            if at_bound:
                u = self._uniforms(rng)
                if collapsed:
                    c, mu, upper = (np.full(self.N, c[0]), np.full(self.N, mu[0]), np.full(self.N, upper[0]))
                u2 = stats.truncnorm.ppf(u, -np.inf, upper, loc=mu, scale=moments.s)
                gap = np.minimum(u2 - c, 0.0)
                collapsed = False
            else:
                gap = np.zeros(self.N)
            if bundle.p:
                recent = np.column_stack([gap, recent[:, :-1]])
            if not collapsed and not np.any(recent):
                # every particle is back at zero slots: fold the weights into the genealogy
                resampled = _systematic_resample(weights / weights.sum(), rng)
                parents, gap = parents[resampled], gap[resampled]
                self.log_weights = np.full(self.N, -math.log(self.N))
                weights = np.exp(self.log_weights)
                collapsed = True
            if self.store_history:
                self.parents.append(parents)
                self.gaps.append(gap)
                self.filtered.append(_weighted_stats(gap, weights, self.cfg.quantiles))
        return _sum_loglik(contributions, bundle.dates), contributions

    def smoothed(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Genealogy smoother: trace every final particle back through its ancestors."""
        T = len(self.gaps)
        weights = np.exp(self.log_weights)
        weights /= weights.sum()
        idx = np.arange(self.N)
        means, stds = np.zeros(T), np.zeros(T)
        qs = np.zeros((T, len(self.cfg.quantiles)))
        for t in range(T - 1, -1, -1):
            path = self.gaps[t][idx]
            if self.bundle.D[t]:
                means[t], stds[t], qs[t] = _weighted_stats(path, weights, self.cfg.quantiles)
            idx = self.parents[t][idx]
        return means, stds, qs


def _latent_estimate(bundle: RegressorBundle, loglik: float, quantiles: Tuple[float, ...], method: str,
                     filtered: Tuple[np.ndarray, np.ndarray, np.ndarray],
                     smoothed: Tuple[np.ndarray, np.ndarray, np.ndarray]) -> LatentEstimate:
    elb = bundle.D.astype(bool)
    observed = bundle.y[:, -1]
    b = bundle.bound

    def level(gaps, stds, qs):
        mean = np.where(elb, b + gaps, observed)
        std = np.where(elb, stds, 0.0)
        qmat = np.where(elb[:, None], b[:, None] + qs, observed[:, None])
        return mean, std, qmat

    f_mean, f_std, f_q = level(*filtered)
    s_mean, s_std, s_q = level(*smoothed)
    return LatentEstimate(
        dates=bundle.dates, elb=elb, observed=observed.copy(), bound=b.copy(),
        filtered_mean=f_mean, filtered_std=f_std, filtered_quantiles=f_q,
        smoothed_mean=s_mean, smoothed_std=s_std, smoothed_quantiles=s_q,
        smoothed_slot=np.where(elb, smoothed[0], 0.0),
        quantiles=tuple(quantiles), loglik=loglik, method=method,
    )


def closed_form_latent(rf: ReducedFormParams, bundle: RegressorBundle, loglik: float,
                       quantiles: Tuple[float, ...] = (0.05, 0.5, 0.95)) -> LatentEstimate:
    """Period-wise truncated-normal posterior of the shadow gap when no latent lags enter."""
    moments = _Moments.of(rf)
    means = bundle.X @ rf.C.T
    T = bundle.t_eff
    gaps, stds = np.zeros(T), np.zeros(T)
    qs = np.zeros((T, len(quantiles)))
    for t in np.where(bundle.D)[0]:
        _, c, mu, upper = moments.censored_terms(bundle.y[t, :-1], means[t:t + 1], bundle.bound[t])
        law = stats.truncnorm(-np.inf, upper[0], loc=mu[0], scale=moments.s)
        gaps[t] = min(law.mean() - c[0], 0.0)
        stds[t] = law.std()
        qs[t] = np.minimum(law.ppf(quantiles) - c[0], 0.0)
    return _latent_estimate(bundle, loglik, quantiles, "closed_form", (gaps, stds, qs), (gaps, stds, qs))


def loglik_cksvar(
    rf: ReducedFormParams,
    data: Dataset,
    spec: ModelSpec,
    cfg: Optional[LikelihoodConfig] = None,
    smooth: bool = True,
    condition_on: Optional[int] = None,
) -> Tuple[float, Optional[LatentEstimate]]:
    """Simulated likelihood integrating the latent lags; deterministic given ``cfg.seed``."""
    cfg = cfg or LikelihoodConfig()
    bundle = build_regressors(data, spec, condition_on=condition_on)
    if spec.variant == Variant.KSVAR:
        loglik = _sum_loglik(ksvar_contributions(rf, bundle), bundle.dates)
        return loglik, closed_form_latent(rf, bundle, loglik, cfg.quantiles) if smooth else None
    pf = ParticleFilter(rf, bundle, cfg, store_history=smooth)
    loglik, _ = pf.run()
    if not smooth:
        return loglik, None
    f_stats = list(zip(*pf.filtered)) if pf.filtered else ([], [], [])
    filtered = (np.asarray(f_stats[0]), np.asarray(f_stats[1]),
                np.asarray(f_stats[2]).reshape(bundle.t_eff, len(cfg.quantiles)))
    return loglik, _latent_estimate(bundle, loglik, cfg.quantiles, "smc", filtered, pf.smoothed())


def smooth_latent(rf: ReducedFormParams, data: Dataset, spec: ModelSpec,
                  cfg: Optional[LikelihoodConfig] = None,
                  condition_on: Optional[int] = None) -> LatentEstimate:
    return loglik_cksvar(rf, data, spec, cfg, smooth=True, condition_on=condition_on)[1]


def loglik(rf: ReducedFormParams, data: Dataset, spec: ModelSpec,
           cfg: Optional[LikelihoodConfig] = None, condition_on: Optional[int] = None) -> float:
    """Variant-dispatching likelihood used by the optimizer."""
    if spec.variant == Variant.KSVAR:
        return loglik_ksvar(rf, data, spec, condition_on=condition_on)
    return loglik_cksvar(rf, data, spec, cfg, smooth=False, condition_on=condition_on)[0]
