"""Diversity-guided sampling in a closed-form diffusion sandbox.

The denoiser is exact: latents follow a known isotropic Gaussian mixture,
so the noise prediction is the (negated, scaled) score of the mixture
convolved with the schedule's Gaussian, available in closed form. On top
of that sits the guidance loop: at every step the current batch is
denoised to an estimate of the clean latents, mapped to unit-sphere
embeddings, and the noise prediction is shifted by the scaled gradient
of the negated vendi score of those embeddings, pushing the batch apart.

Two samplers fit the update slot: "ancestral" (stochastic posterior
sampling) and "deterministic" (noise-preserving reconstruction). Both
consume the trajectory's private random stream in a fixed pattern so
runs are reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._validation import check_positive_int
from .errors import NumericError, ParameterError
from .similarity import pairwise_kernel, unit_rows
from .vendi import vendi_loss_grad, vendi_score

SAMPLERS = ("ancestral", "deterministic")


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fractions abar_0..abar_T, abar_0 = 1, decreasing."""

    alphas: np.ndarray

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        if alphas.ndim != 1 or alphas.shape[0] < 2:
            raise ParameterError("schedule needs abar_0..abar_T with T >= 1")
        if alphas[0] != 1.0:
            raise ParameterError("schedule must start at abar_0 = 1")
        if np.any(alphas <= 0.0) or np.any(alphas > 1.0):
            raise ParameterError("schedule values must lie in (0, 1]")
        if np.any(np.diff(alphas) >= 0.0):
            raise ParameterError("schedule must be strictly decreasing")
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)

    @property
    def T(self) -> int:
        return self.alphas.shape[0] - 1

    def abar(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ParameterError(f"step t={t} outside [1, {self.T}]")
        return float(self.alphas[t])

    @classmethod
    def cosine(cls, T: int = 50, max_beta: float = 0.999) -> "NoiseSchedule":
        """Squared-cosine schedule with per-step beta capped at max_beta."""
        check_positive_int(T, "T")

        def f(u: float) -> float:
            return math.cos((u + 0.008) / 1.008 * math.pi / 2.0) ** 2

        abar = np.empty(T + 1, dtype=np.float64)
        abar[0] = 1.0
        for t in range(1, T + 1):
            beta = min(1.0 - f(t / T) / f((t - 1) / T), max_beta)
            abar[t] = abar[t - 1] * (1.0 - beta)
        return cls(abar)

    @classmethod
    def linear(
        cls, T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02
    ) -> "NoiseSchedule":
        check_positive_int(T, "T")
        betas = np.linspace(beta_start, beta_end, T)
        abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(abar)


@dataclass(frozen=True)
class MixtureModel:
    """Isotropic Gaussian mixture playing the clean-data distribution."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        var = np.asarray(self.variances, dtype=np.float64)
        if mu.ndim != 2 or mu.shape[0] < 1:
            raise ParameterError("mixture needs at least one component mean")
        k = mu.shape[0]
        if w.shape != (k,) or var.shape != (k,):
            raise ParameterError("weights/means/variances disagree on component count")
        if np.any(w < 0.0) or w.sum() <= 0.0:
            raise ParameterError("weights must be nonnegative with positive sum")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ParameterError("weights must sum to 1")
        w = w / w.sum()
        if np.any(var <= 0.0):
            raise ParameterError("component variances must be positive")
        for arr in (w, mu, var):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def orthogonal(
        cls,
        n_components: int,
        dim: int,
        radius: float = 5.0,
        variance: float = 0.25,
    ) -> "MixtureModel":
        """Equal-weight components at radius * e_i along the first axes."""
        check_positive_int(n_components, "n_components")
        check_positive_int(dim, "dim")
        if dim < n_components:
            raise ParameterError(
                f"dim={dim} cannot host {n_components} orthogonal means"
            )
        if radius <= 0.0 or variance <= 0.0:
            raise ParameterError("radius and variance must be positive")
        means = np.zeros((n_components, dim))
        means[np.arange(n_components), np.arange(n_components)] = radius
        return cls(
            weights=np.full(n_components, 1.0 / n_components),
            means=means,
            variances=np.full(n_components, variance),
        )

    def restrict(self, indices) -> "MixtureModel":
        """Condition on a component subset (weights renormalized)."""
        indices = list(indices)
        if not indices:
            raise ParameterError("cannot restrict to zero components")
        w = self.weights[indices]
        return MixtureModel(w / w.sum(), self.means[indices], self.variances[indices])

    def log_density_t(self, z: np.ndarray, abar: float) -> np.ndarray:
        """log p_t(z) under the forward-noised mixture at signal level abar."""
        z = np.asarray(z, dtype=np.float64)
        log_r, log_p, _, _ = self._posterior(z, abar)
        return log_p

    def _posterior(self, z: np.ndarray, abar: float):
        """Responsibilities and marginal density of the noised mixture.

        At signal level abar each component contributes
        N(sqrt(abar)*mu_c, (abar*var_c + 1 - abar) I).
        """
        d = z.shape[1]
        s2 = abar * self.variances + (1.0 - abar)  # (k,)
        centers = math.sqrt(abar) * self.means  # (k, d)
        diff = z[:, None, :] - centers[None, :, :]  # (m, k, d)
        sq = np.einsum("mkd,mkd->mk", diff, diff)
        log_norm = -0.5 * d * np.log(2.0 * math.pi * s2)
        log_lik = log_norm[None, :] - 0.5 * sq / s2[None, :]
        log_joint = np.log(self.weights)[None, :] + log_lik
        log_p = logsumexp(log_joint, axis=1)
        if not np.all(np.isfinite(log_p)):
            raise NumericError(
                "mixture responsibilities underflowed; latents too far from support"
            )
        log_r = log_joint - log_p[:, None]
        return log_r, log_p, diff, s2


def analytic_eps(
    z: np.ndarray, t: int, schedule: NoiseSchedule, model: MixtureModel
) -> np.ndarray:
    """Exact noise prediction for mixture-distributed data.

    Equals -sqrt(1 - abar_t) times the score of the noised mixture at z.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.dim:
        raise ParameterError(
            f"latents shape {z.shape} does not match mixture dim {model.dim}"
        )
    abar = schedule.abar(t)
    log_r, _, diff, s2 = model._posterior(z, abar)
    r = np.exp(log_r)  # (m, k)
    score = -np.einsum("mk,mkd->md", r / s2[None, :], diff)
    return -math.sqrt(1.0 - abar) * score


@dataclass(frozen=True)
class EmbedMap:
    """Latents-to-embeddings map: optional fixed linear map, then row
    normalization onto the unit sphere."""

    matrix: np.ndarray | None = None  # (d_e, d) or None for identity

    def __post_init__(self):
        if self.matrix is not None:
            m = np.asarray(self.matrix, dtype=np.float64)
            if m.ndim != 2:
                raise ParameterError("embed map matrix must be 2-D")
            m.setflags(write=False)
            object.__setattr__(self, "matrix", m)

    @classmethod
    def sphere(cls) -> "EmbedMap":
        return cls(None)

    @classmethod
    def random_linear(cls, d_in: int, d_out: int, seed: int = 0) -> "EmbedMap":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((d_out, d_in)) / math.sqrt(d_in))

    def raw(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return z if self.matrix is None else z @ self.matrix.T

    def embed(self, z: np.ndarray) -> np.ndarray:
        return unit_rows(self.raw(z))


@dataclass(frozen=True)
class GuidanceConfig:
    """Knobs of the guided loop; defaults match the sandbox evaluation."""

    scale: float = 1.0
    batch_size: int = 64
    self_recurrence: int = 0
    sampler: str = "ancestral"
    seed: int = 0

    def __post_init__(self):
        if self.scale < 0.0:
            raise ParameterError(f"scale must be >= 0, got {self.scale}")
        check_positive_int(self.batch_size, "batch_size")
        if self.scale > 0.0 and self.batch_size < 2:
            raise ParameterError("diversity guidance needs a batch of >= 2")
        if not isinstance(self.self_recurrence, (int, np.integer)) or isinstance(
            self.self_recurrence, bool
        ) or self.self_recurrence < 0:
            raise ParameterError("self_recurrence must be a nonnegative integer")
        if self.sampler not in SAMPLERS:
            raise ParameterError(
                f"sampler must be one of {SAMPLERS}, got {self.sampler!r}"
            )


@dataclass(frozen=True)
class SandboxTrajectory:
    """Everything one guided run produced, step by step."""

    latents: np.ndarray  # (T+1, m, d); index t holds z_t
    steps: np.ndarray  # executed steps, T..1
    vendi_series: np.ndarray  # VS of the denoised-batch embeddings per step
    mean_cosine_series: np.ndarray  # mean off-diagonal cosine per step
    final_embeddings: np.ndarray  # embed map applied to z_0
    seed: int

    def __post_init__(self):
        for name in ("latents", "vendi_series", "mean_cosine_series", "final_embeddings"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"trajectory field {name} contains non-finite values")
            object.__setattr__(self, name, arr)
        if self.vendi_series.shape != self.steps.shape:
            raise ParameterError("per-step series misaligned with steps")

    @property
    def final_batch(self) -> np.ndarray:
        return self.latents[0]


def guidance_gradient(
    z_t: np.ndarray,
    eps: np.ndarray,
    abar: float,
    embed_map: EmbedMap,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Diversity loss of the denoised batch and its gradient at z_t.

    The noise prediction is treated as a constant of z_t, matching the
    loop's use of the already-evaluated prediction to form the clean
    estimate z0 = (z_t - sqrt(1-abar)*eps) / sqrt(abar). Returns
    (loss, d loss/d z_t, embeddings).
    """
    sqrt_ab = math.sqrt(abar)
    z0 = (z_t - math.sqrt(1.0 - abar) * eps) / sqrt_ab
    raw = embed_map.raw(z0)
    norms = np.linalg.norm(raw, axis=1)
    if np.any(norms == 0.0):
        raise NumericError("denoised batch row collapsed to the zero vector")
    emb = raw / norms[:, None]
    loss, grad_emb, _ = vendi_loss_grad(emb)
    # Tangent gradient through row normalization, the linear map, and the
    # z0 reconstruction (each a constant linear or radial factor).
    grad_raw = grad_emb / norms[:, None]
    grad_z0 = grad_raw if embed_map.matrix is None else grad_raw @ embed_map.matrix
    return loss, grad_z0 / sqrt_ab, emb


def _ancestral_step(
    z_t: np.ndarray,
    eps_hat: np.ndarray,
    abar_t: float,
    abar_prev: float,
    rng: np.random.Generator,
) -> np.ndarray:
    alpha_t = abar_t / abar_prev
    beta_t = 1.0 - alpha_t
    z0_hat = (z_t - math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(abar_t)
    mean = (
        math.sqrt(abar_prev) * beta_t / (1.0 - abar_t) * z0_hat
        + math.sqrt(alpha_t) * (1.0 - abar_prev) / (1.0 - abar_t) * z_t
    )
    sigma = math.sqrt(beta_t * (1.0 - abar_prev) / (1.0 - abar_t))
    # The draw happens unconditionally so the random stream advances the
    # same way at every step (sigma is 0 at the final step).
    return mean + sigma * rng.standard_normal(z_t.shape)


def _deterministic_step(
    z_t: np.ndarray,
    eps_hat: np.ndarray,
    abar_t: float,
    abar_prev: float,
    rng: np.random.Generator,
) -> np.ndarray:
    z0_hat = (z_t - math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(abar_t)
    return math.sqrt(abar_prev) * z0_hat + math.sqrt(1.0 - abar_prev) * eps_hat


_STEPPERS = {"ancestral": _ancestral_step, "deterministic": _deterministic_step}


def _mean_offdiag_cosine(emb: np.ndarray) -> float:
    m = emb.shape[0]
    if m < 2:
        return 1.0
    k = pairwise_kernel(emb)
    return float((k.sum() - m) / (m * (m - 1)))


def _run(
    schedule: NoiseSchedule,
    model: MixtureModel,
    embed_map: EmbedMap,
    cfg: GuidanceConfig,
    guided: bool,
) -> SandboxTrajectory:
    T = schedule.T
    m, d = cfg.batch_size, model.dim
    rng = np.random.default_rng(cfg.seed)
    step = _STEPPERS[cfg.sampler]
    latents = np.empty((T + 1, m, d), dtype=np.float64)
    latents[T] = rng.standard_normal((m, d))
    vendi_series = np.empty(T, dtype=np.float64)
    cosine_series = np.empty(T, dtype=np.float64)
    steps = np.arange(T, 0, -1, dtype=np.int64)
    for i, t in enumerate(steps):
        abar_t = float(schedule.alphas[t])
        abar_prev = float(schedule.alphas[t - 1])
        z_t = latents[t]
        for rep in range(cfg.self_recurrence + 1):
            if rep > 0:
                # Renoise the intermediate result back to level t and redo
                # the step (self-recurrence).
                ratio = abar_t / abar_prev
                z_t = math.sqrt(ratio) * z_prev + math.sqrt(
                    1.0 - ratio
                ) * rng.standard_normal((m, d))
            eps = analytic_eps(z_t, int(t), schedule, model)
            if guided and cfg.scale > 0.0:
                _, grad, emb = guidance_gradient(z_t, eps, abar_t, embed_map)
                eps_hat = eps + cfg.scale * grad
            else:
                z0 = (z_t - math.sqrt(1.0 - abar_t) * eps) / math.sqrt(abar_t)
                emb = embed_map.embed(z0)
                eps_hat = eps
            z_prev = step(z_t, eps_hat, abar_t, abar_prev, rng)
        latents[t - 1] = z_prev
        vendi_series[i] = vendi_score(emb)
        cosine_series[i] = _mean_offdiag_cosine(emb)
    return SandboxTrajectory(
        latents=latents,
        steps=steps,
        vendi_series=vendi_series,
        mean_cosine_series=cosine_series,
        final_embeddings=embed_map.embed(latents[0]),
        seed=cfg.seed,
    )


def guided_sample(
    schedule: NoiseSchedule,
    model: MixtureModel,
    embed_map: EmbedMap = EmbedMap.sphere(),
    cfg: GuidanceConfig = GuidanceConfig(),
) -> SandboxTrajectory:
    """Run the diversity-guided sampling loop end to end.

    With scale 0 the result is bitwise identical to unguided_sample under
    the same seed (the random stream is consumed identically and no
    gradient term is added).
    """
    return _run(schedule, model, embed_map, cfg, guided=True)


def unguided_sample(
    schedule: NoiseSchedule,
    model: MixtureModel,
    embed_map: EmbedMap = EmbedMap.sphere(),
    cfg: GuidanceConfig = GuidanceConfig(),
) -> SandboxTrajectory:
    """Plain sampling loop, no guidance term regardless of cfg.scale."""
    return _run(schedule, model, embed_map, cfg, guided=False)


@dataclass(frozen=True)
class DiversityReport:
    """Summary statistics of one finished trajectory."""

    mean_pairwise_cosine: float
    final_vendi: float
    vendi_series: np.ndarray
    steps: np.ndarray


def diversity_report(trajectory: SandboxTrajectory) -> DiversityReport:
    """Mean off-diagonal cosine and VS of the final embeddings."""
    emb = trajectory.final_embeddings
    return DiversityReport(
        mean_pairwise_cosine=_mean_offdiag_cosine(emb),
        final_vendi=vendi_score(emb),
        vendi_series=trajectory.vendi_series,
        steps=trajectory.steps,
    )
