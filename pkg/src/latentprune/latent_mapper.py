"""Attention-guided partitioning and optimization of initial noise.

A noise draw is scored by two diagnostics extracted from one denoiser pass
at the first denoising step: a cross-attention neglect score (some prompt
subject never receives a strong spatial response) and a self-attention
conflict score (two subjects' attention footprints overlap). Noise counts
as valid when both scores sit below their thresholds.

Invalid noise is navigated toward the valid region by reparameterizing the
draw through a learnable diagonal Gaussian and descending a joint loss:
both scores plus a KL leash to the standard-normal prior. Gradients are
either analytic (hand backprop through the pipeline's attention front) or
central finite differences; the finite-difference path is the
always-available oracle the analytic path is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attn_core import (
    CrossAttnMaps,
    SelfAttnMaps,
    gaussian_smooth,
    gaussian_smooth_adjoint,
)
from .sim_prune import PruneCatalog
from .toy_pipeline import (
    PipelineHandle,
    attention_front,
    attention_front_backward,
)

DEFAULT_TAU_CROSS = 0.8
DEFAULT_TAU_SELF = 0.3


@dataclass
class NoiseDistribution:
    """Learnable diagonal Gaussian over the latent plus its frozen draw.

    sigma = exp(log_sigma) keeps the scale strictly positive; transform()
    is the reparameterized draw mu + sigma * z.
    """

    mu: np.ndarray
    log_sigma: np.ndarray
    z_frozen: np.ndarray
    seed: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64)
        self.z_frozen = np.asarray(self.z_frozen, dtype=np.float64)
        if not (self.mu.shape == self.log_sigma.shape == self.z_frozen.shape):
            raise ValueError(
                f"mu {self.mu.shape}, log_sigma {self.log_sigma.shape} and "
                f"z {self.z_frozen.shape} must share one shape"
            )
        for name, arr in (("mu", self.mu), ("log_sigma", self.log_sigma),
                          ("z", self.z_frozen)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        with np.errstate(over="ignore", invalid="ignore"):
            if not np.all(np.isfinite(self.transform())):
                raise ValueError("mu + sigma * z overflows; log_sigma too large")

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def transform(self) -> np.ndarray:
        return self.mu + self.sigma * self.z_frozen

    @classmethod
    def standard(cls, dim: int, seed: int, stream: int = 0) -> "NoiseDistribution":
        """mu = 0, sigma = 1 and a fresh frozen draw from (seed, stream)."""
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(stream,))
        )
        return cls(
            mu=np.zeros(dim),
            log_sigma=np.zeros(dim),
            z_frozen=rng.standard_normal(dim),
            seed=seed,
        )


@dataclass
class ValidityScores:
    s_cross: float
    s_self: float
    valid: bool

    @property
    def combined(self) -> float:
        return self.s_cross + self.s_self

    @classmethod
    def from_scores(
        cls, s_cross: float, s_self: float, tau_cross: float, tau_self: float
    ) -> "ValidityScores":
        return cls(
            s_cross=float(s_cross),
            s_self=float(s_self),
            valid=bool(s_cross < tau_cross and s_self < tau_self),
        )


@dataclass
class MapperConfig:
    """Thresholds and optimizer knobs for the noise search.

    The threshold and KL-weight defaults are engineering choices exposed for
    override, not claims.
    """

    tau_cross: float = DEFAULT_TAU_CROSS
    tau_self: float = DEFAULT_TAU_SELF
    lambda_kl: float = 0.1
    inner_steps: int = 50
    outer_rounds: int = 5
    learning_rate: float = 0.05
    gradient_mode: str = "analytic"
    fd_epsilon: float = 1e-4

    def __post_init__(self):
        for name in ("tau_cross", "tau_self", "lambda_kl", "fd_epsilon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        # Zero is allowed: it turns the inner loop into pure evaluation.
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.inner_steps < 1 or self.outer_rounds < 1:
            raise ValueError("inner_steps and outer_rounds must be >= 1")
        if self.gradient_mode not in ("analytic", "finite_difference"):
            raise ValueError(
                f"gradient_mode must be 'analytic' or 'finite_difference', "
                f"got {self.gradient_mode!r}"
            )


def cross_attn_score(
    maps: CrossAttnMaps | np.ndarray, subject_indices: list[int]
) -> float:
    """Subject-neglect score: 1 minus the weakest subject's peak response.

    Expects smoothed maps; 0 means every subject peaks at full strength
    somewhere, 1 means some subject gets no response at all.
    """
    grids = maps.maps if isinstance(maps, CrossAttnMaps) else np.asarray(maps)
    if len(subject_indices) == 0:
        raise ValueError("subject token list must not be empty")
    m = grids.shape[0]
    for idx in subject_indices:
        if not 0 <= idx < m:
            raise ValueError(f"subject index {idx} outside {m} text tokens")
    peaks = [float(grids[i].max()) for i in subject_indices]
    return 1.0 - min(peaks)


def _centroid(
    cross_grid: np.ndarray, positions: np.ndarray
) -> int:
    """Flat grid index of the subject's peak, restricted to available rows.

    Ties break to the first candidate in row-major order.
    """
    flat = cross_grid.ravel()
    return int(positions[np.argmax(flat[positions])])


def self_attn_conflict(
    self_maps: SelfAttnMaps | np.ndarray,
    cross_maps: CrossAttnMaps | np.ndarray,
    subject_indices: list[int],
) -> float:
    """Mean pairwise overlap of subjects' self-attention footprints.

    Each subject is located at its cross-map peak; the overlap of two
    located self maps is sum(min) / sum(a + b), which lives in [0, 0.5].
    Defined only for two or more subjects.
    """
    if len(subject_indices) < 2:
        raise ValueError("conflict score needs at least two subject tokens")
    cross = cross_maps.maps if isinstance(cross_maps, CrossAttnMaps) else np.asarray(cross_maps)
    if not isinstance(self_maps, SelfAttnMaps):
        self_maps = SelfAttnMaps(np.asarray(self_maps))
    located = []
    for i in subject_indices:
        c = _centroid(cross[i], self_maps.positions)
        located.append(self_maps.row_for_position(c))
    total = 0.0
    n_pairs = 0
    for a_idx in range(len(located)):
        for b_idx in range(a_idx + 1, len(located)):
            a, b = located[a_idx], located[b_idx]
            denom = float((a + b).sum())
            if denom == 0.0:
                raise ValueError(
                    "self-attention maps at subject centroids carry no mass"
                )
            total += float(np.minimum(a, b).sum()) / denom
            n_pairs += 1
    return total / n_pairs


def kl_to_standard_normal(dist: NoiseDistribution) -> float:
    """Closed-form KL from the diagonal Gaussian to the standard normal.

    0.5 * sum(sigma^2 + mu^2 - 1 - log sigma^2); zero exactly at
    (mu=0, sigma=1), positive everywhere else.
    """
    var = np.exp(2.0 * dist.log_sigma)
    return 0.5 * float(np.sum(var + dist.mu**2 - 1.0 - 2.0 * dist.log_sigma))


def joint_loss(scores: ValidityScores, kl: float, lambda_kl: float) -> float:
    return scores.s_cross + scores.s_self + lambda_kl * kl


@dataclass
class _Evaluation:
    scores: ValidityScores
    kl: float
    loss: float
    grad_mu: np.ndarray | None = None
    grad_log_sigma: np.ndarray | None = None


def _score_maps(
    pipeline: PipelineHandle,
    cross_w: np.ndarray,
    self_w: np.ndarray,
    kept: np.ndarray,
    subject_indices: list[int],
    want_grad: bool,
):
    """Scores plus (optionally) gradients w.r.t. the raw attention weights.

    Smoothing is applied to both map kinds before scoring; self maps are
    renormalized to sum 1 after smoothing in every mode, so an empty prune
    catalog scores bit-identically to no catalog. Under pruning, subject
    centroids are restricted to kept cells because only those carry a
    self-attention row.
    """
    h, w = pipeline.height, pipeline.width
    n = h * w
    kept_row = {int(p): r for r, p in enumerate(kept)}

    smoothed_cross = {
        i: gaussian_smooth(cross_w[:, i].reshape(h, w)) for i in subject_indices
    }
    peaks = np.array([smoothed_cross[i].max() for i in subject_indices])
    weakest = int(np.argmin(peaks))
    s_cross = 1.0 - float(peaks[weakest])

    centroids = {}
    norm_maps = {}
    smooth_sums = {}
    smoothed_self = {}
    if len(subject_indices) >= 2:
        for i in subject_indices:
            c = _centroid(smoothed_cross[i], kept)
            centroids[i] = c
            grid = np.zeros(n)
            grid[kept] = self_w[kept_row[c]]
            sm = gaussian_smooth(grid.reshape(h, w))
            total = float(sm.sum())
            smoothed_self[i] = sm
            smooth_sums[i] = total
            norm_maps[i] = sm / total
        total_f = 0.0
        pairs = []
        for ai in range(len(subject_indices)):
            for bi in range(ai + 1, len(subject_indices)):
                i, j = subject_indices[ai], subject_indices[bi]
                a, b = norm_maps[i], norm_maps[j]
                u = float(np.minimum(a, b).sum())
                v = float((a + b).sum())
                total_f += u / v
                pairs.append((i, j, u, v))
        n_pairs = len(pairs)
        s_self = total_f / n_pairs
    else:
        pairs = []
        n_pairs = 0
        s_self = 0.0

    if not want_grad:
        return s_cross, s_self, None, None

    d_cross_w = np.zeros_like(cross_w)
    d_self_w = np.zeros_like(self_w)

    # Neglect score: -1 lands on the weakest subject's peak cell.
    i_star = subject_indices[weakest]
    peak_grid = np.zeros((h, w))
    peak_grid.ravel()[np.argmax(smoothed_cross[i_star].ravel())] = -1.0
    d_cross_w[:, i_star] += gaussian_smooth_adjoint(peak_grid).ravel()

    if n_pairs:
        d_norm = {i: np.zeros((h, w)) for i in subject_indices}
        for i, j, u, v in pairs:
            a, b = norm_maps[i], norm_maps[j]
            mask_a = a <= b  # ties follow the a-branch
            d_norm[i] += (mask_a / v - u / v**2) / n_pairs
            d_norm[j] += (~mask_a / v - u / v**2) / n_pairs
        for i in subject_indices:
            dn = d_norm[i]
            # Adjoint of x -> x / sum(x).
            d_sm = (dn - float((dn * norm_maps[i]).sum())) / smooth_sums[i]
            d_grid = gaussian_smooth_adjoint(d_sm).ravel()
            d_self_w[kept_row[centroids[i]], :] += d_grid[kept]

    return s_cross, s_self, d_cross_w, d_self_w


def _evaluate(
    mu: np.ndarray,
    log_sigma: np.ndarray,
    z: np.ndarray,
    pipeline: PipelineHandle,
    prune: PruneCatalog | None,
    lambda_kl: float,
    tau_cross: float,
    tau_self: float,
    want_grad: bool,
) -> _Evaluation:
    sigma = np.exp(log_sigma)
    eps_prime = mu + sigma * z
    t = pipeline.num_steps
    cross_w, self_w, kept, tape = attention_front(
        pipeline, eps_prime, t, prune=prune, with_tape=want_grad
    )
    subjects = pipeline.prompt.subject_indices
    s_cross, s_self, d_cross_w, d_self_w = _score_maps(
        pipeline, cross_w, self_w, kept, subjects, want_grad
    )
    scores = ValidityScores.from_scores(s_cross, s_self, tau_cross, tau_self)
    var = sigma**2
    kl = 0.5 * float(np.sum(var + mu**2 - 1.0 - 2.0 * log_sigma))
    loss = joint_loss(scores, kl, lambda_kl)
    if not want_grad:
        return _Evaluation(scores, kl, loss)
    d_eps = attention_front_backward(pipeline, tape, d_cross_w, d_self_w)
    grad_mu = d_eps + lambda_kl * mu
    grad_log_sigma = d_eps * (sigma * z) + lambda_kl * (var - 1.0)
    return _Evaluation(scores, kl, loss, grad_mu, grad_log_sigma)


def finite_difference_gradient(
    mu: np.ndarray,
    log_sigma: np.ndarray,
    z: np.ndarray,
    pipeline: PipelineHandle,
    prune: PruneCatalog | None,
    lambda_kl: float,
    epsilon: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient of the joint loss on every coordinate."""

    def loss_at(m, ls):
        ev = _evaluate(
            m, ls, z, pipeline, prune, lambda_kl,
            DEFAULT_TAU_CROSS, DEFAULT_TAU_SELF, want_grad=False,
        )
        return ev.loss

    grad_mu = np.zeros_like(mu)
    grad_ls = np.zeros_like(log_sigma)
    for idx in range(mu.size):
        bump = np.zeros_like(mu)
        bump[idx] = epsilon
        grad_mu[idx] = (loss_at(mu + bump, log_sigma) - loss_at(mu - bump, log_sigma)) / (
            2 * epsilon
        )
        grad_ls[idx] = (loss_at(mu, log_sigma + bump) - loss_at(mu, log_sigma - bump)) / (
            2 * epsilon
        )
    return grad_mu, grad_ls


def score_noise(
    dist: NoiseDistribution,
    pipeline: PipelineHandle,
    prune: PruneCatalog | None = None,
    tau_cross: float = DEFAULT_TAU_CROSS,
    tau_self: float = DEFAULT_TAU_SELF,
) -> ValidityScores:
    """Score one noise distribution via a single denoiser pass.

    With a catalog, self-attention runs on kept tokens only and no recovery
    happens on the diagnostics path; the conflict score then works on
    kept-token maps. With fewer than two subject tokens the conflict score
    is 0 (no pairs exist).
    """
    ev = _evaluate(
        dist.mu, dist.log_sigma, dist.z_frozen, pipeline, prune,
        lambda_kl=0.0, tau_cross=tau_cross, tau_self=tau_self, want_grad=False,
    )
    return ev.scores


@dataclass
class RoundRecord:
    """One sampling round of the optimizer: its trace and where it ended."""

    round_index: int
    trace: list[float]
    score_trace: list[ValidityScores]
    stopped_early: bool

    @property
    def final_scores(self) -> ValidityScores:
        return self.score_trace[-1]


@dataclass
class OptimizeResult:
    distribution: NoiseDistribution
    scores: ValidityScores
    trace: list[float]
    kl: float
    best_round: int
    rounds: list[RoundRecord] = field(default_factory=list)


def optimize_noise(
    config: MapperConfig,
    pipeline: PipelineHandle,
    seed: int,
    prune: PruneCatalog | None = None,
) -> OptimizeResult:
    """Two-stage noise search: inner gradient descent, outer restarts.

    Every round starts from mu = 0, sigma = 1 with a fresh frozen draw, runs
    plain gradient descent on the joint loss and stops early once both
    validity thresholds hold; a valid round also ends the outer loop. The
    returned candidate is the evaluated point with the lowest combined score
    across all rounds, so non-convergence is not an error, only valid=False.
    """
    dim = pipeline.latent_dim
    best = None  # (combined, round_idx, mu, log_sigma, z, scores, kl)
    rounds: list[RoundRecord] = []
    for r in range(config.outer_rounds):
        start = NoiseDistribution.standard(dim, seed, stream=r)
        mu = start.mu
        log_sigma = start.log_sigma
        z = start.z_frozen
        trace: list[float] = []
        score_trace: list[ValidityScores] = []
        stopped_early = False
        for step in range(config.inner_steps + 1):
            want_grad = config.gradient_mode == "analytic"
            ev = _evaluate(
                mu, log_sigma, z, pipeline, prune, config.lambda_kl,
                config.tau_cross, config.tau_self, want_grad=want_grad,
            )
            trace.append(ev.loss)
            score_trace.append(ev.scores)
            combined = ev.scores.combined
            if best is None or combined < best[0]:
                best = (combined, r, mu.copy(), log_sigma.copy(), z, ev.scores, ev.kl)
            if ev.scores.valid:
                stopped_early = True
                break
            if step == config.inner_steps:
                break
            if want_grad:
                g_mu, g_ls = ev.grad_mu, ev.grad_log_sigma
            else:
                g_mu, g_ls = finite_difference_gradient(
                    mu, log_sigma, z, pipeline, prune,
                    config.lambda_kl, config.fd_epsilon,
                )
            mu = mu - config.learning_rate * g_mu
            log_sigma = log_sigma - config.learning_rate * g_ls
        rounds.append(RoundRecord(r, trace, score_trace, stopped_early))
        if stopped_early:
            break
    _, best_round, mu, log_sigma, z, scores, kl = best
    dist = NoiseDistribution(mu=mu, log_sigma=log_sigma, z_frozen=z, seed=seed)
    return OptimizeResult(
        distribution=dist,
        scores=scores,
        trace=rounds[best_round].trace,
        kl=kl,
        best_round=best_round,
        rounds=rounds,
    )
