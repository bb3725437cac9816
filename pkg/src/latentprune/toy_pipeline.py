"""Deterministic toy latent-diffusion stand-in.

A two-block denoiser (one cross-attention, one self-attention, residual
pointwise MLP) with seeded frozen random weights, driven by a DDPM sampler
with classifier-free guidance. The network is untrained on purpose: the
attention diagnostics, noise optimization and pruning mechanics are all
well-defined on any attention-bearing network, and image quality is out of
scope at this scale.

The attention front (everything up to and including the self-attention
weights) is exposed twice: a plain forward for sampling and scoring, and a
taped forward plus hand-written backward so the noise optimizer can get
analytic gradients of map-derived losses without an autograd framework.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attn_core import (
    AttentionLayerParams,
    CrossAttnMaps,
    DimensionMismatchError,
    SelfAttnMaps,
    TokenMatrix,
    softmax_attention,
    softmax_rows,
)
from .sim_prune import PruneCatalog, attention_op_count, pruned_self_attention

DEFAULT_VOCAB_SIZE = 64


@dataclass
class PromptSpec:
    """Synthetic prompt: token ids, subject positions and their embeddings."""

    token_ids: list[int]
    subject_indices: list[int]
    embeddings: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        m = len(self.token_ids)
        if m < 1:
            raise ValueError("prompt needs at least one token")
        if self.embeddings.shape[0] != m:
            raise DimensionMismatchError(
                f"{m} token ids but {self.embeddings.shape[0]} embedding rows",
                axes=("tokens", "embeddings"),
            )
        for idx in self.subject_indices:
            if not 0 <= idx < m:
                raise ValueError(
                    f"subject index {idx} outside prompt of length {m}"
                )

    @property
    def n_tokens(self) -> int:
        return len(self.token_ids)

    def unconditional(self) -> "PromptSpec":
        """Null-prompt twin for classifier-free guidance: zero embeddings."""
        return PromptSpec(
            token_ids=list(self.token_ids),
            subject_indices=list(self.subject_indices),
            embeddings=np.zeros_like(self.embeddings),
        )


@dataclass
class PipelineHandle:
    """Frozen toy pipeline: geometry, schedule, prompt and seeded weights."""

    height: int
    width: int
    latent_channels: int
    text_channels: int
    attn_dim: int
    hidden_dim: int
    num_steps: int
    guidance_scale: float
    seed: int
    prompt: PromptSpec
    betas: np.ndarray
    cross_layer: AttentionLayerParams
    self_layer: AttentionLayerParams
    w_mlp_in: np.ndarray
    w_mlp_out: np.ndarray
    w_eps: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.shape != (self.num_steps,):
            raise DimensionMismatchError(
                f"schedule length {self.betas.shape} != num_steps {self.num_steps}",
                axes=("betas", "num_steps"),
            )
        if not (0 < self.betas[0] <= self.betas[-1] < 1):
            raise ValueError("noise schedule must satisfy 0 < beta_1 <= beta_T < 1")
        if np.any(np.diff(self.betas) < 0):
            raise ValueError("noise schedule must be monotone non-decreasing")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def n_tokens(self) -> int:
        return self.height * self.width

    @property
    def latent_dim(self) -> int:
        return self.n_tokens * self.latent_channels

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.latent_channels)


def token_embedding_table(seed: int, vocab_size: int, text_channels: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x7E])
    return rng.standard_normal((vocab_size, text_channels))


def make_prompt(
    token_ids: list[int],
    subject_indices: list[int],
    seed: int,
    text_channels: int,
    vocab_size: int = DEFAULT_VOCAB_SIZE,
) -> PromptSpec:
    table = token_embedding_table(seed, vocab_size, text_channels)
    for tid in token_ids:
        if not 0 <= tid < vocab_size:
            raise ValueError(f"token id {tid} outside vocab of size {vocab_size}")
    emb = table[np.asarray(token_ids, dtype=np.int64)]
    return PromptSpec(list(token_ids), list(subject_indices), emb)


def _init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)


def build_pipeline(
    height: int = 16,
    width: int = 16,
    latent_channels: int = 8,
    text_channels: int = 16,
    attn_dim: int = 16,
    hidden_dim: int = 32,
    num_steps: int = 50,
    guidance_scale: float = 7.5,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    seed: int = 0,
    token_ids: list[int] | None = None,
    subject_indices: list[int] | None = None,
) -> PipelineHandle:
    """Construct a handle with frozen seeded weights and a linear schedule."""
    if token_ids is None:
        token_ids = [0, 1, 2, 3, 4, 5]
    if subject_indices is None:
        subject_indices = [1, 3]
    prompt = make_prompt(token_ids, subject_indices, seed, text_channels)
    rng = np.random.default_rng([seed, 0x11])
    cross = AttentionLayerParams(
        w_query=_init_weight(rng, latent_channels, attn_dim),
        w_key=_init_weight(rng, text_channels, attn_dim),
        w_value=_init_weight(rng, text_channels, attn_dim),
        w_output=_init_weight(rng, attn_dim, latent_channels),
    )
    self_ = AttentionLayerParams(
        w_query=_init_weight(rng, latent_channels, attn_dim),
        w_key=_init_weight(rng, latent_channels, attn_dim),
        w_value=_init_weight(rng, latent_channels, attn_dim),
        w_output=_init_weight(rng, attn_dim, latent_channels),
    )
    return PipelineHandle(
        height=height,
        width=width,
        latent_channels=latent_channels,
        text_channels=text_channels,
        attn_dim=attn_dim,
        hidden_dim=hidden_dim,
        num_steps=num_steps,
        guidance_scale=guidance_scale,
        seed=seed,
        prompt=prompt,
        betas=np.linspace(beta_start, beta_end, num_steps),
        cross_layer=cross,
        self_layer=self_,
        w_mlp_in=_init_weight(rng, latent_channels, hidden_dim),
        w_mlp_out=_init_weight(rng, hidden_dim, latent_channels),
        w_eps=_init_weight(rng, latent_channels, latent_channels),
    )


def sinusoidal_time_embedding(t: int, dim: int) -> np.ndarray:
    """Standard sin/cos scalar timestep embedding of the given width."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    angles = t * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])
    if emb.size < dim:
        emb = np.concatenate([emb, np.zeros(dim - emb.size)])
    return emb


def _as_tokens(handle: PipelineHandle, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape == handle.latent_shape:
        return z.reshape(handle.n_tokens, handle.latent_channels)
    if z.shape == (handle.latent_dim,):
        return z.reshape(handle.n_tokens, handle.latent_channels)
    raise DimensionMismatchError(
        f"latent shape {z.shape} matches neither {handle.latent_shape} nor "
        f"({handle.latent_dim},)",
        axes=("latent",),
    )


def attention_front(
    handle: PipelineHandle,
    z: np.ndarray,
    t: int,
    prompt: PromptSpec | None = None,
    prune: PruneCatalog | None = None,
    with_tape: bool = False,
):
    """Run the denoiser up to the self-attention weights.

    Returns (cross_weights, self_weights, kept_indices, tape). cross_weights
    has shape (N, M); self_weights is (nk, nk) over kept tokens in kept
    order. The tape holds every intermediate needed by
    attention_front_backward.
    """
    if prompt is None:
        prompt = handle.prompt
    if not 1 <= t <= handle.num_steps:
        raise ValueError(f"timestep {t} outside [1, {handle.num_steps}]")
    tokens0 = _as_tokens(handle, z)
    temb = sinusoidal_time_embedding(t, handle.latent_channels)
    x0 = tokens0 + temb
    cp, sp = handle.cross_layer, handle.self_layer
    d = cp.attn_dim
    qc = x0 @ cp.w_query
    kc = prompt.embeddings @ cp.w_key
    vc = prompt.embeddings @ cp.w_value
    cross_w = softmax_rows((qc @ kc.T) / np.sqrt(d))
    x1 = x0 + (cross_w @ vc) @ cp.w_output

    if prune is not None:
        if prune.height != handle.height or prune.width != handle.width:
            raise DimensionMismatchError(
                f"catalog grid {prune.height}x{prune.width} does not match "
                f"pipeline grid {handle.height}x{handle.width}",
                axes=("height", "width"),
            )
        kept = prune.kept_indices
    else:
        kept = np.arange(handle.n_tokens, dtype=np.int64)
    xk = x1[kept]
    ds = sp.attn_dim
    qs = xk @ sp.w_query
    ks = xk @ sp.w_key
    vs = xk @ sp.w_value
    self_w = softmax_rows((qs @ ks.T) / np.sqrt(ds))

    tape = None
    if with_tape:
        tape = {
            "qc": qc, "kc": kc, "vc": vc, "cross_w": cross_w,
            "kept": kept, "qs": qs, "ks": ks, "self_w": self_w,
            "x1": x1, "xk": xk, "vs": vs,
        }
    return cross_w, self_w, kept, tape


def _softmax_rows_backward(weights: np.ndarray, d_weights: np.ndarray) -> np.ndarray:
    inner = np.sum(d_weights * weights, axis=-1, keepdims=True)
    return weights * (d_weights - inner)


def attention_front_backward(
    handle: PipelineHandle,
    tape: dict,
    d_cross_w: np.ndarray,
    d_self_w: np.ndarray,
) -> np.ndarray:
    """Backpropagate gradients on the raw attention weights to the latent.

    d_cross_w accumulates both the direct map gradient and the contribution
    flowing through the cross-attention values into the self-attention
    inputs. Text embeddings and weights are constants, so their gradients
    are dropped. Returns the flat gradient w.r.t. the input latent.
    """
    cp, sp = handle.cross_layer, handle.self_layer
    kept = tape["kept"]
    d_ss = _softmax_rows_backward(tape["self_w"], d_self_w)
    scale_s = 1.0 / np.sqrt(sp.attn_dim)
    d_qs = (d_ss @ tape["ks"]) * scale_s
    d_ks = (d_ss.T @ tape["qs"]) * scale_s
    d_xk = d_qs @ sp.w_query.T + d_ks @ sp.w_key.T
    d_x1 = np.zeros_like(tape["x1"])
    d_x1[kept] = d_xk

    d_yc = d_x1 @ cp.w_output.T
    d_cross_total = d_cross_w + d_yc @ tape["vc"].T
    d_sc = _softmax_rows_backward(tape["cross_w"], d_cross_total)
    scale_c = 1.0 / np.sqrt(cp.attn_dim)
    d_qc = (d_sc @ tape["kc"]) * scale_c
    d_x0 = d_x1 + d_qc @ cp.w_query.T
    return d_x0.reshape(-1)


def self_attention_input(
    handle: PipelineHandle,
    z: np.ndarray,
    t: int,
    prompt: PromptSpec | None = None,
) -> TokenMatrix:
    """Token features entering the self-attention block (catalog source)."""
    _, _, _, tape = attention_front(handle, z, t, prompt, None, with_tape=True)
    return TokenMatrix(tape["x1"], handle.height, handle.width)


def denoiser_forward(
    handle: PipelineHandle,
    z: np.ndarray,
    t: int,
    prompt: PromptSpec | None = None,
    prune: PruneCatalog | None = None,
) -> tuple[np.ndarray, CrossAttnMaps, SelfAttnMaps]:
    """One full denoiser pass: noise prediction plus raw attention maps.

    Cross-attention always sees every token; self-attention goes through the
    pruned path (with recovery) when a catalog is supplied. The returned
    maps are unsmoothed.
    """
    if prompt is None:
        prompt = handle.prompt
    cross_w, self_w, kept, tape = attention_front(
        handle, z, t, prompt, prune, with_tape=True
    )
    sp = handle.self_layer
    x1 = tape["x1"]
    if prune is not None and prune.n_pruned > 0:
        x1_tokens = TokenMatrix(x1, handle.height, handle.width)
        x2 = pruned_self_attention(x1_tokens, prune, sp).data
    else:
        x2 = x1 + (self_w @ tape["vs"]) @ sp.w_output

    x3 = x2 + np.tanh(x2 @ handle.w_mlp_in) @ handle.w_mlp_out
    eps = (x3 @ handle.w_eps).reshape(handle.latent_shape)

    h, w = handle.height, handle.width
    cross_maps = CrossAttnMaps(cross_w.T.reshape(prompt.n_tokens, h, w))
    self_grids = np.zeros((kept.size, h * w))
    self_grids[:, kept] = self_w
    self_maps = SelfAttnMaps(self_grids.reshape(kept.size, h, w), positions=kept)
    return eps, cross_maps, self_maps


@dataclass
class SampleResult:
    """Denoised latent plus the op-count bookkeeping for one sampling run."""

    z0: np.ndarray
    mac_baseline: int
    mac_pruned: int
    n_denoiser_calls: int

    @property
    def mac_ratio(self) -> float:
        return self.mac_pruned / self.mac_baseline


def sample(
    handle: PipelineHandle,
    initial_noise: np.ndarray,
    prune: PruneCatalog | None = None,
) -> SampleResult:
    """DDPM sampling with classifier-free guidance over num_steps steps.

    Per step the conditional and unconditional (zero-embedding) predictions
    combine as eps_u + g * (eps_c - eps_u). Deterministic given the handle
    seed, the initial noise and the catalog.
    """
    z = _as_tokens(handle, initial_noise).reshape(handle.latent_shape)
    null_prompt = handle.prompt.unconditional()
    rng = np.random.default_rng([handle.seed, 0x5A])
    g = handle.guidance_scale
    n, d = handle.n_tokens, handle.self_layer.attn_dim
    k = prune.n_pruned if prune is not None else 0
    baseline_macs, pruned_macs = attention_op_count(n, k, d)
    total_baseline = 0
    total_pruned = 0
    calls = 0

    for t in range(handle.num_steps, 0, -1):
        eps_c, _, _ = denoiser_forward(handle, z, t, handle.prompt, prune)
        eps_u, _, _ = denoiser_forward(handle, z, t, null_prompt, prune)
        calls += 2
        total_baseline += 2 * baseline_macs
        total_pruned += 2 * pruned_macs
        # g = 1 must collapse to the conditional branch exactly, not within fp.
        eps = eps_c if g == 1.0 else eps_u + g * (eps_c - eps_u)
        i = t - 1
        beta_t = handle.betas[i]
        alpha_t = handle.alphas[i]
        abar_t = handle.alpha_bars[i]
        mean = (z - (beta_t / np.sqrt(1.0 - abar_t)) * eps) / np.sqrt(alpha_t)
        if t > 1:
            abar_prev = handle.alpha_bars[i - 1]
            var = (1.0 - abar_prev) / (1.0 - abar_t) * beta_t
            z = mean + np.sqrt(var) * rng.standard_normal(z.shape)
        else:
            z = mean
    return SampleResult(
        z0=z,
        mac_baseline=total_baseline,
        mac_pruned=total_pruned,
        n_denoiser_calls=calls,
    )
