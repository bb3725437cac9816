"""Similarity-based token pruning with maximum-similarity recovery.

Base tokens are the per-patch winners of a noisy aggregated-similarity
score, pruned tokens are the non-base tokens most similar to some base
token, and pruned outputs are recovered by copying the post-layer output of
their most similar base. Pruning applies only to self-attention layers;
cross-attention never goes through this module.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .attn_core import (
    AttentionLayerParams,
    DimensionMismatchError,
    TokenMatrix,
    cosine_similarity_matrix,
    softmax_attention,
)


@dataclass(frozen=True)
class PruneCatalog:
    """Frozen pruning plan for one token geometry.

    base_indices and prune_indices are disjoint sorted flat-index arrays;
    recovery_map sends each pruned index to the base index whose output
    feature it will copy. Immutable after construction so one catalog can be
    shared between the diagnostics and generation stages.
    """

    base_indices: np.ndarray
    prune_indices: np.ndarray
    recovery_map: dict[int, int]
    gamma: float
    patch_size: int
    noise_sigma: float
    seed: int
    height: int
    width: int
    kept_indices: np.ndarray = field(init=False)

    def __post_init__(self):
        base = np.asarray(self.base_indices, dtype=np.int64)
        prune = np.asarray(self.prune_indices, dtype=np.int64)
        object.__setattr__(self, "base_indices", base)
        object.__setattr__(self, "prune_indices", prune)
        if np.intersect1d(base, prune).size:
            raise ValueError("base and prune index sets must be disjoint")
        for i in prune:
            target = self.recovery_map.get(int(i))
            if target is None or target not in set(base.tolist()):
                raise ValueError(f"pruned token {int(i)} lacks a base recovery target")
        n = self.height * self.width
        kept = np.setdiff1d(np.arange(n, dtype=np.int64), prune)
        object.__setattr__(self, "kept_indices", kept)

    @property
    def n_tokens(self) -> int:
        return self.height * self.width

    @property
    def n_pruned(self) -> int:
        return int(self.prune_indices.size)

    @property
    def n_base(self) -> int:
        return int(self.base_indices.size)

    def matches_geometry(self, tokens: TokenMatrix) -> bool:
        return tokens.height == self.height and tokens.width == self.width

    def summary(self) -> dict:
        """Compact report record: sizes, seeds and index checksums."""
        return {
            "n_base": self.n_base,
            "n_pruned": self.n_pruned,
            "gamma": self.gamma,
            "patch_size": self.patch_size,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "base_checksum": _index_checksum(self.base_indices),
            "prune_checksum": _index_checksum(self.prune_indices),
            "recovery_checksum": _index_checksum(
                np.array(
                    [self.recovery_map[int(i)] for i in self.prune_indices],
                    dtype=np.int64,
                )
            ),
        }

    def to_payload(self) -> dict:
        """Full serializable form (index lists + seeds) for audits."""
        return {
            "height": self.height,
            "width": self.width,
            "gamma": self.gamma,
            "patch_size": self.patch_size,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "base_indices": [int(i) for i in self.base_indices],
            "prune_indices": [int(i) for i in self.prune_indices],
            "recovery_map": {
                str(int(i)): self.recovery_map[int(i)] for i in self.prune_indices
            },
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "PruneCatalog":
        return cls(
            base_indices=np.array(payload["base_indices"], dtype=np.int64),
            prune_indices=np.array(payload["prune_indices"], dtype=np.int64),
            recovery_map={int(k): int(v) for k, v in payload["recovery_map"].items()},
            gamma=payload["gamma"],
            patch_size=payload["patch_size"],
            noise_sigma=payload["noise_sigma"],
            seed=payload["seed"],
            height=payload["height"],
            width=payload["width"],
        )


def _index_checksum(indices: np.ndarray) -> str:
    payload = ",".join(str(int(i)) for i in indices).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def sim_scores(
    tokens: TokenMatrix, noise_sigma: float | None, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise cosine similarities and noisy aggregated per-token scores.

    SimScore_i is the i-th row sum of the similarity matrix. With
    noise_sigma None the scale-relative default 0.01 * mean|SimScore| is
    used; with noise_sigma 0 the scores are returned exactly, consuming no
    randomness. Noise draws come one per token in index order from a
    dedicated seeded stream so the result is reproducible.
    """
    sim = cosine_similarity_matrix(tokens)
    scores = sim.sum(axis=1)
    sigma = resolve_noise_sigma(scores, noise_sigma)
    if sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return sim, scores.copy()
    rng = np.random.default_rng(seed)
    return sim, scores + sigma * rng.standard_normal(scores.size)


def resolve_noise_sigma(scores: np.ndarray, noise_sigma: float | None) -> float:
    """None means the scale-relative default 0.01 * mean(|SimScore|)."""
    if noise_sigma is None:
        return 0.01 * float(np.mean(np.abs(scores)))
    return float(noise_sigma)


def select_base_tokens(
    noisy_scores: np.ndarray, height: int, width: int, patch_size: int
) -> np.ndarray:
    """Per-patch argmax of the noisy scores, one base token per s x s patch.

    Ties break toward the smallest flat index. The patch size must tile the
    grid exactly; ragged patches are rejected.
    """
    noisy_scores = np.asarray(noisy_scores, dtype=np.float64)
    if noisy_scores.shape != (height * width,):
        raise DimensionMismatchError(
            f"need {height * width} scores for a {height}x{width} grid, "
            f"got {noisy_scores.shape}",
            axes=("scores", "height*width"),
        )
    s = patch_size
    if s < 1 or height % s or width % s:
        raise ValueError(
            f"patch size {s} must divide both height {height} and width {width}"
        )
    grid = noisy_scores.reshape(height, width)
    base = []
    for ph in range(height // s):
        for pw in range(width // s):
            patch = grid[ph * s : (ph + 1) * s, pw * s : (pw + 1) * s]
            local = int(np.argmax(patch))  # first max in row-major scan
            r, c = divmod(local, s)
            base.append((ph * s + r) * width + (pw * s + c))
    return np.sort(np.array(base, dtype=np.int64))


def select_pruned_tokens(
    sim: np.ndarray, base_indices: np.ndarray, k: int
) -> tuple[np.ndarray, dict[int, int]]:
    """Top-K non-base tokens by maximum similarity to any base token.

    Returns the pruned index set (sorted) and the pruned -> base recovery
    mapping. All ties (base argmax and the top-K boundary) break toward the
    smallest index.
    """
    sim = np.asarray(sim, dtype=np.float64)
    n = sim.shape[0]
    base = np.sort(np.asarray(base_indices, dtype=np.int64))
    candidates = np.setdiff1d(np.arange(n, dtype=np.int64), base)
    if k < 0 or k > candidates.size:
        raise ValueError(
            f"K={k} out of range: only {candidates.size} non-base tokens available"
        )
    if k == 0:
        return np.array([], dtype=np.int64), {}
    to_base = sim[np.ix_(candidates, base)]
    best_col = np.argmax(to_base, axis=1)  # first max = smallest base index
    best_sim = to_base[np.arange(candidates.size), best_col]
    # Sort by similarity descending, then candidate index ascending.
    order = np.lexsort((candidates, -best_sim))
    chosen = order[:k]
    pruned = candidates[chosen]
    recovery = {
        int(candidates[j]): int(base[best_col[j]]) for j in chosen
    }
    return np.sort(pruned), recovery


def build_catalog(
    tokens: TokenMatrix,
    gamma: float,
    patch_size: int,
    noise_sigma: float | None = None,
    seed: int = 0,
) -> PruneCatalog:
    """Build the full pruning plan for one token matrix.

    K = round(gamma * N) rounded half-up, clamped so at least the base
    tokens survive.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    sim, noisy = sim_scores(tokens, noise_sigma, seed)
    sigma = resolve_noise_sigma(sim.sum(axis=1), noise_sigma)
    base = select_base_tokens(noisy, tokens.height, tokens.width, patch_size)
    n = tokens.n_tokens
    k = int(np.floor(gamma * n + 0.5))
    k = min(k, n - base.size)
    pruned, recovery = select_pruned_tokens(sim, base, k)
    return PruneCatalog(
        base_indices=base,
        prune_indices=pruned,
        recovery_map=recovery,
        gamma=gamma,
        patch_size=patch_size,
        noise_sigma=sigma,
        seed=seed,
        height=tokens.height,
        width=tokens.width,
    )


def pruned_self_attention(
    tokens: TokenMatrix,
    catalog: PruneCatalog,
    layer: AttentionLayerParams,
) -> TokenMatrix:
    """Self-attention over kept tokens only, with recovery for pruned rows.

    Queries, keys and values all come from the kept subset. Each pruned
    output row is the copied post-layer output of its recovery base, so the
    result has the full N rows in the original order.
    """
    if not catalog.matches_geometry(tokens):
        raise DimensionMismatchError(
            f"catalog built for {catalog.height}x{catalog.width} grid, tokens are "
            f"{tokens.height}x{tokens.width}",
            axes=("height", "width"),
        )
    kept = catalog.kept_indices
    x = tokens.data
    x_keep = x[kept]
    q = x_keep @ layer.w_query
    k = x_keep @ layer.w_key
    v = x_keep @ layer.w_value
    attended, _ = softmax_attention(q, k, v)
    out_keep = x_keep + attended @ layer.w_output
    out = np.empty_like(x)
    out[kept] = out_keep
    if catalog.n_pruned:
        kept_pos = {int(idx): row for row, idx in enumerate(kept)}
        for i in catalog.prune_indices:
            out[int(i)] = out_keep[kept_pos[catalog.recovery_map[int(i)]]]
    return TokenMatrix(out, tokens.height, tokens.width)


def attention_op_count(n_tokens: int, n_pruned: int, channels: int) -> tuple[int, int]:
    """Multiply-accumulate counts of QK^T plus weights-times-V.

    Recovery copies cost zero MACs, so the pruned count is just the kept
    token count squared.
    """
    if not 0 <= n_pruned < n_tokens:
        raise ValueError(f"need 0 <= K < N, got K={n_pruned}, N={n_tokens}")
    baseline = 2 * n_tokens * n_tokens * channels
    kept = n_tokens - n_pruned
    return baseline, 2 * kept * kept * channels
