"""Deterministic linear-algebra and attention kernel shared by every other module.

Everything here is pure float64 numpy with no hidden state: identical inputs
give bit-identical outputs on a fixed host. The smoothing convolution is
written as an explicit 9-term (kernel-sized) accumulation in a fixed order so
golden tests stay bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionMismatchError(ValueError):
    """Raised when two operands disagree on an axis that must match."""

    def __init__(self, message: str, axes: tuple[str, ...] = ()):
        super().__init__(message)
        self.axes = axes


@dataclass
class TokenMatrix:
    """N x C matrix of image-token features with its spatial shape (H, W).

    Rows are flattened row-major: token (r, c) sits at flat index r * W + c.
    """

    data: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"token data must be 2-D, got shape {self.data.shape}")
        n, c = self.data.shape
        if n < 1 or c < 1:
            raise ValueError(f"token matrix needs N >= 1 and C >= 1, got {n}x{c}")
        if self.height < 1 or self.width < 1 or self.height * self.width != n:
            raise DimensionMismatchError(
                f"token count {n} does not match spatial shape "
                f"{self.height}x{self.width}",
                axes=("tokens", "height*width"),
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("token matrix contains non-finite entries")

    @property
    def n_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


@dataclass
class CrossAttnMaps:
    """Per-text-token spatial attention maps, shape (M, H, W).

    maps[i] is the probability mass text token i receives at each spatial
    cell; at every cell the mass across text tokens sums to 1.
    """

    maps: np.ndarray

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 3:
            raise ValueError(f"cross maps must be (M, H, W), got {self.maps.shape}")

    @property
    def n_text_tokens(self) -> int:
        return self.maps.shape[0]

    def validate(self, atol: float = 1e-6) -> None:
        if np.any(self.maps < -atol) or np.any(self.maps > 1 + atol):
            raise ValueError("cross-attention entries outside [0, 1]")
        sums = self.maps.sum(axis=0)
        if np.max(np.abs(sums - 1.0)) > atol:
            raise ValueError("cross-attention mass per cell does not sum to 1")


@dataclass
class SelfAttnMaps:
    """Per-position spatial attention maps, shape (R, H, W).

    Row r is the attention distribution of the token at flat grid index
    positions[r] over the whole grid. When no pruning is active R = H * W and
    positions is simply arange(N); under pruning only kept positions carry a
    row and pruned target cells hold zero mass.
    """

    maps: np.ndarray
    positions: np.ndarray = field(default=None)

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 3:
            raise ValueError(f"self maps must be (R, H, W), got {self.maps.shape}")
        if self.positions is None:
            self.positions = np.arange(self.maps.shape[0])
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.positions.shape != (self.maps.shape[0],):
            raise DimensionMismatchError(
                f"{self.maps.shape[0]} map rows but {self.positions.shape[0]} "
                "position labels",
                axes=("rows", "positions"),
            )

    def row_for_position(self, flat_index: int) -> np.ndarray:
        hits = np.nonzero(self.positions == flat_index)[0]
        if hits.size == 0:
            raise KeyError(f"no self-attention row for grid position {flat_index}")
        return self.maps[hits[0]]

    def validate(self, atol: float = 1e-6) -> None:
        if np.any(self.maps < -atol):
            raise ValueError("self-attention entries must be nonnegative")
        sums = self.maps.reshape(self.maps.shape[0], -1).sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > atol:
            raise ValueError("per-position self-attention maps do not sum to 1")


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax with row-max subtraction for stability."""
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention: softmax(Q K^T / sqrt(d)) V.

    Returns (output, weights); weights rows sum to 1 within 1e-6.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionMismatchError(
            "softmax_attention expects 2-D Q, K, V", axes=("ndim",)
        )
    if q.shape[1] != k.shape[1]:
        raise DimensionMismatchError(
            f"Q feature dim {q.shape[1]} != K feature dim {k.shape[1]}",
            axes=("q.cols", "k.cols"),
        )
    if k.shape[0] != v.shape[0]:
        raise DimensionMismatchError(
            f"K has {k.shape[0]} rows but V has {v.shape[0]}",
            axes=("k.rows", "v.rows"),
        )
    d = q.shape[1]
    if d < 1:
        raise DimensionMismatchError("attention feature dim must be >= 1", axes=("d",))
    scores = (q @ k.T) / np.sqrt(d)
    weights = softmax_rows(scores)
    return weights @ v, weights


def cosine_similarity_matrix(tokens: TokenMatrix | np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity of token rows, exactly symmetric.

    Zero-norm rows are rejected: they cannot arise from softmax-attention
    outputs plus residuals at this scale, and a silent 0/0 convention would
    hide bugs.
    """
    data = tokens.data if isinstance(tokens, TokenMatrix) else np.asarray(tokens)
    data = data.astype(np.float64, copy=False)
    norms = np.sqrt(np.einsum("ij,ij->i", data, data))
    bad = np.nonzero(norms == 0.0)[0]
    if bad.size:
        raise ValueError(f"zero-norm token row at index {int(bad[0])}")
    unit = data / norms[:, None]
    sim = unit @ unit.T
    # Mirror the upper triangle so symmetry is exact, not merely approximate.
    sim = np.triu(sim) + np.triu(sim, 1).T
    np.clip(sim, -1.0, 1.0, out=sim)
    return sim


def gaussian_kernel(kernel_size: int = 3, sigma: float = 0.5) -> np.ndarray:
    """Normalized (sums-to-1) square Gaussian kernel."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    half = kernel_size // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    dist2 = offsets[:, None] ** 2 + offsets[None, :] ** 2
    kernel = np.exp(-dist2 / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def gaussian_smooth(
    map2d: np.ndarray, kernel_size: int = 3, sigma: float = 0.5
) -> np.ndarray:
    """Convolve an H x W map with a normalized Gaussian, replicate padding.

    Replicate padding keeps constant maps fixed points and preserves mass up
    to border effects. The accumulation runs over kernel taps in a fixed
    order, so results are bit-exact across runs.
    """
    map2d = np.asarray(map2d, dtype=np.float64)
    if map2d.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {map2d.shape}")
    kernel = gaussian_kernel(kernel_size, sigma)
    half = kernel_size // 2
    padded = np.pad(map2d, half, mode="edge")
    h, w = map2d.shape
    out = np.zeros_like(map2d)
    for di in range(kernel_size):
        for dj in range(kernel_size):
            out += kernel[di, dj] * padded[di : di + h, dj : dj + w]
    return out


def gaussian_smooth_adjoint(
    grad_out: np.ndarray, kernel_size: int = 3, sigma: float = 0.5
) -> np.ndarray:
    """Transpose of gaussian_smooth as a linear map (for hand backprop).

    Gradient w.r.t. the padded array is scattered back onto the source cells
    that replicate padding copied from.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    kernel = gaussian_kernel(kernel_size, sigma)
    half = kernel_size // 2
    h, w = grad_out.shape
    grad_padded = np.zeros((h + 2 * half, w + 2 * half))
    for di in range(kernel_size):
        for dj in range(kernel_size):
            grad_padded[di : di + h, dj : dj + w] += kernel[di, dj] * grad_out
    # Each padded cell (i, j) reads map[clip(i-half), clip(j-half)].
    rows = np.clip(np.arange(h + 2 * half) - half, 0, h - 1)
    cols = np.clip(np.arange(w + 2 * half) - half, 0, w - 1)
    grad_map = np.zeros((h, w))
    np.add.at(grad_map, (rows[:, None], cols[None, :]), grad_padded)
    return grad_map


@dataclass
class AttentionLayerParams:
    """Projection weights of one attention sublayer (single head).

    w_query/w_key/w_value project inputs to the attention dimension d;
    w_output projects the attended values back to the token channel width.
    """

    w_query: np.ndarray
    w_key: np.ndarray
    w_value: np.ndarray
    w_output: np.ndarray

    @property
    def attn_dim(self) -> int:
        return self.w_query.shape[1]


def self_attention_layer(
    x: np.ndarray, params: AttentionLayerParams
) -> tuple[np.ndarray, np.ndarray]:
    """Residual self-attention sublayer: x + softmax(QK^T/sqrt(d)) V Wo.

    Returns (output, weights) with weights of shape (N, N).
    """
    q = x @ params.w_query
    k = x @ params.w_key
    v = x @ params.w_value
    attended, weights = softmax_attention(q, k, v)
    return x + attended @ params.w_output, weights


def cross_attention_layer(
    x: np.ndarray, context: np.ndarray, params: AttentionLayerParams
) -> tuple[np.ndarray, np.ndarray]:
    """Residual cross-attention sublayer; keys/values come from context rows."""
    q = x @ params.w_query
    k = context @ params.w_key
    v = context @ params.w_value
    attended, weights = softmax_attention(q, k, v)
    return x + attended @ params.w_output, weights
