import numpy as np
import pytest

from latentprune.attn_core import (
    AttentionLayerParams,
    DimensionMismatchError,
    TokenMatrix,
    cosine_similarity_matrix,
    softmax_attention,
)
from latentprune.sim_prune import (
    attention_op_count,
    build_catalog,
    pruned_self_attention,
    select_base_tokens,
    select_pruned_tokens,
    sim_scores,
)


def random_tokens(seed, height=4, width=4, channels=6):
    rng = np.random.default_rng(seed)
    return TokenMatrix(rng.standard_normal((height * width, channels)), height, width)


def make_layer(seed, channels, attn_dim=None):
    attn_dim = attn_dim or channels
    rng = np.random.default_rng(seed)
    return AttentionLayerParams(
        w_query=rng.standard_normal((channels, attn_dim)) / np.sqrt(channels),
        w_key=rng.standard_normal((channels, attn_dim)) / np.sqrt(channels),
        w_value=rng.standard_normal((channels, attn_dim)) / np.sqrt(channels),
        w_output=rng.standard_normal((attn_dim, channels)) / np.sqrt(attn_dim),
    )


class TestSimScores:
    def test_zero_noise_is_exact(self):
        t = random_tokens(0)
        sim, noisy = sim_scores(t, noise_sigma=0.0, seed=9)
        np.testing.assert_array_equal(noisy, sim.sum(axis=1))

    def test_orthogonal_tokens_score_one(self):
        t = TokenMatrix(np.eye(4), 2, 2)
        _, noisy = sim_scores(t, noise_sigma=0.0, seed=0)
        np.testing.assert_allclose(noisy, 1.0, atol=1e-12)

    def test_three_token_fixture_row_sums(self):
        # Rows: e1, e2, and the unit bisector of e1/e2.
        t = TokenMatrix(
            np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, -1.0]]), 2, 2
        )
        sim, noisy = sim_scores(t, noise_sigma=0.0, seed=0)
        np.testing.assert_array_equal(noisy, sim.sum(axis=1))
        r = 1 / np.sqrt(2)
        np.testing.assert_allclose(noisy[2], r + r + 1.0 + (-r), atol=1e-12)

    def test_noise_is_seed_deterministic(self):
        t = random_tokens(1)
        _, a = sim_scores(t, noise_sigma=0.5, seed=7)
        _, b = sim_scores(t, noise_sigma=0.5, seed=7)
        _, c = sim_scores(t, noise_sigma=0.5, seed=8)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_auto_sigma_is_scale_relative(self):
        t = random_tokens(2)
        sim, _ = sim_scores(t, noise_sigma=None, seed=3)
        scores = sim.sum(axis=1)
        expected = 0.01 * np.mean(np.abs(scores))
        cat = build_catalog(t, gamma=0.2, patch_size=2, noise_sigma=None, seed=3)
        np.testing.assert_allclose(cat.noise_sigma, expected, atol=1e-12)


class TestSelectBaseTokens:
    def test_single_patch_is_global_argmax(self):
        scores = np.array([0.1, 0.9, 0.3, 0.2])
        assert select_base_tokens(scores, 2, 2, 2).tolist() == [1]

    def test_monotone_scores_pick_patch_corners(self):
        scores = np.arange(16, dtype=float)
        assert select_base_tokens(scores, 4, 4, 2).tolist() == [5, 7, 13, 15]

    def test_ties_break_to_smallest_flat_index(self):
        scores = np.zeros(16)
        assert select_base_tokens(scores, 4, 4, 2).tolist() == [0, 2, 8, 10]

    def test_matches_brute_force_on_random_grids(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            scores = rng.standard_normal(64)
            got = select_base_tokens(scores, 8, 8, 2)
            expected = []
            for ph in range(4):
                for pw in range(4):
                    cells = [
                        (ph * 2 + r) * 8 + (pw * 2 + c)
                        for r in range(2) for c in range(2)
                    ]
                    best = max(cells, key=lambda i: (scores[i], -i))
                    expected.append(best)
            assert got.tolist() == sorted(expected)

    def test_rejects_non_tiling_patch(self):
        with pytest.raises(ValueError):
            select_base_tokens(np.zeros(12), 3, 4, 2)


class TestSelectPrunedTokens:
    def test_k_zero_is_noop(self):
        sim = cosine_similarity_matrix(np.random.default_rng(0).standard_normal((9, 3)))
        pruned, recovery = select_pruned_tokens(sim, np.array([0, 4]), 0)
        assert pruned.size == 0 and recovery == {}

    def test_identical_token_is_pruned_first(self):
        data = np.random.default_rng(5).standard_normal((4, 3))
        data[3] = data[0]  # duplicate of the base token
        sim = cosine_similarity_matrix(data)
        pruned, recovery = select_pruned_tokens(sim, np.array([0]), 1)
        assert pruned.tolist() == [3]
        assert recovery == {3: 0}

    def test_matches_brute_force_fixture(self):
        rng = np.random.default_rng(17)
        data = rng.standard_normal((16, 5))
        sim = cosine_similarity_matrix(data)
        base = select_base_tokens(sim.sum(axis=1), 4, 4, 2)
        got_pruned, got_rec = select_pruned_tokens(sim, base, 6)

        base_set = set(base.tolist())
        ranked = []
        for i in range(16):
            if i in base_set:
                continue
            best = max(base.tolist(), key=lambda j: (sim[i, j], -j))
            ranked.append((-sim[i, best], i, best))
        ranked.sort()
        expected = sorted(i for _, i, _ in ranked[:6])
        expected_rec = {i: b for _, i, b in ranked[:6]}
        assert got_pruned.tolist() == expected
        assert got_rec == expected_rec

    def test_rejects_excessive_k(self):
        sim = np.eye(4)
        with pytest.raises(ValueError):
            select_pruned_tokens(sim, np.array([0]), 4)


class TestCatalog:
    def test_disjoint_and_exact_k(self):
        rng = np.random.default_rng(31)
        for seed in range(20):
            t = random_tokens(seed, 8, 8, 4)
            gamma = float(rng.uniform(0, 0.7))
            cat = build_catalog(t, gamma, 2, noise_sigma=None, seed=seed)
            assert np.intersect1d(cat.base_indices, cat.prune_indices).size == 0
            k = min(int(np.floor(gamma * 64 + 0.5)), 64 - 16)
            assert cat.n_pruned == k

    def test_one_base_per_patch(self):
        for seed in range(10):
            t = random_tokens(seed, 8, 8, 4)
            cat = build_catalog(t, 0.4, 2, noise_sigma=None, seed=seed)
            grid = np.zeros(64, dtype=int)
            grid[cat.base_indices] = 1
            patches = grid.reshape(4, 2, 4, 2).transpose(0, 2, 1, 3).reshape(16, 4)
            assert np.all(patches.sum(axis=1) == 1)

    def test_deterministic_with_zero_noise(self):
        t = random_tokens(3)
        a = build_catalog(t, 0.4, 2, noise_sigma=0.0, seed=1)
        b = build_catalog(t, 0.4, 2, noise_sigma=0.0, seed=999)
        assert a.base_indices.tolist() == b.base_indices.tolist()
        assert a.prune_indices.tolist() == b.prune_indices.tolist()
        assert a.recovery_map == b.recovery_map

    def test_reuse_across_stages_is_identical(self):
        """One catalog serves diagnostics and generation with the same indices."""
        t = random_tokens(4)
        cat = build_catalog(t, 0.4, 2, noise_sigma=None, seed=12)
        again = build_catalog(t, 0.4, 2, noise_sigma=None, seed=12)
        assert cat.prune_indices.tolist() == again.prune_indices.tolist()
        assert cat.summary() == again.summary()

    def test_summary_fields(self):
        t = random_tokens(6)
        cat = build_catalog(t, 0.25, 2, noise_sigma=0.0, seed=2)
        s = cat.summary()
        assert s["n_base"] == 4 and s["n_pruned"] == 4
        assert len(s["base_checksum"]) == 16

    def test_payload_round_trip(self):
        import json

        from latentprune.sim_prune import PruneCatalog

        t = random_tokens(8, 8, 8, 4)
        cat = build_catalog(t, 0.4, 2, noise_sigma=None, seed=9)
        payload = json.loads(json.dumps(cat.to_payload()))
        back = PruneCatalog.from_payload(payload)
        assert back.base_indices.tolist() == cat.base_indices.tolist()
        assert back.prune_indices.tolist() == cat.prune_indices.tolist()
        assert back.recovery_map == cat.recovery_map
        assert back.summary() == cat.summary()


class TestPrunedSelfAttention:
    def test_k_zero_bit_identical_to_dense(self):
        t = random_tokens(7)
        layer = make_layer(8, t.channels)
        cat = build_catalog(t, 0.0, 2, noise_sigma=0.0, seed=0)
        out = pruned_self_attention(t, cat, layer)
        attended, _ = softmax_attention(
            t.data @ layer.w_query, t.data @ layer.w_key, t.data @ layer.w_value
        )
        dense = t.data + attended @ layer.w_output
        assert np.array_equal(out.data, dense)

    def test_duplicate_rows_recover_exactly(self):
        """A grid of identical tokens loses nothing to pruning."""
        row = np.array([0.4, -1.2, 0.7])
        t = TokenMatrix(np.tile(row, (16, 1)), 4, 4)
        layer = make_layer(9, 3)
        cat = build_catalog(t, 0.4, 2, noise_sigma=0.0, seed=0)
        assert cat.n_pruned == 6
        out = pruned_self_attention(t, cat, layer)
        attended, _ = softmax_attention(
            t.data @ layer.w_query, t.data @ layer.w_key, t.data @ layer.w_value
        )
        dense = t.data + attended @ layer.w_output
        np.testing.assert_allclose(out.data, dense, atol=1e-9)

    def test_kept_rows_match_masked_dense_oracle(self):
        """Kept outputs equal a dense implementation restricted to kept rows."""
        t = random_tokens(10, 8, 8, 6)
        layer = make_layer(11, 6)
        cat = build_catalog(t, 0.4, 2, noise_sigma=None, seed=3)
        out = pruned_self_attention(t, cat, layer)

        kept = cat.kept_indices
        sub = t.data[kept]
        q, k, v = sub @ layer.w_query, sub @ layer.w_key, sub @ layer.w_value
        scores = q @ k.T / np.sqrt(layer.attn_dim)
        w = np.exp(scores - scores.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        oracle = sub + (w @ v) @ layer.w_output
        np.testing.assert_allclose(out.data[kept], oracle, atol=1e-9)

    def test_pruned_rows_copy_their_base(self):
        t = random_tokens(12, 8, 8, 6)
        layer = make_layer(13, 6)
        cat = build_catalog(t, 0.4, 2, noise_sigma=None, seed=5)
        out = pruned_self_attention(t, cat, layer)
        for i in cat.prune_indices:
            b = cat.recovery_map[int(i)]
            assert np.array_equal(out.data[int(i)], out.data[b])

    def test_geometry_mismatch_rejected(self):
        t = random_tokens(14, 4, 4, 6)
        other = random_tokens(15, 8, 8, 6)
        cat = build_catalog(other, 0.4, 2, noise_sigma=0.0, seed=0)
        with pytest.raises(DimensionMismatchError):
            pruned_self_attention(t, cat, make_layer(16, 6))


class TestOpCount:
    def test_k_zero_equals_baseline(self):
        baseline, pruned = attention_op_count(64, 0, 32)
        assert baseline == pruned

    def test_forty_percent_ratio(self):
        n = 100
        baseline, pruned = attention_op_count(n, 40, 16)
        assert pruned / baseline == 0.36

    def test_arithmetic_fixture(self):
        baseline, pruned = attention_op_count(64, 26, 32)
        assert baseline == 262144
        assert pruned == 92416

    def test_strictly_decreasing_in_k(self):
        counts = [attention_op_count(64, k, 8)[1] for k in range(64)]
        assert all(a > b for a, b in zip(counts, counts[1:]))

    def test_rejects_bad_k(self):
        with pytest.raises(ValueError):
            attention_op_count(8, 8, 4)
        with pytest.raises(ValueError):
            attention_op_count(8, -1, 4)
