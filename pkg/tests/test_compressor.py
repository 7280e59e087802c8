import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcclab.compressor import (
    IDENTITY,
    CompressorSpec,
    Kind,
    attn_topk,
    avg_pool,
    avg_pool_matrix,
    compress,
    kmeans_compress,
    out_len,
    random_drop,
)
from vcclab.errors import ContractError, SpecError

ALL_KINDS = [Kind.IDENTITY, Kind.AVGPOOL, Kind.RANDOM_DROP, Kind.KMEANS, Kind.ATTN_TOPK, Kind.VCC_LITE]


def two_loop_avgpool(x, S):
    L = x.shape[0]
    out = []
    for j in range(math.ceil(L / S)):
        acc = np.zeros(x.shape[1])
        n = 0
        for i in range(j * S, min((j + 1) * S, L)):
            acc += x[i]
            n += 1
        out.append(acc / n)
    return np.array(out)


def partitions(n, k):
    """Every partition of range(n) into exactly k non-empty blocks (restricted growth strings)."""

    def rec(i, labels, used):
        if i == n:
            if used == k:
                yield list(labels)
            return
        for lab in range(min(used + 1, k)):
            if n - i - 1 < k - max(used, lab + 1):
                continue
            labels.append(lab)
            yield from rec(i + 1, labels, max(used, lab + 1))
            labels.pop()

    yield from rec(0, [], 0)


def sse(x, labels, k):
    return sum(((x[labels == j] - x[labels == j].mean()) ** 2).sum() for j in range(k))


def best_partition_sse(x, k):
    return min(sse(x, np.array(p), k) for p in partitions(len(x), k))


def kmeans_sse(x, res):
    return sum(((x[g] - x[g].mean()) ** 2).sum() for g in res.source_map)


def test_partition_enumerator_counts_stirling_numbers():
    assert sum(1 for _ in partitions(5, 2)) == 15
    assert sum(1 for _ in partitions(8, 4)) == 1701


@settings(max_examples=60, deadline=None)
@given(L=st.integers(1, 40), S=st.integers(1, 12), C=st.integers(1, 4), seed=st.integers(0, 10**6))
def test_avgpool_matches_two_loop_reference(L, S, C, seed):
    x = np.random.default_rng(seed).normal(size=(L, C))
    got = avg_pool(x, S).values
    np.testing.assert_allclose(got, two_loop_avgpool(x, S), rtol=0, atol=1e-12)
    np.testing.assert_allclose(avg_pool_matrix(L, S) @ x, got, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", ALL_KINDS)
@pytest.mark.parametrize("S", [1, 2, 4, 8, 16, 64])
def test_every_kind_emits_ceil_L_over_S(kind, S):
    rng = np.random.default_rng(S)
    for L in (1, 2, 3, 7, 8, 63, 64, 65, 128):
        x = rng.normal(size=(L, 3))
        spec = CompressorSpec(kind, 1, S) if kind is not Kind.IDENTITY else IDENTITY
        res = compress(spec, x, importance=rng.random(L))
        want = L if kind is Kind.IDENTITY else math.ceil(L / S)
        assert res.length == want == res.values.shape[0]
        assert res.weights.shape == (want, L)
        np.testing.assert_allclose(res.weights.sum(axis=1), 1.0)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_stride_one_is_identity(kind):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(9, 2))
    x[4] = x[2]  # a duplicate must not break k-means
    spec = CompressorSpec(kind, 1, 1)
    res = compress(spec, x, importance=rng.random(9))
    np.testing.assert_array_equal(res.values, x)
    assert res.source_map == [[i] for i in range(9)]


def test_compressors_never_lengthen():
    for L in range(1, 20):
        for S in range(1, 25):
            assert 1 <= out_len(L, S) <= L


def test_random_drop_deterministic_and_ordered():
    x = np.arange(20.0)[:, None]
    a, b = random_drop(x, 4, seed=7), random_drop(x, 4, seed=7)
    assert a.source_map == b.source_map
    idx = [g[0] for g in a.source_map]
    assert idx == sorted(idx) and len(set(idx)) == 5


def test_attn_topk_keeps_most_important_in_order():
    x = np.arange(6.0)[:, None]
    res = attn_topk(x, [0.1, 0.9, 0.3, 0.8, 0.0, 0.5], 2)
    assert [g[0] for g in res.source_map] == [1, 3, 5]


def test_attn_topk_ties_prefer_lower_index():
    res = attn_topk(np.zeros((4, 1)), [0.5, 0.5, 0.5, 0.5], 2)
    assert [g[0] for g in res.source_map] == [0, 1]


def test_attention_kinds_need_importance():
    with pytest.raises(ContractError):
        compress(CompressorSpec(Kind.ATTN_TOPK, 1, 2), np.zeros((4, 1)))


def test_attn_topk_importance_length_checked():
    with pytest.raises(ContractError):
        attn_topk(np.zeros((4, 1)), [1.0, 2.0], 2)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 8), S=st.integers(2, 4), seed=st.integers(0, 10**6))
def test_kmeans_matches_exhaustive_on_separated_scalars(n, S, seed):
    rng = np.random.default_rng(seed)
    k = math.ceil(n / S)
    # k tight clumps far apart: the optimum is unambiguous and Lloyd must find it
    centres = np.arange(k) * 100.0
    labels = np.r_[np.arange(k), rng.integers(0, k, n - k)]
    x = (centres[labels] + rng.uniform(-1, 1, n))[:, None]
    res = kmeans_compress(x, S, seed=seed)
    assert kmeans_sse(x, res) == pytest.approx(best_partition_sse(x, k), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 8), S=st.integers(1, 4), seed=st.integers(0, 10**6))
def test_kmeans_is_a_lloyd_fixed_point_no_better_than_optimum(n, S, seed):
    x = np.random.default_rng(seed).normal(size=(n, 1))
    k = math.ceil(n / S)
    res = kmeans_compress(x, S, iters=50, seed=seed)
    assert kmeans_sse(x, res) >= best_partition_sse(x, k) - 1e-9
    assert sorted(i for g in res.source_map for i in g) == list(range(n))
    assert all(g for g in res.source_map)
    firsts = [g[0] for g in res.source_map]
    assert firsts == sorted(firsts)


def test_kmeans_deterministic_per_seed():
    x = np.random.default_rng(0).normal(size=(30, 3))
    assert kmeans_compress(x, 4, seed=1).source_map == kmeans_compress(x, 4, seed=1).source_map


def test_kmeans_all_identical_points():
    res = kmeans_compress(np.ones((6, 2)), 2)
    assert res.length == 3 and all(g for g in res.source_map)


class TestSpec:
    def test_parse_default_kind_is_avgpool(self):
        s = CompressorSpec.parse("K=2,S=8")
        assert (s.kind, s.layer, s.stride) == (Kind.AVGPOOL, 2, 8)

    def test_parse_kind_and_identity(self):
        assert CompressorSpec.parse("kind=kmeans,K=1,S=4,seed=3").kind is Kind.KMEANS
        assert CompressorSpec.parse("identity").is_identity

    def test_parse_rejects_garbage(self):
        with pytest.raises(SpecError):
            CompressorSpec.parse("K2S8")
        with pytest.raises(SpecError):
            CompressorSpec.parse("K=2,S=8,bogus=1")

    def test_invalid_values(self):
        with pytest.raises(SpecError):
            CompressorSpec(Kind.AVGPOOL, 2, 0)
        with pytest.raises(SpecError):
            CompressorSpec(Kind.AVGPOOL, 0, 2)
        with pytest.raises(SpecError):
            CompressorSpec(Kind.AVGPOOL, 9, 2).validate(8)

    def test_identity_ignores_layer_and_stride(self):
        CompressorSpec(Kind.IDENTITY, 0, 0).validate(1)
        assert IDENTITY.out_len(17) == 17

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_dict_round_trip(self, kind):
        s = CompressorSpec(kind, 3, 4, seed=5, head_reduce="max", kmeans_iters=7)
        assert CompressorSpec.from_dict(s.to_dict()) == s

    def test_kind_aliases(self):
        assert Kind.parse("FastV") is Kind.ATTN_TOPK
        assert Kind.parse("avg") is Kind.AVGPOOL
        with pytest.raises(SpecError):
            Kind.parse("median")
