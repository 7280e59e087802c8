import math
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from vcclab.accounting import (
    REPORTED_PLAN_TOKENS,
    compression_ratio,
    compute_report,
    flops_forward,
    layer_lengths,
    param_count,
    percent,
    plan_average,
    token_total,
)
from vcclab.compressor import IDENTITY, avgpool
from vcclab.errors import SpecError
from vcclab.model import ModelConfig, build_model
from vcclab.schedule import SCHEME_NAMES, named_scheme


def simulate_tokens(N, L, K, S):
    """Walk the layers one by one, shrinking the visual span after layer K."""
    n, total = L, 0
    for layer in range(1, N + 1):
        total += n
        if layer == K:
            n = len(range(0, L, S))
    return total


@pytest.mark.parametrize(
    "K,S,tokens,pct",
    [(2, 8, 3312, 557), (16, 8, 10368, 178), (2, 2, 9792, 188), (16, 2, 13824, 133), (1, 64, 855, 2156)],
)
def test_reported_token_counts(K, S, tokens, pct):
    assert token_total(32, 576, K, S) == tokens
    assert compression_ratio(32, 576, K, S)[1] == pct


def test_uncompressed_reference():
    assert token_total(32, 576, 32, 1) == 18432
    assert compute_report(32, 576, None, None).cr_percent == 100


@pytest.mark.parametrize("K,S,pct", [(2, 8, 291), (4, 8, 178), (2, 2, 160), (4, 2, 133)])
def test_desk_scale_ratios(K, S, pct):
    assert compression_ratio(8, 64, K, S)[1] == pct


@given(N=st.integers(1, 40), L=st.integers(1, 700), data=st.data())
def test_token_total_matches_layer_walk(N, L, data):
    K = data.draw(st.integers(1, N))
    S = data.draw(st.integers(1, 2 * L))
    assert token_total(N, L, K, S) == simulate_tokens(N, L, K, S)
    r, _ = compression_ratio(N, L, K, S)
    assert r >= 1
    assert sum(layer_lengths(avgpool(K, S), N, L + 5, L)) - 5 * N == simulate_tokens(N, L, K, S)


@given(N=st.integers(1, 40), L=st.integers(1, 700))
def test_no_compression_fixed_points(N, L):
    for K in (1, N):
        assert compression_ratio(N, L, K, 1) == (Fraction(1), 100)
    assert compression_ratio(N, L, N, 8)[0] == 1


def test_percent_rounds_half_away_from_zero():
    assert percent(Fraction(1, 200)) == 1  # 0.5%
    assert percent(Fraction(2, 3)) == 67
    assert percent(Fraction(5565, 1000)) == 557


@pytest.mark.parametrize("args", [(0, 5, 1, 1), (4, 0, 1, 1), (4, 5, 0, 1), (4, 5, 5, 1), (4, 5, 1, 0)])
def test_invalid_arguments(args):
    with pytest.raises(SpecError):
        token_total(*args)


def test_layer_lengths_identity():
    assert layer_lengths(IDENTITY, 3, 10, 4) == [10, 10, 10]
    assert layer_lengths(avgpool(1, 4), 3, 10, 4) == [10, 7, 7]


def test_flops_hand_computed():
    # d=2, vocab=3, two layers of lengths 4 and 2
    want = (24 * 4 * 4 + 4 * 16 * 2) + (24 * 2 * 4 + 4 * 4 * 2) + 2 * 2 * 2 * 3
    assert flops_forward((2, 3), [4, 2]) == want


def test_flops_identity_dominates_compressed():
    base = compute_report(32, 576, None, None).flops_forward
    for K, S in [(2, 8), (16, 2), (1, 64)]:
        assert compute_report(32, 576, K, S).flops_forward < base


def test_degenerate_last_layer_flagged():
    rep = compute_report(8, 64, 8, 4)
    assert rep.tokens == 512 and rep.cr_percent == 100 and rep.notes


def test_param_count_matches_built_model():
    for cfg in [ModelConfig(), ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, visual_len=4, max_seq=24)]:
        m = build_model(cfg, 0)
        assert param_count(cfg) == sum(p.data.size for p in m.parameters())


@pytest.mark.parametrize("name", SCHEME_NAMES)
def test_plan_average_is_fraction_weighted_mean(name):
    plan = named_scheme(name)
    avg = plan_average(plan, 32, 576)
    want = sum(Fraction(st.fraction).limit_denominator(100) * t for st, t in zip(plan.stages, avg.stage_tokens))
    assert avg.tokens == pytest.approx(float(want))
    assert avg.reported_tokens == REPORTED_PLAN_TOKENS[name]


def test_plan_average_discrepancy_is_flagged():
    # the two-stage mean of 3312 and 18432 is 10872, not the reported 10062
    avg = plan_average(named_scheme("two"), 32, 576)
    assert avg.tokens == pytest.approx(10872)
    assert avg.reconciled is False
    assert plan_average(named_scheme("single"), 32, 576).reconciled is True


def test_report_serialises():
    rep = compute_report(32, 576, 2, 8)
    d = rep.to_dict()
    assert d["cr"] == "128/23" and d["tokens"] == 3312
    assert "tokens=3312 cr=557%" in rep.to_text()
    assert math.isclose(d["cr_value"], 128 / 23)
