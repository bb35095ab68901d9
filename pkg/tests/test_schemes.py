import math

import numpy as np
import pytest

import gradcheck as gc
from embcomp import io, schemes
from embcomp.errors import ConfigError
from embcomp.schemes import SchemeConfig, build_scheme, count_params, lookup


def test_kind_listing_is_consistent():
    assert len(schemes.KINDS) == 10
    assert schemes.BUCKETED_KINDS <= set(schemes.KINDS)
    assert schemes.MEMCOM_KINDS <= schemes.BUCKETED_KINDS
    assert schemes.HALF_WIDTH_KINDS <= schemes.BUCKETED_KINDS


@pytest.mark.parametrize("kwargs", [
    {"kind": "nope", "vocab_size": 10, "embed_dim": 4},
    {"kind": "uncompressed", "vocab_size": 0, "embed_dim": 4},
    {"kind": "uncompressed", "vocab_size": 10, "embed_dim": 0},
    {"kind": "naive_hash", "vocab_size": 10, "embed_dim": 4, "buckets": 0},
    {"kind": "naive_hash", "vocab_size": 10, "embed_dim": 4, "buckets": 11},
    {"kind": "double_hash", "vocab_size": 10, "embed_dim": 5, "buckets": 4},
    {"kind": "qr_concat", "vocab_size": 10, "embed_dim": 3, "buckets": 4},
    {"kind": "factorized", "vocab_size": 10, "embed_dim": 4, "inner_dim": 0},
    {"kind": "factorized", "vocab_size": 10, "embed_dim": 4, "inner_dim": 4},
    {"kind": "truncate_rare", "vocab_size": 10, "embed_dim": 4, "keep_top": 0},
    {"kind": "truncate_rare", "vocab_size": 10, "embed_dim": 4, "keep_top": 11},
    {"kind": "double_hash", "vocab_size": 10, "embed_dim": 4, "buckets": 4,
     "hash2": (3, 1, 7)},
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        SchemeConfig(**kwargs)


def test_quotient_rows_rounds_up():
    cfg = SchemeConfig(kind="qr_mult", vocab_size=10, embed_dim=4, buckets=3)
    assert cfg.quotient_rows == 4
    cfg = SchemeConfig(kind="qr_mult", vocab_size=9, embed_dim=4, buckets=3)
    assert cfg.quotient_rows == 3


def _random_config(rng, kind):
    return gc.random_scheme_config(rng, kind)


@pytest.mark.parametrize("kind", schemes.KINDS)
def test_counts_match_allocation(kind):
    for t in range(25):
        cfg = _random_config(np.random.default_rng([23, t]), kind)
        counted = count_params(cfg)["embedding_params"]
        assert counted == build_scheme(cfg).param_count()


def test_count_spot_values():
    assert count_params(SchemeConfig(
        kind="uncompressed", vocab_size=100_000, embed_dim=128,
    ))["embedding_params"] == 12_800_000
    assert count_params(SchemeConfig(
        kind="memcom_nobias", vocab_size=1000, embed_dim=16, buckets=100,
    ))["embedding_params"] == 100 * 16 + 1000
    assert count_params(SchemeConfig(
        kind="memcom_bias", vocab_size=1000, embed_dim=16, buckets=100,
    ))["embedding_params"] == 100 * 16 + 2000
    assert count_params(SchemeConfig(
        kind="qr_concat", vocab_size=1000, embed_dim=16, buckets=32,
    ))["embedding_params"] == (32 + 32) * 8
    assert count_params(SchemeConfig(
        kind="double_hash", vocab_size=1000, embed_dim=16, buckets=50,
    ))["embedding_params"] == 2 * 50 * 8
    assert count_params(SchemeConfig(
        kind="factorized", vocab_size=1000, embed_dim=64, inner_dim=8,
    ))["embedding_params"] == 1000 * 8 + 8 * 64


def test_lookup_uncompressed_and_reduced():
    for kind in ("uncompressed", "reduced_dim"):
        cfg = SchemeConfig(kind=kind, vocab_size=8, embed_dim=4, seed=3)
        params = build_scheme(cfg)
        ids = np.array([[0, 5], [7, 5]])
        out, _ = lookup(params, ids)
        assert out.shape == (2, 2, 4)
        assert np.array_equal(out, params["table"].value[ids])


def test_lookup_truncate_rare_collapses_tail():
    cfg = SchemeConfig(kind="truncate_rare", vocab_size=10, embed_dim=4,
                       keep_top=4, seed=1)
    params = build_scheme(cfg)
    assert params["table"].shape == (5, 4)
    out, _ = lookup(params, np.arange(10))
    tab = params["table"].value
    assert np.array_equal(out[:4], tab[:4])
    for i in range(4, 10):
        assert np.array_equal(out[i], tab[4])


def test_lookup_naive_hash_modulo():
    cfg = SchemeConfig(kind="naive_hash", vocab_size=11, embed_dim=4,
                       buckets=3, seed=2)
    params = build_scheme(cfg)
    out, _ = lookup(params, np.arange(11))
    tab = params["table"].value
    for i in range(11):
        assert np.array_equal(out[i], tab[i % 3])


def test_lookup_double_hash_two_indices():
    cfg = SchemeConfig(kind="double_hash", vocab_size=10, embed_dim=6,
                       buckets=4, hash2=(3, 1, 97), seed=4)
    params = build_scheme(cfg)
    out, _ = lookup(params, np.arange(10))
    t1, t2 = params["table"].value, params["table2"].value
    for i in range(10):
        j2 = ((3 * i + 1) % 97) % 4
        assert np.array_equal(out[i, :3], t1[i % 4])
        assert np.array_equal(out[i, 3:], t2[j2])


def test_lookup_qr_concat_decomposition():
    cfg = SchemeConfig(kind="qr_concat", vocab_size=10, embed_dim=6,
                       buckets=3, seed=5)
    params = build_scheme(cfg)
    out, _ = lookup(params, np.array([7]))
    rem, quo = params["remainder"].value, params["quotient"].value
    assert np.array_equal(out[0, :3], rem[7 % 3])
    assert np.array_equal(out[0, 3:], quo[7 // 3])


def test_lookup_qr_mult_decomposition():
    cfg = SchemeConfig(kind="qr_mult", vocab_size=10, embed_dim=4,
                       buckets=3, seed=6)
    params = build_scheme(cfg)
    out, _ = lookup(params, np.array([7]))
    want = params["remainder"].value[1] * params["quotient"].value[2]
    assert np.array_equal(out[0], want)


def test_lookup_factorized_projects():
    cfg = SchemeConfig(kind="factorized", vocab_size=10, embed_dim=6,
                       inner_dim=2, seed=7)
    params = build_scheme(cfg)
    ids = np.array([3, 9])
    out, _ = lookup(params, ids)
    want = params["inner"].value[ids] @ params["projection"].value
    assert np.allclose(out, want, rtol=1e-15)


def test_lookup_memcom_composition():
    cfg = SchemeConfig(kind="memcom_bias", vocab_size=10, embed_dim=4,
                       buckets=3, seed=8)
    params = build_scheme(cfg)
    rng = np.random.default_rng(9)
    params["multiplier"].value[:] = rng.uniform(0.5, 2.0, (10, 1))
    params["bias"].value[:] = rng.standard_normal((10, 1))
    out, _ = lookup(params, np.arange(10))
    tab = params["table"].value
    for i in range(10):
        want = (tab[i % 3] * params["multiplier"].value[i, 0]
                + params["bias"].value[i, 0])
        assert np.allclose(out[i], want, rtol=1e-15)


@pytest.mark.parametrize("kind", ["memcom_nobias", "memcom_bias"])
def test_memcom_at_init_equals_naive_hash(kind):
    for seed in (0, 7, 123):
        naive = build_scheme(SchemeConfig(
            kind="naive_hash", vocab_size=50, embed_dim=8, buckets=11,
            seed=seed))
        mem = build_scheme(SchemeConfig(
            kind=kind, vocab_size=50, embed_dim=8, buckets=11, seed=seed))
        assert np.array_equal(naive["table"].value, mem["table"].value)
        ids = np.random.default_rng(seed).integers(0, 50, size=(4, 6))
        out_n, _ = lookup(naive, ids)
        out_m, _ = lookup(mem, ids)
        assert np.array_equal(out_n, out_m)


@pytest.mark.parametrize("kind", schemes.KINDS)
def test_lookup_gradients(kind):
    for t in range(10):
        gc.trial_scheme(np.random.default_rng([29, t]), kind)


def test_backward_leaves_untouched_rows_at_zero():
    cfg = SchemeConfig(kind="naive_hash", vocab_size=20, embed_dim=4,
                       buckets=10, seed=3)
    params = build_scheme(cfg)
    out, cache = lookup(params, np.array([3, 3, 13]))
    schemes.lookup_backward(params, np.ones((3, 4)), cache)
    grad = params["table"].grad
    assert np.array_equal(grad[3], np.full(4, 3.0))  # 3, 3 and 13 hash together
    untouched = [b for b in range(10) if b != 3]
    assert np.array_equal(grad[untouched], np.zeros((9, 4)))


def test_lookup_rejects_out_of_range_ids():
    params = build_scheme(SchemeConfig(kind="uncompressed", vocab_size=5,
                                       embed_dim=2))
    with pytest.raises(IndexError, match="7"):
        lookup(params, np.array([1, 7]))
    with pytest.raises(IndexError, match="-1"):
        lookup(params, np.array([-1]))


def test_build_is_deterministic_per_seed():
    cfg = SchemeConfig(kind="qr_mult", vocab_size=30, embed_dim=4, buckets=7,
                       seed=42)
    a, b = build_scheme(cfg), build_scheme(cfg)
    for name in a.tables:
        assert np.array_equal(a[name].value, b[name].value)
    c = build_scheme(cfg, rng_seed=43)
    assert not np.array_equal(a["remainder"].value, c["remainder"].value)


def _binomial_excess_expectation(v, buckets):
    """Exact E[max(C - 1, 0)] for C ~ Binomial(v, 1/buckets), term by term."""
    p = 1.0 / buckets
    total = 0.0
    for k in range(2, v + 1):
        total += (k - 1) * math.comb(v, k) * p**k * (1 - p) ** (v - k)
    return total


@pytest.mark.parametrize("v,m", [(100, 10), (50, 7), (1000, 100)])
def test_collision_formula_matches_binomial_expectation(v, m):
    for kind, buckets in (("naive", m), ("double", m * m)):
        got = schemes.expected_collisions(v, m, kind)
        want = _binomial_excess_expectation(v, buckets)
        assert got == pytest.approx(want, rel=1e-10)


def test_collision_formula_monte_carlo_small():
    rng = np.random.default_rng(31)
    v, m, trials = 100, 10, 2000
    stats = np.empty(trials)
    for t in range(trials):
        counts = np.bincount(rng.integers(0, m, size=v), minlength=m)
        stats[t] = np.maximum(counts - 1, 0).mean()
    se = stats.std(ddof=1) / math.sqrt(trials)
    assert abs(stats.mean() - schemes.expected_collisions(v, m, "naive")) < 4 * se


def test_expected_collisions_validation():
    with pytest.raises(ConfigError):
        schemes.expected_collisions(10, 2, "triple")
    with pytest.raises(ConfigError):
        schemes.expected_collisions(0, 2, "naive")


def test_uniqueness_audit_exact_small_case():
    cfg = SchemeConfig(kind="memcom_nobias", vocab_size=10, embed_dim=4,
                       buckets=3, seed=0)
    params = build_scheme(cfg)
    # buckets: {0,3,6,9} {1,4,7} {2,5,8} -> 6 + 3 + 3 = 12 pairs, all tied at 1.0
    audit = schemes.uniqueness_audit(params)
    assert audit == {"pairs_checked": 12, "fraction_distinct": 0.0}
    params["multiplier"].value[3, 0] = 2.0  # separates (0,3) (3,6) (3,9)
    audit = schemes.uniqueness_audit(params)
    assert audit["fraction_distinct"] == pytest.approx(3 / 12)


def test_uniqueness_audit_sampling_matches_enumeration():
    cfg = SchemeConfig(kind="memcom_nobias", vocab_size=500, embed_dim=4,
                       buckets=13, seed=0)
    params = build_scheme(cfg)
    rng = np.random.default_rng(5)
    params["multiplier"].value[:, 0] = rng.choice([1.0, 2.0, 3.0], size=500)
    exact = schemes.uniqueness_audit(params)
    sampled = schemes.uniqueness_audit(params, enumerate_limit=0,
                                       sample_pairs=40_000, seed=1)
    assert sampled["pairs_checked"] == 40_000
    assert abs(sampled["fraction_distinct"] - exact["fraction_distinct"]) < 0.02


def test_uniqueness_audit_needs_memcom():
    params = build_scheme(SchemeConfig(kind="naive_hash", vocab_size=10,
                                       embed_dim=4, buckets=3))
    with pytest.raises(ConfigError):
        schemes.uniqueness_audit(params)


def test_uniqueness_audit_single_occupancy_is_vacuously_distinct():
    params = build_scheme(SchemeConfig(kind="memcom_nobias", vocab_size=5,
                                       embed_dim=2, buckets=5))
    audit = schemes.uniqueness_audit(params)
    assert audit == {"pairs_checked": 0, "fraction_distinct": 1.0}


@pytest.mark.parametrize("kind", schemes.KINDS)
def test_save_load_roundtrip(kind, tmp_path):
    cfg = _random_config(np.random.default_rng([37, hash(kind) % 100]), kind)
    params = build_scheme(cfg)
    path = tmp_path / f"{kind}.ckpt"
    schemes.save_scheme(path, params)
    back = schemes.load_scheme(path)
    assert back.config == cfg
    assert set(back.tables) == set(params.tables)
    for name in params.tables:
        assert np.array_equal(back[name].value, params[name].value)


def test_load_rejects_mismatched_tables(tmp_path):
    cfg = SchemeConfig(kind="naive_hash", vocab_size=10, embed_dim=4, buckets=3)
    header = schemes.scheme_header(cfg)
    path = tmp_path / "bad.ckpt"
    io.write_blocks(path, header, {"wrong_name": np.zeros((3, 4))})
    with pytest.raises(OSError):
        schemes.load_scheme(path)
