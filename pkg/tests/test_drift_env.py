import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rccda.drift_env import (
    DomainSpec,
    DriftSchedule,
    ScheduleKind,
    advance,
    default_schedule,
    domain_kl,
    drift_rate,
    gaussian_kl,
    incoming_domain,
    init_dataset,
    make_domain,
    mixture_kl_quadrature,
    mixture_weight_kl,
    replacement_count,
    sample_batch,
    schedule_composition,
    schedule_kl,
)


def domains(n=3, k=2, d=2, sep=2.0, cov=0.5):
    return [make_domain(i, k, d, sep, cov, 100 + i) for i in range(n)]


# ---------------------------------------------------------------- domains


def test_make_domain_spacing():
    dom = make_domain(0, 2, 2, 2.0, 1.0, 7)
    assert np.linalg.norm(dom.class_means[0] - dom.class_means[1]) >= 2.0


def test_make_domain_deterministic():
    assert make_domain(0, 2, 2, 2.0, 1.0, 7) == make_domain(0, 2, 2, 2.0, 1.0, 7)


def test_make_domain_shape():
    dom = make_domain(1, 3, 5, 1.0, 0.5, 3)
    assert dom.class_means.shape == (3, 5)


@pytest.mark.parametrize("args", [(0, 0, 2, 1.0, 1.0, 0), (0, 2, 0, 1.0, 1.0, 0), (0, 2, 2, 0.0, 1.0, 0),
                                  (0, 2, 2, 1.0, -1.0, 0)])
def test_make_domain_rejects_bad_sizes(args):
    with pytest.raises(ValueError):
        make_domain(*args)


@given(st.integers(2, 5), st.integers(1, 4), st.floats(0.1, 3.0), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_make_domain_pairwise_distance(k, d, sep, seed):
    dom = make_domain(0, k, d, sep, 1.0, seed)
    m = dom.class_means
    dist = [np.linalg.norm(m[i] - m[j]) for i in range(k) for j in range(i + 1, k)]
    assert min(dist) >= sep


def test_domain_spec_validation():
    with pytest.raises(ValueError):
        DomainSpec(0, np.zeros((2, 3)), 1.0, 2, 2)
    with pytest.raises(ValueError):
        DomainSpec(0, np.zeros((2, 2)), 0.0, 2, 2)
    with pytest.raises(ValueError):
        DomainSpec(0, np.zeros((1, 2)), 1.0, 1, 2)


# ---------------------------------------------------------------- schedules


def test_constant_rate_zero():
    s = DriftSchedule(ScheduleKind.CONSTANT, 100)
    assert all(drift_rate(s, t) == 0.0 for t in range(100))


def test_burst_rate_at_events_only():
    s = DriftSchedule(ScheduleKind.BURST, 100, event_times=(50,), rates=(0.8,))
    assert drift_rate(s, 50) == 0.8
    assert drift_rate(s, 49) == 0.0
    assert np.count_nonzero(s.rate_series()) == 1


def test_spikes_deterministic():
    a = DriftSchedule(ScheduleKind.SPIKES, 300, num_events=6, duration=3, seed=11)
    b = DriftSchedule(ScheduleKind.SPIKES, 300, num_events=6, duration=3, seed=11)
    assert drift_rate(a, 100) == drift_rate(b, 100)
    assert np.array_equal(a.rate_series(), b.rate_series())


def test_spikes_rates_in_range_and_count():
    s = DriftSchedule(ScheduleKind.SPIKES, 500, num_events=5, duration=1, rate_range=(0.2, 0.6), seed=3,
                      incoming_domains=(1, 2))
    r = s.rate_series()
    assert np.count_nonzero(r) == 5
    assert ((r[r > 0] >= 0.2) & (r[r > 0] <= 0.6)).all()


def test_step_schedule_shape():
    s = default_schedule("step", 200)
    r = s.rate_series()
    assert (r[:50] == 0).all() and (r[50:] == 0.02).all()
    assert incoming_domain(s, 50) == 1 and incoming_domain(s, 100) == 2


def test_wave_schedule_periodic():
    s = default_schedule("wave", 400)
    r = s.rate_series()
    assert np.array_equal(r[30:130], r[130:230])
    assert r[30:70].min() > 0 and r[70:130].max() == 0


def test_default_burst_events():
    s = default_schedule("burst", 250)
    assert list(np.nonzero(s.rate_series())[0]) == [50, 150]


@pytest.mark.parametrize("t", [-1, 100])
def test_drift_rate_outside_horizon(t):
    with pytest.raises(ValueError):
        drift_rate(DriftSchedule(ScheduleKind.CONSTANT, 100), t)


@pytest.mark.parametrize("kw", [
    dict(event_times=(5,), rates=(1.5,)),
    dict(event_times=(5, 5), rates=(0.1, 0.1)),
    dict(event_times=(9, 5), rates=(0.1, 0.1)),
    dict(event_times=(100,), rates=(0.1,)),
    dict(event_times=(5,), rates=()),
])
def test_schedule_rejects_invalid(kw):
    with pytest.raises(ValueError):
        DriftSchedule(ScheduleKind.BURST, 100, **kw)


# ---------------------------------------------------------------- datasets


def test_advance_rate_zero_identity():
    doms = domains()
    rng = np.random.default_rng(0)
    ds = init_dataset(doms, 50, 20, rng)
    s = DriftSchedule(ScheduleKind.CONSTANT, 10)
    nxt = advance(ds, s, 0, rng)
    assert nxt.pool is ds.pool and nxt.holdout is ds.holdout
    assert np.array_equal(nxt.composition, ds.composition)
    assert nxt.t == 1


def test_advance_composition_counts():
    doms = domains(2)
    rng = np.random.default_rng(0)
    ds = init_dataset(doms, 100, 20, rng)
    s = DriftSchedule(ScheduleKind.BURST, 10, event_times=(0,), rates=(0.8,), incoming_domains=(1,))
    nxt = advance(ds, s, 0, rng)
    assert np.array_equal(nxt.composition, [0.2, 0.8])
    assert (nxt.pool.domain == 1).sum() == 80
    assert (nxt.holdout.domain == 1).sum() == 16


def test_advance_deterministic():
    doms = domains()
    s = default_schedule("spikes", 100, 3, seed=2)

    def run():
        rng, hrng = np.random.default_rng(5), np.random.default_rng(6)
        ds = init_dataset(doms, 40, 10, rng, hrng)
        for t in range(100):
            ds = advance(ds, s, t, rng, hrng)
        return ds

    a, b = run(), run()
    assert np.array_equal(a.pool.x, b.pool.x) and np.array_equal(a.pool.ids, b.pool.ids)
    assert np.array_equal(a.holdout.x, b.holdout.x)


def test_advance_wrong_step():
    doms = domains()
    ds = init_dataset(doms, 10, 5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        advance(ds, DriftSchedule(ScheduleKind.CONSTANT, 10), 3, np.random.default_rng(0))


def test_holdout_stream_independent_of_pool():
    doms = domains()
    s = default_schedule("burst", 200, 3)

    def run(hseed):
        rng, hrng = np.random.default_rng(1), np.random.default_rng(hseed)
        ds = init_dataset(doms, 40, 10, rng, hrng)
        for t in range(200):
            ds = advance(ds, s, t, rng, hrng)
        return ds

    a, b = run(2), run(3)
    assert np.array_equal(a.pool.x, b.pool.x)
    assert not np.array_equal(a.holdout.x, b.holdout.x)


def test_constant_schedule_keeps_sample_identities():
    doms = domains()
    rng = np.random.default_rng(0)
    ds0 = init_dataset(doms, 30, 10, rng)
    s = DriftSchedule(ScheduleKind.CONSTANT, 50)
    ds = ds0
    for t in range(50):
        ds = advance(ds, s, t, rng)
        assert np.array_equal(ds.pool.ids, ds0.pool.ids) and np.array_equal(ds.pool.x, ds0.pool.x)


@given(st.sampled_from(["burst", "step", "wave", "spikes"]), st.integers(0, 1000), st.integers(5, 80),
       st.integers(1, 30))
@settings(max_examples=40, deadline=None)
def test_pool_invariants_under_drift(kind, seed, pool, hold):
    doms = domains(4)
    s = default_schedule(kind, 120, 4, seed=seed)
    rng = np.random.default_rng(seed)
    ds = init_dataset(doms, pool, hold, rng)
    for t in range(120):
        ds = advance(ds, s, t, rng)
        assert len(ds.pool) == pool and len(ds.holdout) == hold
        counts = np.bincount(ds.pool.domain, minlength=4) / pool
        assert np.array_equal(counts, ds.composition)
        assert (ds.composition >= 0).all() and abs(ds.composition.sum() - 1) < 1e-9
        assert len(np.unique(ds.pool.ids)) == pool
        assert ((ds.pool.y >= 0) & (ds.pool.y < 2)).all()


def test_replacement_count_floor():
    assert replacement_count(0.8, 100) == 80
    assert replacement_count(0.02, 60) == 1
    assert replacement_count(0.1, 30) == 3  # 0.1*30 = 3.0000000000000004 in floats


def test_data_bound_projects_features():
    doms = domains(1, sep=10.0)
    ds = init_dataset(doms, 500, 10, np.random.default_rng(0), data_bound=1.5)
    assert np.linalg.norm(ds.pool.x, axis=1).max() <= 1.5 + 1e-12


# ---------------------------------------------------------------- batches


def test_sample_batch_full_pool():
    doms = domains()
    ds = init_dataset(doms, 12, 4, np.random.default_rng(0))
    b = sample_batch(ds, 12, np.random.default_rng(1))
    assert sorted(map(tuple, b.x)) == sorted(map(tuple, ds.pool.x))


def test_sample_batch_uniform_chi2():
    doms = domains()
    n = 20
    ds = init_dataset(doms, n, 4, np.random.default_rng(0))
    ds.pool.x.setflags(write=False)
    lookup = {tuple(x): i for i, x in enumerate(ds.pool.x)}
    rng = np.random.default_rng(2)
    counts = np.zeros(n)
    for _ in range(100_000):
        counts[lookup[tuple(sample_batch(ds, 1, rng).x[0])]] += 1
    assert stats.chisquare(counts).pvalue > 0.01


@pytest.mark.parametrize("size", [0, 13])
def test_sample_batch_size_rejected(size):
    ds = init_dataset(domains(), 12, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_batch(ds, size, np.random.default_rng(0))


# ---------------------------------------------------------------- divergences


def test_domain_kl_identity():
    a = make_domain(0, 3, 2, 1.0, 0.7, 1)
    assert domain_kl(a, a) == 0.0


def test_domain_kl_unit_variance_shift():
    a = DomainSpec(0, [[0.0], [5.0]], 1.0, 2, 1)
    b = DomainSpec(1, [[1.0], [5.0]], 1.0, 2, 1)
    # single class carries all the prior
    assert domain_kl(a, b, class_prior=[1.0, 0.0]) == pytest.approx(0.5, abs=1e-15)


def test_domain_kl_asymmetric():
    a = DomainSpec(0, [[0.0], [3.0]], 1.0, 2, 1)
    b = DomainSpec(1, [[0.0], [3.0]], 2.0, 2, 1)
    # 1-D closed forms: KL(N(0,1)||N(0,2)) and KL(N(0,2)||N(0,1))
    assert domain_kl(a, b) == pytest.approx(0.5 * (math.log(2) - 0.5), rel=1e-13)
    assert domain_kl(b, a) == pytest.approx(0.5 * (1.0 - math.log(2)), rel=1e-13)
    assert domain_kl(a, b) != domain_kl(b, a)


def test_domain_kl_dimension_mismatch():
    with pytest.raises(ValueError):
        domain_kl(make_domain(0, 2, 2, 1.0, 1.0, 0), make_domain(1, 2, 3, 1.0, 1.0, 0))


def test_gaussian_kl_matches_scipy_entropy_on_grid():
    x = np.linspace(-30, 30, 200_001)
    p, q = stats.norm.pdf(x, 0.3, 1.1), stats.norm.pdf(x, -0.4, 0.8)
    numeric = np.trapezoid(p * np.log(p / q), x)
    assert gaussian_kl([0.3], 1.1**2, [-0.4], 0.8**2) == pytest.approx(numeric, rel=1e-6)


def test_schedule_kl_zero_when_rate_zero():
    s = DriftSchedule(ScheduleKind.BURST, 10, event_times=(3,), rates=(0.5,))
    doms = domains(2)
    assert schedule_kl(s, doms, 2) == 0.0
    assert schedule_kl(s, doms, 3) > 0


def test_schedule_kl_matches_quadrature():
    # well separated components so the weight KL is the mixture KL
    a = DomainSpec(0, [[0.0, 0.0], [0.0, 40.0]], 1.0, 2, 2)
    b = DomainSpec(1, [[40.0, 0.0], [40.0, 40.0]], 1.0, 2, 2)
    s = DriftSchedule(ScheduleKind.BURST, 5, event_times=(0, 1), rates=(0.8, 0.5), incoming_domains=(1,))
    w = schedule_composition(s, 2)
    assert np.allclose(w[1], [0.2, 0.8]) and np.allclose(w[2], [0.1, 0.9])
    brute = mixture_kl_quadrature([a, b], [0.2, 0.8], [0.1, 0.9], points=250_000, width=8.0)
    assert schedule_kl(s, [a, b], 1) == pytest.approx(brute, abs=1e-3)


def test_weight_kl_upper_bounds_overlapping_mixture():
    a = DomainSpec(0, [[0.0], [2.0]], 1.0, 2, 1)
    b = DomainSpec(1, [[1.0], [0.5]], 1.0, 2, 1)
    brute = mixture_kl_quadrature([a, b], [0.2, 0.8], [0.1, 0.9], points=20_000)
    assert brute <= mixture_weight_kl([0.2, 0.8], [0.1, 0.9])


@given(st.sampled_from(["constant", "burst", "step", "wave", "spikes"]), st.integers(0, 500))
@settings(max_examples=30, deadline=None)
def test_schedule_kl_nonnegative_and_zero_iff_idle(kind, seed):
    s = default_schedule(kind, 150, 4, seed=seed)
    doms = domains(4)
    w = schedule_composition(s, 4)
    for t in range(150):
        d = schedule_kl(s, doms, t)
        assert d >= 0
        if drift_rate(s, t) == 0:
            assert d == 0.0
        else:
            # positive unless the pool already is the incoming domain
            assert d > 0 or np.array_equal(w[t], w[t + 1])
