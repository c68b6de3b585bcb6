import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stvid import diffusion, stunet
from stvid import multidiffusion as md


def brute_force_minimizer(plan, preds):
    """Solve argmin_J sum_i ||S_i J - P_i||^2 as one dense least-squares problem."""
    T = plan.T
    feat = int(np.prod(np.shape(preds[0])[1:]))
    rows, rhs = [], []
    for (s, e), p in zip(plan.segments, preds):
        p = np.asarray(p).reshape(e - s, feat)
        for k, f in enumerate(range(s, e)):
            r = np.zeros(T)
            r[f] = 1.0
            rows.append(r)
            rhs.append(p[k])
    A, B = np.array(rows), np.array(rhs)
    sol, *_ = np.linalg.lstsq(A, B, rcond=None)
    return sol.reshape((T,) + np.shape(preds[0])[1:])


def all_small_plans():
    for T in range(1, 9):
        for Tp in range(1, min(T, 4) + 1):
            if Tp == T:
                yield T, Tp, 1
                continue
            for stride in range(1, Tp):
                yield T, Tp, stride


def test_plan_full_scale_reference():
    p = md.plan_windows(80, 8, 6)
    assert p.N == 13
    assert [s for s, _ in p.segments] == list(range(0, 73, 6))


def test_plan_examples():
    assert md.plan_windows(16, 16, 6).segments == ((0, 16),)
    p = md.plan_windows(10, 4, 2)
    assert [s for s, _ in p.segments] == [0, 2, 4, 6]
    counts = np.zeros(10, int)
    for s, e in p.segments:
        for f in range(s, e):
            counts[f] += 1
    assert np.array_equal(p.coverage(), counts)
    assert p.coverage().tolist() == [1, 1, 2, 2, 2, 2, 2, 2, 1, 1]
    clamped = md.plan_windows(16, 8, 6)
    assert clamped.segments == ((0, 8), (6, 14), (8, 16))


def test_plan_errors():
    for args in ((10, 4, 4), (10, 4, 0), (4, 10, 2)):
        with pytest.raises(ValueError):
            md.plan_windows(*args)


def test_plan_invariants_exhaustive():
    for T, Tp, stride in all_small_plans():
        p = md.plan_windows(T, Tp, stride)
        assert np.all(p.coverage() >= 1)
        assert len(set(p.segments)) == p.N
        assert all(e - s == Tp for s, e in p.segments)
        for (s0, e0), (s1, _) in zip(p.segments[:-2], p.segments[1:-1]):
            assert e0 - s1 == Tp - stride >= 1


def test_aggregate_matches_brute_force_exhaustive():
    rng = np.random.default_rng(0)
    worst = 0.0
    for T, Tp, stride in all_small_plans():
        plan = md.plan_windows(T, Tp, stride)
        preds = [rng.standard_normal((Tp, 2, 2, 3)) for _ in range(plan.N)]
        out = md.aggregate(md.SegmentPredictions(plan, preds))
        worst = max(worst, np.max(np.abs(out - brute_force_minimizer(plan, preds))))
    assert worst < 1e-6


def test_aggregate_identity_and_consensus(rng):
    plan = md.plan_windows(5, 5, 1)
    p = rng.standard_normal((5, 3, 3, 3))
    assert np.array_equal(md.aggregate(md.SegmentPredictions(plan, [p])), p)
    plan = md.plan_windows(12, 4, 3)
    truth = rng.standard_normal((12, 2, 2, 3))
    preds = [truth[s:e] for s, e in plan.segments]
    assert np.allclose(md.aggregate(md.SegmentPredictions(plan, preds)), truth, atol=1e-15)


def test_aggregate_permutation_invariant(rng):
    plan = md.plan_windows(10, 4, 2)
    preds = [rng.standard_normal((4, 2, 2, 1)) for _ in range(plan.N)]
    perm = rng.permutation(plan.N)
    plan_p = md.WindowPlan(10, 4, 2, tuple(plan.segments[i] for i in perm))
    a = md.aggregate(md.SegmentPredictions(plan, preds))
    b = md.aggregate(md.SegmentPredictions(plan_p, [preds[i] for i in perm]))
    assert np.allclose(a, b, atol=1e-15)


def test_segment_prediction_validation(rng):
    plan = md.plan_windows(10, 4, 2)
    with pytest.raises(ValueError, match="predictions for"):
        md.SegmentPredictions(plan, [np.zeros((4, 1))] * 3)
    with pytest.raises(ValueError, match="differ in shape"):
        md.SegmentPredictions(plan, [np.zeros((4, 1))] * 3 + [np.zeros((4, 2))])
    gap = md.WindowPlan(10, 4, 2, ((0, 4), (6, 10)))
    with pytest.raises(ValueError, match="not covered"):
        md.aggregate(md.SegmentPredictions(gap, [np.zeros((4, 1))] * 2))


def test_boundary_smoothness_vs_naive_stitch(rng):
    plan = md.plan_windows(16, 8, 6)
    base = np.zeros((16, 2, 2, 3))
    preds = [base[s:e] + rng.uniform(-1, 1) for s, e in plan.segments]
    sp = md.SegmentPredictions(plan, preds)

    def max_jump(v):
        return np.max(np.abs(np.diff(v, axis=0)))

    assert max_jump(md.aggregate(sp)) < max_jump(md.naive_stitch(sp))


@settings(max_examples=30, deadline=None)
@given(T=st.integers(2, 20), data=st.data())
def test_boundary_smoothness_property(T, data):
    Tp = data.draw(st.integers(2, T))
    stride = data.draw(st.integers(1, Tp - 1))
    plan = md.plan_windows(T, Tp, stride)
    offsets = data.draw(st.lists(st.floats(-5, 5), min_size=plan.N, max_size=plan.N))
    if len(set(offsets)) < plan.N or plan.N < 2:
        return
    preds = [np.full((Tp, 1), o) for o in offsets]
    sp = md.SegmentPredictions(plan, preds)
    agg = np.max(np.abs(np.diff(md.aggregate(sp), axis=0)))
    naive = np.max(np.abs(np.diff(md.naive_stitch(sp), axis=0)))
    assert agg <= naive + 1e-12


def _linear_stub(seed=0):
    """eps_fn(x, t, low) = a_t x + b * up(low), applied frame by frame."""
    r = np.random.default_rng(seed)
    a = r.uniform(0.1, 0.5, 1000)
    b = 0.3

    def eps_fn(x, t, low):
        return a[t] * x + b * md.upsample_nearest(low)
    return eps_fn


def test_linear_stub_end_to_end(rng):
    s = diffusion.make_schedule("linear", 100)
    low = rng.uniform(-1, 1, (16, 4, 4, 3))
    eps_fn = _linear_stub()
    for mode in ("ddim", "ddpm"):
        windowed = md.ssr_multidiffusion_sample(eps_fn, low, md.plan_windows(16, 8, 6), s, 20, seed=4, mode=mode)
        full = md.ssr_multidiffusion_sample(eps_fn, low, md.plan_windows(16, 16, 1), s, 20, seed=4, mode=mode)
        assert windowed.shape == (16, 8, 8, 3)
        assert np.max(np.abs(windowed - full)) < 1e-8


def test_single_segment_equals_windowless(rng):
    s = diffusion.make_schedule("linear", 100)
    low = rng.uniform(-1, 1, (8, 4, 4, 3))
    eps_fn = _linear_stub(1)
    out = md.ssr_multidiffusion_sample(eps_fn, low, md.plan_windows(8, 8, 1), s, 10, seed=2)
    ref = diffusion.sample(lambda x, t: eps_fn(x, t, low), s, "ddim", 10, seed=2, shape=(8, 8, 8, 3))
    assert np.array_equal(out, ref)


def test_ssr_model_sampling_deterministic_and_threads(monkeypatch):
    t2i = stunet.T2IConfig(levels=2, base_channels=4, channel_mult=(1, 2), cond_dim=8, num_classes=3,
                           image_size=8)
    cfg = stunet.STUNetConfig(t2i=stunet.ssr_image_config(t2i), temporal_levels=(1,), attn_blocks_coarsest=1)
    w = stunet.build_ssr(cfg, 0)
    low = np.random.default_rng(0).uniform(-1, 1, (8, 8, 8, 3))
    s = diffusion.make_schedule("linear", 50)
    plan = md.plan_windows(8, 4, 2)
    a = md.ssr_multidiffusion_sample(w, low, plan, s, 3, seed=1)
    monkeypatch.setenv("STUNET_THREADS", "3")
    b = md.ssr_multidiffusion_sample(w, low, plan, s, 3, seed=1)
    assert a.shape == (8, 16, 16, 3)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError, match="frames"):
        md.ssr_multidiffusion_sample(w, low[:6], plan, s, 3)
