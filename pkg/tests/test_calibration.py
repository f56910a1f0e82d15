import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_params
from dfbscan import (
    ALL_INDICATORS,
    Attack,
    ConfigSet,
    SynthSpec,
    anomaly_score,
    build_profile,
    clean_reference,
    compute_indicator_matrix,
    detect,
    f1_score,
    generate_benchmark,
    generate_model,
    load_profile,
    optimize_lambda,
    optimize_lambda_from_similarities,
    save_profile,
)
from dfbscan.errors import (
    ClassCountMismatchError,
    DegenerateConfigError,
    EmptyCleanSetError,
)


def small_config(k=8, d=32, seed=0):
    config, _ = generate_benchmark(
        SynthSpec(k=k, d=d),
        counts=(12, 3),
        attacks=(Attack.MEAN_BOOST, Attack.BIAS_BOOST, Attack.DIRECTIONAL, Attack.BITFLIP),
        master_seed=seed,
    )
    return config


class TestCleanReference:
    def test_single_model_is_its_own_score(self, rng):
        p = random_params(rng, k=5, d=16)
        ref = clean_reference([p], ALL_INDICATORS)
        want = anomaly_score(compute_indicator_matrix(p), ALL_INDICATORS)
        np.testing.assert_array_equal(ref, want)

    def test_mean_of_two(self, rng):
        a = random_params(rng, k=5, d=16)
        b = random_params(rng, k=5, d=16)
        sa = anomaly_score(compute_indicator_matrix(a), ALL_INDICATORS)
        sb = anomaly_score(compute_indicator_matrix(b), ALL_INDICATORS)
        np.testing.assert_allclose(
            clean_reference([a, b], ALL_INDICATORS), (sa + sb) / 2
        )

    def test_entries_in_unit_interval_and_compact(self):
        cleans = [generate_model(SynthSpec(k=10, d=64, seed=s)) for s in range(20)]
        scores = np.stack(
            [anomaly_score(compute_indicator_matrix(p), ALL_INDICATORS) for p in cleans]
        )
        ref = clean_reference(cleans, ALL_INDICATORS)
        assert (ref >= 0).all() and (ref <= 1).all()
        assert (scores.std(axis=0) < 0.15).all()

    def test_empty_rejected(self):
        with pytest.raises(EmptyCleanSetError):
            clean_reference([], ALL_INDICATORS)

    def test_mixed_k_rejected(self, rng):
        with pytest.raises(ClassCountMismatchError):
            clean_reference(
                [random_params(rng, k=4, d=8), random_params(rng, k=5, d=8)],
                ALL_INDICATORS,
            )


class TestOptimizeLambda:
    def test_perfectly_separated(self):
        sims = [0.995, 0.99, 0.993, 0.9, 0.85, 0.7]
        labels = [0, 0, 0, 1, 1, 1]
        lam, f1 = optimize_lambda_from_similarities(sims, labels)
        assert f1 == 1.0
        assert 0.9 < lam <= 0.99

    def test_inseparable_capped_at_all_positive_baseline(self):
        # all models identical: F1 can never beat flagging everything
        sims = [0.97] * 10
        labels = [0] * 6 + [1] * 4
        lam, f1 = optimize_lambda_from_similarities(sims, labels)
        p = 0.4
        assert f1 <= 2 * p / (p + 1) + 1e-12

    def test_degenerate_labels_rejected(self):
        with pytest.raises(DegenerateConfigError):
            optimize_lambda_from_similarities([0.9, 0.8], [0, 0])

    def test_matches_fine_grid(self, rng):
        for _ in range(20):
            n = int(rng.integers(4, 40))
            sims = rng.uniform(0, 1, n)
            labels = np.zeros(n, dtype=int)
            labels[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = 1
            if labels.all() or not labels.any():
                continue
            lam, f1 = optimize_lambda_from_similarities(sims, labels)
            grid = np.arange(0.0, 1.0 + 1e-12, 1e-4)
            grid_best = max(f1_score(labels, sims < g) for g in grid)
            assert f1 == grid_best

    def test_config_level_f1(self):
        config = small_config()
        ref = clean_reference(config.cleans, ALL_INDICATORS)
        lam, f1 = optimize_lambda(config, ALL_INDICATORS, ref)
        assert 0.0 <= lam <= 1.0
        assert 0.0 <= f1 <= 1.0

    def test_mean_boost_config_f1_high(self):
        config, _ = generate_benchmark(
            SynthSpec(k=10, d=64),
            counts=(40, 40),
            attacks=(Attack.MEAN_BOOST,),
            master_seed=17,
        )
        ref = clean_reference(config.cleans, ALL_INDICATORS)
        _, f1 = optimize_lambda(config, ALL_INDICATORS, ref)
        assert f1 >= 0.95


class TestBuildProfile:
    def test_in_sample_consistency(self):
        config = small_config()
        profile = build_profile(config, ALL_INDICATORS)
        preds, labels = [], []
        for p in config.cleans:
            preds.append(detect(p, profile).is_backdoored)
            labels.append(0)
        for p, _ in config.backdoors:
            preds.append(detect(p, profile).is_backdoored)
            labels.append(1)
        assert f1_score(np.array(labels), np.array(preds)) == pytest.approx(
            float(profile.meta["config_f1"]), abs=1e-9
        )

    def test_round_trip_same_verdicts(self, tmp_path):
        config = small_config(seed=3)
        profile = build_profile(config, ALL_INDICATORS)
        save_profile(profile, tmp_path / "p.json")
        loaded = load_profile(tmp_path / "p.json")
        batch = [generate_model(SynthSpec(k=8, d=32, seed=7000 + i)) for i in range(10)]
        for p in batch:
            assert detect(p, profile).is_backdoored == detect(p, loaded).is_backdoored

    def test_deterministic(self):
        config = small_config(seed=5)
        a = build_profile(config, ALL_INDICATORS)
        b = build_profile(config, ALL_INDICATORS)
        assert a.lam == b.lam
        np.testing.assert_array_equal(a.clean_reference, b.clean_reference)

    def test_scale_families_yield_distinct_lambdas(self):
        profiles = []
        for scale in (0.5, 2.0):
            config, _ = generate_benchmark(
                SynthSpec(k=8, d=32, weight_scale=scale / np.sqrt(32)),
                counts=(12, 4),
                attacks=(Attack.MEAN_BOOST, Attack.TAIL),
                master_seed=9,
            )
            profiles.append(build_profile(config, ALL_INDICATORS))
        assert profiles[0].lam != profiles[1].lam

    def test_reference_in_unit_interval(self):
        profile = build_profile(small_config(seed=8), ALL_INDICATORS)
        assert (profile.clean_reference >= 0).all()
        assert (profile.clean_reference <= 1).all()


@pytest.mark.properties
class TestProperties:
    @given(seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=40)
    def test_sweep_is_grid_optimal(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 25))
        sims = np.round(rng.uniform(0, 1, n), 3)
        labels = np.zeros(n, dtype=int)
        labels[: max(1, n // 3)] = 1
        rng.shuffle(labels)
        if labels.all() or not labels.any():
            return
        lam, f1 = optimize_lambda_from_similarities(sims, labels)
        grid = np.arange(0.0, 1.0 + 1e-12, 1e-3)
        assert f1 >= max(f1_score(labels, sims < g) for g in grid) - 1e-12

    @given(seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=10)
    def test_build_profile_deterministic_given_ordering(self, seed):
        rng = np.random.default_rng(seed)
        cleans = tuple(random_params(rng, k=5, d=12) for _ in range(4))
        backdoors = ((random_params(rng, k=5, d=12), 2),)
        config = ConfigSet(cleans=cleans, backdoors=backdoors)
        ids = sorted(rng.choice(62, size=8, replace=False).tolist())
        a = build_profile(config, ids)
        b = build_profile(config, ids)
        assert a.lam == b.lam and a.indicator_ids == b.indicator_ids
        np.testing.assert_array_equal(a.clean_reference, b.clean_reference)
