import numpy as np
import pytest

from rivlpr.evaluate import (
    DescriptorDB,
    EvalProtocol,
    max_f1,
    pr_curve,
    recall_at_1,
    retrieve_top1,
    run_protocol,
    write_pr_svg,
)


def random_db(rng, n=20, dim=8, spacing=5.0):
    M = rng.normal(size=(n, dim))
    M /= np.linalg.norm(M, axis=1, keepdims=True)
    positions = np.zeros((n, 3))
    positions[:, 0] = np.arange(n) * spacing
    return DescriptorDB(M, tuple(f"s{i}" for i in range(n)), positions, np.arange(n, dtype=float) * 10.0)


class TestRetrieveTop1:
    def test_self_retrieval(self, rng):
        db = random_db(rng)
        idx, dist = retrieve_top1(db, db.matrix[7])
        assert idx == 7
        assert dist == pytest.approx(0.0)

    def test_exclusion_covering_everything(self, rng):
        db = random_db(rng)
        assert retrieve_top1(db, db.matrix[0], exclusion=(-np.inf, np.inf)) is None

    def test_matches_exhaustive_oracle(self, rng):
        for _ in range(10):
            db = random_db(rng, n=100)
            q = rng.normal(size=8)
            q /= np.linalg.norm(q)
            idx, dist = retrieve_top1(db, q)
            d = np.linalg.norm(db.matrix - q, axis=1)
            assert idx == int(np.argmin(d))
            assert dist == pytest.approx(d.min())

    def test_tie_breaks_to_lowest_index(self, rng):
        v = rng.normal(size=4)
        v /= np.linalg.norm(v)
        M = np.stack([v, v, v])
        db = DescriptorDB(M, ("a", "b", "c"), np.zeros((3, 3)), np.arange(3.0))
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        idx, _ = retrieve_top1(db, q)
        assert idx == 0

    def test_time_window_exclusion(self, rng):
        db = random_db(rng)  # timestamps 0, 10, ..., 190
        idx, _ = retrieve_top1(db, db.matrix[5], exclusion=(40.0, np.inf))
        assert idx in (0, 1, 2, 3)


class TestRecall:
    def test_two_of_three(self):
        results = [
            (np.array([0.0, 0, 0]), np.array([1.0, 0, 0])),
            (np.array([0.0, 0, 0]), np.array([50.0, 0, 0])),
            (np.array([0.0, 0, 0]), np.array([3.0, 0, 0])),
        ]
        assert recall_at_1(results, radius=10.0) == pytest.approx(2.0 / 3.0)

    def test_all_correct(self, rng):
        results = [(p, p + rng.normal(0, 0.1, 3)) for p in rng.normal(size=(5, 3))]
        assert recall_at_1(results, radius=10.0) == 1.0

    def test_matches_hand_labeled_oracle(self, rng):
        queries = rng.uniform(-50, 50, (20, 3))
        retrieved = queries + rng.normal(0, 8, (20, 3))
        expected = np.mean(np.linalg.norm(retrieved - queries, axis=1) <= 10.0)
        got = recall_at_1(list(zip(retrieved, queries)), radius=10.0)
        assert got == pytest.approx(expected)

    def test_permutation_invariant(self, rng):
        results = [(rng.normal(size=3) * 10, rng.normal(size=3) * 10) for _ in range(15)]
        a = recall_at_1(results, 10.0)
        b = recall_at_1(results[::-1], 10.0)
        assert a == b


class TestMaxF1:
    def test_all_correct_gives_one(self):
        f1, _ = max_f1([(0.1, True), (0.2, True)])
        assert f1 == 1.0

    def test_spec_sweep_example(self):
        results = [(0.1, True), (0.2, False), (0.3, True)]
        f1, threshold = max_f1(results)
        assert f1 == pytest.approx(0.8)
        assert threshold == pytest.approx(0.3)
        f1s = []
        for t, p, r in pr_curve(results):
            f1s.append(2 * p * r / (p + r) if p + r else 0.0)
        assert sorted(np.round(f1s, 6)) == sorted(np.round([2 / 3, 1 / 2, 4 / 5], 6))

    def test_single_true_query(self):
        f1, threshold = max_f1([(0.42, True)])
        assert f1 == 1.0
        assert threshold == pytest.approx(0.42)

    def test_no_true_matches_flagged(self):
        f1, threshold = max_f1([(0.1, False), (0.5, False)])
        assert f1 == 0.0
        assert np.isnan(threshold)

    def test_matches_exhaustive_threshold_oracle(self, rng):
        for _ in range(20):
            n = int(rng.integers(3, 30))
            results = [(float(rng.uniform(0, 2)), bool(rng.random() < 0.6)) for _ in range(n)]
            if not any(t for _, t in results):
                continue
            f1, _ = max_f1(results)
            best = 0.0
            for t in sorted({d for d, _ in results}):
                tp = sum(1 for d, ok in results if d <= t and ok)
                fp = sum(1 for d, ok in results if d <= t and not ok)
                fn = sum(1 for d, ok in results if d > t and ok)
                prec = tp / (tp + fp) if tp + fp else 0.0
                rec = tp / (tp + fn) if tp + fn else 0.0
                best = max(best, 2 * prec * rec / (prec + rec) if prec + rec else 0.0)
            assert f1 == pytest.approx(best)

    def test_invariant_to_monotone_distance_transform(self, rng):
        results = [(float(rng.uniform(0, 2)), bool(rng.random() < 0.5)) for _ in range(25)]
        if not any(t for _, t in results):
            results[0] = (results[0][0], True)
        f1_a, _ = max_f1(results)
        squashed = [(np.tanh(d) + 3.0 * d, ok) for d, ok in results]
        f1_b, _ = max_f1(squashed)
        assert f1_a == pytest.approx(f1_b)


class TestRunProtocol:
    def test_intra_short_sequence_no_queries(self, rng):
        db = random_db(rng, n=5)  # timestamps 0..40 < 90 s warmup
        report = run_protocol(db, None, EvalProtocol(mode="intra"))
        assert report["status"] == "no-queries"
        assert report["num_queries"] == 0

    def test_inter_self_retrieval_perfect(self, rng):
        db = random_db(rng, n=30)
        report = run_protocol(db, db, EvalProtocol(mode="inter"))
        assert report["recall_at_1"] == 1.0
        assert report["max_f1"] == 1.0

    def test_intra_respects_warmup_and_exclusion(self, rng):
        db = random_db(rng, n=30)  # 10 s apart
        proto = EvalProtocol(mode="intra", temporal_exclusion=60.0, warmup=90.0)
        report = run_protocol(db, None, proto)
        # queries start at t >= 90, i.e. index 9; each sees rows <= t - 60
        assert report["num_queries"] == 21
        for row in report["rows"]:
            assert db.timestamps[row["query"]] >= 90.0
            assert db.timestamps[row["retrieved"]] <= db.timestamps[row["query"]] - 60.0

    def test_matches_independent_reference_loop(self, rng):
        db = random_db(rng, n=40)
        q = random_db(np.random.default_rng(5), n=25)
        proto = EvalProtocol(mode="inter", positive_radius=10.0)
        report = run_protocol(db, q, proto)
        # straight-line reference evaluation
        correct = 0
        ref_results = []
        for i in range(25):
            d = np.linalg.norm(db.matrix - q.matrix[i], axis=1)
            j = int(np.argmin(d))
            ok = np.linalg.norm(db.positions[j] - q.positions[i]) <= 10.0
            correct += ok
            ref_results.append((float(d.min()), bool(ok)))
        assert report["recall_at_1"] == pytest.approx(correct / 25)
        if any(ok for _, ok in ref_results):
            ref_f1, _ = max_f1(ref_results)
            assert report["max_f1"] == pytest.approx(ref_f1)


class TestSvg:
    def test_deterministic_bytes(self, tmp_path):
        curve = [(0.1, 1.0, 0.2), (0.4, 0.8, 0.7), (0.9, 0.5, 1.0)]
        p1 = tmp_path / "a.svg"
        p2 = tmp_path / "b.svg"
        write_pr_svg(p1, curve)
        write_pr_svg(p2, curve)
        assert p1.read_bytes() == p2.read_bytes()
        assert b"polyline" in p1.read_bytes()
