import numpy as np
import pytest

from saatlab import data, models
from saatlab.data import Dataset
from saatlab.evaluation import (
    EvalError, EvalReport, PgdParams, accuracy, eps_sweep,
    generalization_gap, robustness_disparity, validate_grid,
)
from saatlab.engine import flatten, matmul, tensor


def constant_logit_net():
    net = models.build("convnet", 1, (1, 4, 4), 10, seed=0)
    net.params["fc.w"].data[:] = 0
    net.params["fc.b"].data[:] = 0
    return net


def balanced_dataset(n_per_class=3, side=4):
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(10), n_per_class)
    images = rng.random((labels.size, 1, side, side)).astype(np.float32)
    return Dataset("mnist", "test", images, labels.astype(np.int64))


# ---------------------------------------------------------------------------
# accuracy


def test_constant_logits_on_balanced_data_gives_chance():
    # all-zero logits: argmax tie-break picks class 0 for every example
    ds = balanced_dataset()
    assert accuracy(constant_logit_net(), ds) == pytest.approx(0.1)


def test_attack_with_eps_zero_equals_natural_accuracy():
    net = models.build("convnet", 1, (1, 4, 4), 10, seed=1)
    ds = balanced_dataset()
    nat = accuracy(net, ds)
    attacked = accuracy(net, ds, attack=(0.0, 5, 0.01, False))
    assert attacked == nat


def test_accuracy_matches_hand_oracle_on_linear_model():
    # 4 examples, hand-built linear classifier: count correct by hand
    w = np.zeros((4, 3))
    w[0, 0] = 1.0   # feature 0 votes class 0
    w[1, 1] = 1.0   # feature 1 votes class 1
    w[2, 2] = 1.0   # feature 2 votes class 2

    class Lin:
        dtype = np.float32
        params = {"w": tensor(w.astype(np.float32), requires_grad=True)}

        def forward(self, xt):
            return matmul(flatten(xt), self.params["w"])

        def logits(self, x):
            return x.reshape(x.shape[0], -1) @ w

    images = np.array([
        [0.9, 0.1, 0.0, 0.5],   # argmax 0
        [0.2, 0.8, 0.1, 0.5],   # argmax 1
        [0.1, 0.0, 0.7, 0.5],   # argmax 2
        [0.3, 0.3, 0.3, 0.5],   # tie among 0,1,2: lowest index 0
    ], dtype=np.float32).reshape(4, 1, 2, 2)
    labels = np.array([0, 1, 0, 1])  # hand count: correct, correct, wrong, wrong
    ds = Dataset("mnist", "test", images, labels)
    assert accuracy(Lin(), ds) == pytest.approx(2 / 4)


def test_accuracy_empty_dataset_rejected():
    ds = Dataset("mnist", "test", np.zeros((0, 1, 4, 4), np.float32), np.zeros(0, np.int64))
    with pytest.raises(EvalError, match="empty"):
        accuracy(constant_logit_net(), ds)


def test_accuracy_batching_invariance():
    net = models.build("convnet", 1, (1, 4, 4), 10, seed=2)
    ds = balanced_dataset(5)
    assert accuracy(net, ds, batch_size=7) == accuracy(net, ds, batch_size=50)


# ---------------------------------------------------------------------------
# eps_sweep


def test_sweep_grid_must_start_at_zero():
    with pytest.raises(EvalError, match="start at 0"):
        validate_grid([0.1, 0.2])
    with pytest.raises(EvalError, match="increasing"):
        validate_grid([0.0, 0.2, 0.1])


def test_sweep_zero_only_grid_needs_second_point_for_rd():
    net = constant_logit_net()
    ds = balanced_dataset()
    with pytest.raises(EvalError, match="nonzero budget"):
        eps_sweep(net, ds, [0.0])


def test_sweep_row_per_grid_point_and_reproducible():
    net = models.build("convnet", 1, (1, 4, 4), 10, seed=3)
    ds = balanced_dataset(4)
    grid = (0.0, 0.05, 0.1)
    r1 = eps_sweep(net, ds, grid, PgdParams(iters=3))
    r2 = eps_sweep(net, ds, grid, PgdParams(iters=3))
    assert len(r1.accuracies) == len(grid)
    assert r1.accuracies == r2.accuracies
    assert r1.eps_grid == list(grid)
    assert all(0 <= a <= 1 for a in r1.accuracies)
    assert r1.to_json() == r2.to_json()


def test_report_json_round_trip():
    rep = EvalReport(eps_grid=[0.0, 0.1], accuracies=[0.9, 0.4], rd=5.0,
                     attack={"iters": 20, "alpha": None, "random_start": False},
                     split="test", subset=100, checkpoint="ck.saat")
    back = EvalReport.from_json(rep.to_json())
    assert back == rep


# ---------------------------------------------------------------------------
# robustness disparity


def test_rd_zero_when_accuracy_flat():
    rep = EvalReport([0.0, 0.1, 0.2], [0.8, 0.8, 0.8], 0.0, {}, "test", 10)
    assert robustness_disparity(rep) == 0.0


def test_rd_single_point_headline_values():
    # 84% natural vs 46% robust at 8/255: (0.84 - 0.46) / (8/255) = 12.1125
    rep = EvalReport([0.0, 8 / 255], [0.84, 0.46], 0.0, {}, "test", 10)
    assert robustness_disparity(rep) == pytest.approx(12.1125, abs=1e-9)


def test_rd_halves_when_budgets_double():
    grid = [0.0, 0.05, 0.1, 0.2]
    accs = [0.9, 0.7, 0.5, 0.3]
    rd1 = robustness_disparity(EvalReport(grid, accs, 0.0, {}, "test", 10))
    doubled = [0.0] + [2 * e for e in grid[1:]]
    rd2 = robustness_disparity(EvalReport(doubled, accs, 0.0, {}, "test", 10))
    assert rd2 == pytest.approx(rd1 / 2)


def test_rd_is_mean_not_sum():
    # appending a flat point changes the mean: formula behavior, not intuition
    base = EvalReport([0.0, 0.1], [0.8, 0.4], 0.0, {}, "test", 10)
    extended = EvalReport([0.0, 0.1, 0.2], [0.8, 0.4, 0.8], 0.0, {}, "test", 10)
    rd_base = robustness_disparity(base)
    rd_ext = robustness_disparity(extended)
    assert rd_ext == pytest.approx(rd_base / 2)


def test_rd_randomized_against_brute_force():
    rng = np.random.default_rng(42)
    for _ in range(50):
        n = int(rng.integers(1, 6))
        eps = np.sort(rng.uniform(0.01, 0.5, n))
        eps = np.concatenate([[0.0], eps])
        accs = rng.uniform(0, 1, n + 1)
        rep = EvalReport([float(e) for e in eps], [float(a) for a in accs],
                         0.0, {}, "test", 10)
        # independent brute-force recomputation
        total = 0.0
        for i in range(1, n + 1):
            total += (accs[0] - accs[i]) / eps[i]
        assert robustness_disparity(rep) == pytest.approx(total / n, rel=1e-12)


def test_rd_mismatched_lengths_rejected():
    rep = EvalReport([0.0, 0.1], [0.9], 0.0, {}, "test", 10)
    with pytest.raises(EvalError, match="lengths differ"):
        robustness_disparity(rep)


# ---------------------------------------------------------------------------
# generalization gap


def test_gap_identical_reports_is_zero():
    rep = EvalReport([0.0, 0.1], [0.9, 0.5], 0.0, {}, "train", 10)
    assert generalization_gap(rep, rep) == [0.0, 0.0]


def test_gap_at_zero_eps_is_clean_difference():
    train = EvalReport([0.0, 0.1], [0.95, 0.6], 0.0, {}, "train", 10)
    test = EvalReport([0.0, 0.1], [0.90, 0.4], 0.0, {}, "test", 10)
    gaps = generalization_gap(train, test)
    assert gaps[0] == pytest.approx(0.05)
    assert gaps[1] == pytest.approx(0.2)


def test_gap_recomputation_from_raw_records():
    rng = np.random.default_rng(7)
    grid = [0.0, 0.05, 0.1]
    a = [float(v) for v in rng.uniform(0, 1, 3)]
    b = [float(v) for v in rng.uniform(0, 1, 3)]
    gaps = generalization_gap(EvalReport(grid, a, 0.0, {}, "train", 10),
                              EvalReport(grid, b, 0.0, {}, "test", 10))
    assert gaps == [x - y for x, y in zip(a, b)]


def test_gap_grid_mismatch_rejected():
    t1 = EvalReport([0.0, 0.1], [0.9, 0.5], 0.0, {}, "train", 10)
    t2 = EvalReport([0.0, 0.2], [0.9, 0.5], 0.0, {}, "test", 10)
    with pytest.raises(EvalError, match="grids differ"):
        generalization_gap(t1, t2)
