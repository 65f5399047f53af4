import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibfw import incremental as inc
from calibfw.nn import tensor as T
from calibfw.nn.gradcheck import grad_check
from calibfw.nn.network import Network, make_arch
from calibfw.nn.train import TrainConfig, train_base


def brute_force_herding(features, m):
    """Plain-loop greedy selection; independent of the vectorized version.

    Squared distances within a 1e-12 relative margin are ties (lowest index wins).
    """
    n = len(features)
    mu = [sum(features[i][j] for i in range(n)) / n for j in range(len(features[0]))]
    chosen, total = [], [0.0] * len(mu)
    for k in range(m):
        best, best_d = None, math.inf
        for i in range(n):
            if i in chosen:
                continue
            d = sum((mu[j] - (total[j] + features[i][j]) / (k + 1)) ** 2 for j in range(len(mu)))
            if best is None or d < best_d - 1e-12 * (1.0 + best_d):
                best, best_d = i, d
        chosen.append(best)
        total = [t + f for t, f in zip(total, features[best])]
    return chosen


# ---------------------------------------------------------------- configuration


def test_strategy_validation():
    with pytest.raises(inc.StrategyError):
        inc.StrategyConfig("ewc")
    with pytest.raises(inc.StrategyError):
        inc.StrategyConfig("lwf", exemplar_pct=10)
    with pytest.raises(inc.StrategyError):
        inc.StrategyConfig("icarl", exemplar_pct=120)


def test_strategy_equivalence_reporting():
    assert "equivalent to finetune" in inc.StrategyConfig("lwf", lambda0=0).describe()
    assert "equivalent to lwf" in inc.StrategyConfig("icarl", exemplar_pct=0).describe()
    assert inc.StrategyConfig("finetune").distill_weight == 0


# ---------------------------------------------------------------- losses


def test_lwf_lambda_zero_is_new_task_loss():
    rng = np.random.default_rng(0)
    p, y, t = rng.normal(size=(3, 4, 3))
    assert inc.lwf_loss(p, y, p, t, 0.0).item() == T.smooth_l1(p, y).item()


def test_lwf_distill_zero_when_matching_teacher():
    rng = np.random.default_rng(1)
    p, y = rng.normal(size=(2, 4, 3))
    assert inc.lwf_loss(p, y, p, p, 1.0).item() == T.smooth_l1(p, y).item()


def test_lwf_term_arithmetic():
    # single elements with 0.5 d^2 = 0.2 and 0.3
    pred = np.zeros((1, 1))
    new = np.array([[math.sqrt(0.4)]])
    teach = np.array([[math.sqrt(0.6)]])
    assert inc.lwf_loss(pred, new, pred, teach, 1.0).item() == pytest.approx(0.5, abs=1e-12)


def test_lwf_teacher_batch_mismatch():
    with pytest.raises(ValueError, match="teacher"):
        inc.lwf_loss(np.zeros((4, 3)), np.zeros((4, 3)), np.zeros((4, 3)), np.zeros((3, 3)), 1.0)


@settings(max_examples=50)
@given(st.floats(0, 5), st.integers(0, 1000))
def test_composite_losses_decompose(lam, seed):
    rng = np.random.default_rng(seed)
    p, y, t = rng.normal(size=(3, 5, 3))
    f, g = rng.normal(size=(2, 5, 8))
    new, dist = inc.lwf_terms(p, y, p, t)
    assert inc.lwf_loss(p, y, p, t, lam).item() == pytest.approx(new.item() + lam * dist.item(), abs=1e-6)
    lf = inc.less_forget_term(f, g).item()
    assert inc.lucir_loss(p, y, f, g, lam).item() == pytest.approx(T.smooth_l1(p, y).item() + lam * lf, abs=1e-6)


@pytest.mark.parametrize("sign, expected", [(1.0, 0.0), (-1.0, 2.0)])
def test_less_forget_parallel_antiparallel(sign, expected):
    f = np.random.default_rng(0).normal(size=(4, 6))
    assert abs(inc.less_forget_term(sign * 3.7 * f, f).item() - expected) < 1e-12


def test_less_forget_orthogonal():
    f = np.array([[1.0, 0, 0], [0, 2.0, 0]])
    g = np.array([[0, 5.0, 0], [0, 0, 1.0]])
    assert abs(inc.less_forget_term(f, g).item() - 1.0) < 1e-12


def test_less_forget_zero_norm():
    with pytest.raises(T.DegenerateFeatureError):
        inc.less_forget_term(np.zeros((1, 3)), np.ones((1, 3)))


# ---------------------------------------------------------------- herding


def test_herding_matches_brute_force_many_instances():
    rng = np.random.default_rng(2024)
    for _ in range(60):
        n, f = int(rng.integers(1, 17)), int(rng.integers(1, 9))
        feats = rng.normal(size=(n, f))
        m = int(rng.integers(1, min(n, 8) + 1))
        assert inc.herd_exemplars(feats, m) == brute_force_herding(feats.tolist(), m)


@settings(max_examples=60)
@given(st.integers(1, 16), st.integers(1, 8), st.integers(0, 10_000))
def test_herding_prefix_property(n, f, seed):
    feats = np.random.default_rng(seed).normal(size=(n, f))
    full = inc.herd_exemplars(feats)
    assert sorted(full) == list(range(n))
    for m in range(1, n + 1):
        assert inc.herd_exemplars(feats, m) == full[:m]


def test_herding_first_pick_is_closest_to_mean():
    feats = np.random.default_rng(5).normal(size=(12, 4))
    closest = int(np.argmin(np.linalg.norm(feats - feats.mean(0), axis=1)))
    assert inc.herd_exemplars(feats, 1) == [closest]


def test_herding_ties_lowest_index():
    feats = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    assert inc.herd_exemplars(feats, 2) == [0, 1]


def test_herding_errors():
    with pytest.raises(ValueError, match="empty"):
        inc.herd_exemplars(np.zeros((0, 3)), 1)
    with pytest.raises(ValueError):
        inc.herd_exemplars(np.zeros((3, 2)), 4)


def test_binned_herding_is_permutation_with_balanced_prefix():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(40, 5))
    pitch = rng.uniform(-1, 0, 40)
    order = inc.herd_binned(feats, pitch, 4)
    assert sorted(order) == list(range(40))
    q = np.searchsorted(np.quantile(pitch, [0.25, 0.5, 0.75]), pitch[order[:8]], side="right")
    assert np.bincount(q, minlength=4).tolist() == [2, 2, 2, 2]


def test_memory_size_rounds_half_up():
    assert inc.memory_size(20, 1600) == 320
    assert inc.memory_size(50, 5) == 3
    assert inc.memory_size(0, 100) == 0


# ---------------------------------------------------------------- replay stream


def test_replay_stream_counts():
    batches = inc.build_replay_stream(80, 20, np.random.default_rng(0), 16)
    assert len(batches) == 7 and len(batches[-1]) == 4
    assert sorted(np.concatenate(batches).tolist()) == list(range(100))


def test_replay_stream_empty_memory_is_permutation_and_deterministic():
    a = inc.build_replay_stream(30, 0, np.random.default_rng(3), 16)
    b = inc.build_replay_stream(30, 0, np.random.default_rng(3), 16)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert sorted(np.concatenate(a).tolist()) == list(range(30))


def test_replay_stream_rejects_batch_one():
    with pytest.raises(ValueError):
        inc.build_replay_stream(10, 5, np.random.default_rng(0), 1)


# ---------------------------------------------------------------- BiC


def test_bic_apply_arithmetic():
    p = inc.BiCParams(np.array([2.0, 1, 1]), np.array([0, 0.1, 0]))
    np.testing.assert_allclose(inc.bic_apply(np.array([[0.3, -0.5, 0.2]]), p), [[0.6, -0.4, 0.2]], atol=1e-15)
    o = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(inc.bic_apply(o, inc.BiCParams()), o)


def test_bic_beta_shift_changes_mse_by_closed_form():
    # constant targets c, outputs o: MSE(o + b) = MSE(o) + 2 b mean(o - c) + b^2
    rng = np.random.default_rng(0)
    o = rng.normal(0, 0.2, size=(50, 3))
    c = np.full_like(o, 0.3)
    b = np.array([0.05, -0.1, 0.2])
    q = inc.bic_apply(o, inc.BiCParams(np.ones(3), b))
    lhs = ((q - c) ** 2).mean(0)
    rhs = ((o - c) ** 2).mean(0) + 2 * b * (o - c).mean(0) + b ** 2
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def domains(n):
    return np.r_[np.zeros(n // 2), np.ones(n - n // 2)]


def test_bic_fit_identity_fixed_point():
    o = np.random.default_rng(0).uniform(-0.8, 0.8, size=(40, 3))
    p = inc.bic_fit(o, o, domains(40))
    np.testing.assert_allclose(p.alpha, 1, atol=1e-3)
    np.testing.assert_allclose(p.beta, 0, atol=1e-3)


def test_bic_fit_half_outputs():
    y = np.random.default_rng(1).uniform(-0.9, 0.9, size=(40, 3))
    p = inc.bic_fit(y / 2, y, domains(40))
    np.testing.assert_allclose(p.alpha, 2, atol=1e-2)


@pytest.mark.parametrize("seed", range(5))
def test_bic_fit_matches_least_squares(seed):
    rng = np.random.default_rng(seed)
    o = rng.uniform(-0.5, 0.5, size=(60, 3))
    y = 0.7 * o + 0.1 + rng.normal(0, 0.05, size=o.shape)
    p = inc.bic_fit(o, y, domains(60))
    for k in range(3):
        slope, intercept = np.polyfit(o[:, k], y[:, k], 1)
        assert abs(p.alpha[k] - slope) < 1e-3 and abs(p.beta[k] - intercept) < 1e-3


def test_bic_fit_with_outliers_still_reduces_loss():
    rng = np.random.default_rng(3)
    o = rng.uniform(-0.5, 0.5, size=(60, 3))
    y = 1.3 * o - 0.2
    y[:3] += 4.0  # linear-region residuals
    p = inc.bic_fit(o, y, domains(60))
    assert T.smooth_l1(inc.bic_apply(o, p), y).item() < T.smooth_l1(o, y).item()


def test_bic_fit_errors():
    with pytest.raises(inc.UnbalancedValidationError, match="empty"):
        inc.bic_fit(np.zeros((0, 3)), np.zeros((0, 3)), [])
    with pytest.raises(inc.UnbalancedValidationError, match="unbalanced"):
        inc.bic_fit(np.zeros((4, 3)), np.zeros((4, 3)), np.ones(4))


# ---------------------------------------------------------------- gradient fidelity


def grad_batch(size=8, n=3):
    rng = np.random.default_rng(0)
    return rng.normal(size=(n, 3, size, size)), rng.uniform(-0.8, 0.8, size=(n, 3))


def test_grad_check_lwf():
    net = Network(make_arch("calibnet-micro", input_size=8), seed=1)
    x, y = grad_batch()
    teacher_out = Network(make_arch("calibnet-micro", input_size=8), seed=2).copy(np.float64).predict(x)

    def loss(n, xb, yb):
        out = n(xb).outputs
        return inc.lwf_loss(out, yb, out, teacher_out, 1.0)

    assert grad_check(net, (x, y), loss_fn=loss) < 1e-4


def test_grad_check_lucir():
    net = Network(make_arch("calibnet-micro", input_size=8, head="cosine"), seed=1)
    x, y = grad_batch()
    f_teacher = Network(make_arch("calibnet-micro", input_size=8, head="cosine"), seed=2).copy(np.float64).features(x)

    def loss(n, xb, yb):
        fp = n(xb)
        return inc.lucir_loss(fp.outputs, yb, fp.features, f_teacher, 1.0)

    assert grad_check(net, (x, y), loss_fn=loss) < 1e-4


def test_grad_check_bic_stage2():
    net = Network(make_arch("calibnet-micro", input_size=8), seed=1)
    x, y = grad_batch()
    alpha = T.Tensor(np.array([1.2, 0.8, 1.1]), requires_grad=True)
    beta = T.Tensor(np.array([0.05, -0.1, 0.0]), requires_grad=True)

    def loss(n, xb, yb):
        o = n.predict(xb)  # frozen network
        return T.smooth_l1(inc.bic_apply(T.Tensor(o), (alpha, beta)), yb)

    errs = grad_check(net, (x, y), loss_fn=loss, extra_params={"alpha": alpha, "beta": beta}, per_param=True)
    assert errs["alpha"] < 1e-4 and errs["beta"] < 1e-4


# ---------------------------------------------------------------- training loop


@pytest.fixture(scope="module")
def base_and_data(tiny_domains):
    a, b = tiny_domains
    net = Network(make_arch("calibnet-micro", input_size=16), seed=0)
    train_base(net, a["train"], a["val"], TrainConfig(epochs=1, seed=0))
    old = inc.DomainData(a["train"], a["val"])
    new = inc.DomainData(b["train"], b["val"])
    return net, old, new


def params_bytes(net):
    return b"".join(p.data.tobytes() for p in net.params.values())


def test_finetune_equals_lwf_lambda_zero(base_and_data):
    base, old, new = base_and_data
    cfg = TrainConfig(epochs=1, seed=3, lr=0.01)
    a = inc.train_incremental(base, old, new, inc.StrategyConfig("finetune"), cfg, max_steps=5)
    b = inc.train_incremental(base, old, new, inc.StrategyConfig("lwf", lambda0=0.0), cfg, max_steps=5)
    assert params_bytes(a.net) == params_bytes(b.net)
    assert params_bytes(a.net) != params_bytes(base)


def test_lwf_equals_icarl_zero(base_and_data):
    base, old, new = base_and_data
    cfg = TrainConfig(epochs=1, seed=3, lr=0.01)
    a = inc.train_incremental(base, old, new, inc.StrategyConfig("lwf"), cfg, max_steps=5)
    b = inc.train_incremental(base, old, new, inc.StrategyConfig("icarl", exemplar_pct=0), cfg, max_steps=5)
    assert params_bytes(a.net) == params_bytes(b.net)


def test_history_fields_and_teacher_untouched(base_and_data):
    base, old, new = base_and_data
    before = base.param_hash()
    res = inc.train_incremental(base, old, new, inc.StrategyConfig("icarl", exemplar_pct=20), TrainConfig(epochs=2))
    assert base.param_hash() == before == res.teacher_hash
    assert [h["epoch"] for h in res.history] == [1, 2]
    for h in res.history:
        assert set(h) == {"epoch", "lr", "train_loss", "loss_terms", "val_muMSE_old", "val_muMSE_new"}
        assert set(h["loss_terms"]) == {"new", "distill"}
    assert len(res.memory.indices) == inc.memory_size(20, len(old.train))


def test_distill_on_new_samples_only(base_and_data):
    base, old, new = base_and_data
    s = inc.StrategyConfig("icarl", exemplar_pct=50, distill_exemplars=False)
    res = inc.train_incremental(base, old, new, s, TrainConfig(epochs=1))
    assert res.history[0]["loss_terms"]["distill"] is not None


def test_lucir_requires_cosine_head(base_and_data):
    base, old, new = base_and_data
    with pytest.raises(inc.StrategyError, match="cosine head"):
        inc.train_incremental(base, old, new, inc.StrategyConfig("lucir", exemplar_pct=10), TrainConfig(epochs=1))


def test_lucir_runs_with_cosine_head(base_and_data):
    _, old, new = base_and_data
    base = Network(make_arch("calibnet-micro", input_size=16, head="cosine"), seed=0)
    res = inc.train_incremental(base, old, new, inc.StrategyConfig("lucir", exemplar_pct=10), TrainConfig(epochs=1))
    assert res.history[0]["loss_terms"]["distill"] >= 0


def test_missing_old_data(base_and_data):
    base, _, new = base_and_data
    with pytest.raises(inc.StrategyError, match="missing old_data"):
        inc.train_incremental(base, inc.DomainData(None), new, inc.StrategyConfig("icarl", exemplar_pct=10),
                              TrainConfig(epochs=1))


def test_bic_stage_separation(base_and_data):
    base, old, new = base_and_data
    res = inc.train_incremental(base, old, new, inc.StrategyConfig("bic", exemplar_pct=20), TrainConfig(epochs=2))
    stage1 = [h for h in res.history if "epoch" in h]
    stage2 = [h for h in res.history if h.get("stage") == 2]
    assert len(stage1) == 2 and len(stage2) == 1
    assert all("bic" not in h for h in stage1)
    assert not res.bic.is_identity


def test_bic_without_room_for_validation(base_and_data):
    base, old, new = base_and_data
    with pytest.raises(inc.UnbalancedValidationError):
        inc.train_incremental(base, old, new, inc.StrategyConfig("bic", exemplar_pct=100), TrainConfig(epochs=1))
