import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import softmax

from common import ConfigError, DomainError, ShapeMismatchError, make_rng
from moe import (
    DeepSeekBalancer,
    DenseFFN,
    ExpertSet,
    LoadStats,
    MoEConfig,
    MoELayerSim,
    Nonlinearity,
    RouterParams,
    cov,
    deepseek_update,
    load_balancing_grad,
    load_balancing_loss,
    max_prob_std,
    moe_forward,
    moe_forward_detailed,
    router_forward,
    routing_backward,
    routing_dump,
    simplex_project,
    specialization_matrix,
    top_k_select,
    uniform_band_fraction,
    z_loss,
    z_loss_grad,
)

D = 8
H = 12


def random_experts(rng, n, gated=True):
    return ExpertSet.from_experts([DenseFFN.random(D, H, rng, gated=gated) for _ in range(n)])


def random_router(rng, n, std=1.0):
    return RouterParams(rng.standard_normal((D, n)) * std)


def test_router_with_zero_weights_is_uniform():
    _, batch = router_forward(make_rng(0).standard_normal((5, D)), RouterParams(np.zeros((D, 4))))
    np.testing.assert_allclose(batch.probs, 0.25, atol=1e-15)


def test_router_single_token():
    logits, batch = router_forward(np.array([[1.0]]), RouterParams(np.array([[1.0, 0.0]])))
    np.testing.assert_array_equal(logits, [[1.0, 0.0]])
    np.testing.assert_allclose(batch.probs, [[0.731059, 0.268941]], atol=1e-6)


def test_router_is_shift_invariant():
    rng = make_rng(1)
    tokens = rng.standard_normal((20, D))
    W_g = rng.standard_normal((D, 4))
    _, batch = router_forward(tokens, RouterParams(W_g))
    # An always-on feature with a constant row adds c to every logit.
    shifted_tokens = np.hstack([tokens, np.ones((20, 1))])
    shifted_W = np.vstack([W_g, np.full((1, 4), 3.7)])
    _, shifted = router_forward(shifted_tokens, RouterParams(shifted_W))
    np.testing.assert_allclose(shifted.probs, batch.probs, atol=1e-12)


def test_router_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        router_forward(np.ones((3, D + 1)), RouterParams(np.ones((D, 4))))
    with pytest.raises(ShapeMismatchError):
        RouterParams(np.ones((D, 1)))


@given(st.integers(min_value=0, max_value=10_000), st.floats(min_value=-50, max_value=50))
def test_router_rows_on_simplex(seed, scale):
    rng = make_rng(seed)
    _, batch = router_forward(rng.standard_normal((10, D)), RouterParams(rng.standard_normal((D, 5)) * scale))
    assert np.all(batch.probs >= 0)
    np.testing.assert_allclose(np.sum(batch.probs, axis=1), 1.0, atol=1e-12)


def test_top_k_select_examples():
    indices, gates = top_k_select(np.array([0.4, 0.3, 0.2, 0.1]), 2)
    np.testing.assert_array_equal(indices, [0, 1])
    np.testing.assert_array_equal(gates, [0.4, 0.3])
    _, renormalized = top_k_select(np.array([0.4, 0.3, 0.2, 0.1]), 2, renormalize=True)
    np.testing.assert_allclose(renormalized, [4 / 7, 3 / 7], atol=1e-15)
    indices, _ = top_k_select(np.full(4, 0.25), 2)
    np.testing.assert_array_equal(indices, [0, 1])


def test_top_k_select_unordered_row():
    indices, gates = top_k_select(np.array([0.1, 0.2, 0.4, 0.3]), 3)
    np.testing.assert_array_equal(indices, [2, 3, 1])
    np.testing.assert_array_equal(gates, [0.4, 0.3, 0.2])


def test_top_k_select_too_many():
    with pytest.raises(DomainError):
        top_k_select(np.full(4, 0.25), 5)
    with pytest.raises(DomainError):
        top_k_select(np.full(4, 0.25), 0)


@given(st.integers(min_value=0, max_value=10_000), st.integers(min_value=1, max_value=6))
def test_top_k_gates_are_row_entries(seed, k):
    probs = softmax(make_rng(seed).standard_normal((16, 6)), axis=1)
    indices, gates = top_k_select(probs, k)
    np.testing.assert_array_equal(gates, np.take_along_axis(probs, indices, axis=1))
    assert all(len(set(row)) == k for row in indices.tolist())
    assert np.all(np.diff(gates, axis=1) <= 0)


def test_top_k_invariant_to_logit_shift():
    logits = make_rng(2).standard_normal((50, 8))
    plain, _ = top_k_select(softmax(logits, axis=1), 3)
    shifted, _ = top_k_select(softmax(logits + 11.0, axis=1), 3)
    np.testing.assert_array_equal(plain, shifted)


def test_identical_experts_reproduce_dense_ffn():
    rng = make_rng(3)
    dense = DenseFFN.random(D, H, rng)
    experts = ExpertSet.from_experts([dense] * 4)
    tokens = rng.standard_normal((1000, D))
    config = MoEConfig(n_experts=4, top_k=2, renormalize_gates=True, d_model=D, hidden_dim=H)
    output = moe_forward(tokens, experts, None, random_router(rng, 4), config)
    assert np.max(np.abs(output - dense.forward(tokens))) < 1e-6


def test_all_experts_selected_is_full_mixture():
    rng = make_rng(4)
    experts = random_experts(rng, 4)
    router = random_router(rng, 4)
    tokens = rng.standard_normal((30, D))
    config = MoEConfig(n_experts=4, top_k=4, d_model=D, hidden_dim=H)
    probs = softmax(tokens @ router.W_g, axis=1)
    expected = sum(probs[:, [i]] * experts.expert(i).forward(tokens) for i in range(4))
    np.testing.assert_allclose(moe_forward(tokens, experts, None, router, config), expected, atol=1e-12)


def test_zero_experts_leave_only_shared_output():
    rng = make_rng(5)
    zero = ExpertSet(np.zeros((4, D, H)), np.zeros((4, H, D)), np.zeros((4, D, H)))
    shared = random_experts(rng, 2)
    tokens = rng.standard_normal((10, D))
    config = MoEConfig(n_experts=4, top_k=2, n_shared=2, d_model=D, hidden_dim=H)
    output = moe_forward(tokens, zero, shared, random_router(rng, 4), config)
    expected = shared.expert(0).forward(tokens) + shared.expert(1).forward(tokens)
    np.testing.assert_allclose(output, expected, atol=1e-12)


def test_forward_all_matches_single_experts():
    rng = make_rng(6)
    for gated in (True, False):
        experts = random_experts(rng, 3, gated=gated)
        tokens = rng.standard_normal((7, D))
        everything = experts.forward_all(tokens)
        for i in range(3):
            np.testing.assert_allclose(everything[:, i], experts.expert(i).forward(tokens), atol=1e-12)


def test_expert_count_must_match_router():
    rng = make_rng(7)
    config = MoEConfig(n_experts=3, top_k=1, d_model=D, hidden_dim=H)
    with pytest.raises(ShapeMismatchError):
        moe_forward(rng.standard_normal((2, D)), random_experts(rng, 3), None, random_router(rng, 4), config)


def test_inconsistent_ffn_shapes():
    with pytest.raises(ShapeMismatchError):
        DenseFFN(np.ones((D, H)), np.ones((H + 1, D)))
    with pytest.raises(ShapeMismatchError):
        ExpertSet(np.ones((2, D, H)), np.ones((3, H, D)))


@pytest.mark.parametrize("nonlinearity", list(Nonlinearity))
def test_nonlinearities(nonlinearity):
    x = np.array([-2.0, 0.0, 1.5])
    expected = {
        Nonlinearity.SILU: x / (1 + np.exp(-x)),
        Nonlinearity.TANH: np.tanh(x),
        Nonlinearity.RELU: np.array([0.0, 0.0, 1.5]),
    }[nonlinearity]
    np.testing.assert_allclose(nonlinearity.apply(x), expected)
    assert Nonlinearity.from_code(nonlinearity.code) is nonlinearity


@pytest.mark.parametrize("renormalize", [False, True])
def test_routing_backward_matches_finite_differences(renormalize):
    rng = make_rng(8)
    experts = random_experts(rng, 4)
    tokens = rng.standard_normal((6, D))
    config = MoEConfig(n_experts=4, top_k=2, renormalize_gates=renormalize, d_model=D, hidden_dim=H)
    result = moe_forward_detailed(tokens, experts, None, random_router(rng, 4), config)
    upstream = rng.standard_normal((6, D))
    grad = routing_backward(result, upstream)

    def objective(probs):
        gates = np.take_along_axis(probs, result.indices, axis=1)
        if renormalize:
            gates = gates / np.sum(gates, axis=1, keepdims=True)
        return np.sum(upstream * np.einsum("tk,tkd->td", gates, result.selected_outputs))

    step = 1e-6
    for t in range(6):
        for i in range(4):
            up, down = result.probs.copy(), result.probs.copy()
            up[t, i] += step
            down[t, i] -= step
            fd = (objective(up) - objective(down)) / (2 * step)
            assert grad[t, i] == pytest.approx(fd, abs=1e-7)
            if i not in result.indices[t]:
                assert grad[t, i] == 0.0


def test_load_balancing_uniform_is_one():
    probs = np.full((4, 4), 0.25)
    stats = LoadStats.from_routing(probs, np.array([[0, 1], [2, 3], [0, 1], [2, 3]]))
    np.testing.assert_array_equal(stats.f, [0.5] * 4)
    assert load_balancing_loss(stats) == 1.0


def test_load_balancing_collapsed_is_n():
    probs = np.tile([1.0, 0.0, 0.0, 0.0], (10, 1))
    stats = LoadStats.from_routing(probs, np.zeros((10, 1), dtype=int))
    assert load_balancing_loss(stats) == pytest.approx(4.0)


def test_load_balancing_matches_hand_formula():
    rng = make_rng(9)
    probs = softmax(rng.standard_normal((100, 6)), axis=1)
    indices, _ = top_k_select(probs, 2)
    stats = LoadStats.from_routing(probs, indices)
    assert np.sum(stats.f) == pytest.approx(2.0, abs=1e-9)
    assert np.sum(stats.P) == pytest.approx(1.0, abs=1e-9)
    f = np.array([np.sum(indices == i) for i in range(6)]) / 100
    expected = 6 * np.sum(f / 2 * probs.mean(axis=0))
    assert load_balancing_loss(stats) == pytest.approx(expected, rel=1e-12)


def test_load_balancing_with_uniform_dispatch_is_mean_probability_sum():
    probs = softmax(make_rng(10).standard_normal((4, 4)), axis=1)
    stats = LoadStats.from_routing(probs, np.array([[0], [1], [2], [3]]))
    assert load_balancing_loss(stats) == pytest.approx(1.0, abs=1e-12)


def test_load_balancing_grad_matches_finite_differences():
    probs = softmax(make_rng(11).standard_normal((5, 3)), axis=1)
    indices = np.array([[0], [0], [1], [2], [0]])
    stats = LoadStats.from_routing(probs, indices)
    grad = load_balancing_grad(stats, 5)
    step = 1e-6
    for t, i in [(0, 0), (3, 1), (4, 2)]:
        up, down = probs.copy(), probs.copy()
        up[t, i] += step
        down[t, i] -= step
        fd = (
            load_balancing_loss(LoadStats.from_routing(up, indices))
            - load_balancing_loss(LoadStats.from_routing(down, indices))
        ) / (2 * step)
        assert grad[t, i] == pytest.approx(fd, abs=1e-7)


def test_z_loss_examples():
    assert z_loss(np.zeros((3, 4))) == pytest.approx(np.log(4) ** 2, abs=1e-12)
    assert z_loss(np.full((1, 5), 2.5)) == pytest.approx((2.5 + np.log(5)) ** 2, abs=1e-12)
    logits = make_rng(12).standard_normal((40, 6))
    naive = np.mean(np.log(np.sum(np.exp(logits), axis=1)) ** 2)
    assert z_loss(logits) == pytest.approx(naive, rel=1e-12)


def test_z_loss_is_stable_for_large_logits():
    assert z_loss(np.array([[1000.0, 1000.0]])) == pytest.approx((1000 + np.log(2)) ** 2)


def test_z_loss_grad_matches_finite_differences():
    logits = make_rng(13).standard_normal((4, 3))
    grad = z_loss_grad(logits)
    step = 1e-6
    for t in range(4):
        for i in range(3):
            up, down = logits.copy(), logits.copy()
            up[t, i] += step
            down[t, i] -= step
            assert grad[t, i] == pytest.approx((z_loss(up) - z_loss(down)) / (2 * step), abs=1e-8)


def test_deepseek_balanced_loads_leave_biases():
    balancer = DeepSeekBalancer(np.array([0.1, -0.2, 0.0]), 0.001)
    stats = LoadStats(f=np.full(3, 1 / 3), P=np.full(3, 1 / 3), loads=np.array([5.0, 5.0, 5.0]), top_k=1)
    np.testing.assert_array_equal(deepseek_update(balancer, stats).biases, balancer.biases)


def test_deepseek_overloaded_expert_loses_bias():
    balancer = DeepSeekBalancer.zeros(3, 0.001)
    stats = LoadStats(f=np.zeros(3), P=np.zeros(3), loads=np.array([10.0, 2.0, 3.0]), top_k=1)
    updated = deepseek_update(balancer, stats)
    np.testing.assert_array_equal(updated.biases, [-0.001, 0.001, 0.001])
    np.testing.assert_array_equal(balancer.biases, [0.0, 0.0, 0.0])


def test_deepseek_balancer_validation():
    with pytest.raises(DomainError):
        DeepSeekBalancer(np.zeros(2), 0.0)
    with pytest.raises(DomainError):
        DeepSeekBalancer(np.array([np.nan, 0.0]), 0.1)


def test_deepseek_trace_reduces_cov():
    p0 = np.array([0.55, 0.6, 0.65, 0.7])
    probs = np.stack([p0, 1 - p0], axis=1)
    balancer = DeepSeekBalancer.zeros(2, 0.06)
    trace = []
    for _ in range(3):
        indices, gates = top_k_select(probs, 1, biases=balancer.biases)
        np.testing.assert_array_equal(gates, np.take_along_axis(probs, indices, axis=1))
        stats = LoadStats.from_routing(probs, indices)
        trace.append((stats.loads.tolist(), cov(stats.loads)))
        balancer = deepseek_update(balancer, stats)
    assert [loads for loads, _ in trace] == [[4.0, 0.0], [3.0, 1.0], [2.0, 2.0]]
    assert [value for _, value in trace] == pytest.approx([1.0, 0.5, 0.0])


def test_biases_change_selection_not_gates():
    rng = make_rng(14)
    experts = random_experts(rng, 4)
    router = random_router(rng, 4)
    tokens = rng.standard_normal((50, D))
    config = MoEConfig(n_experts=4, top_k=2, d_model=D, hidden_dim=H)
    balancer = DeepSeekBalancer(np.array([0.3, -0.3, 0.0, 0.1]), 0.001)
    result = moe_forward_detailed(tokens, experts, None, router, config, balancer)
    np.testing.assert_array_equal(result.gates, np.take_along_axis(result.probs, result.indices, axis=1))
    plain = moe_forward_detailed(tokens, experts, None, router, config)
    np.testing.assert_array_equal(result.probs, plain.probs)


def test_layer_sim_updates_balancer():
    rng = make_rng(15)
    config = MoEConfig(n_experts=4, top_k=1, d_model=D, hidden_dim=H)
    layer = MoELayerSim(random_router(rng, 4, 2.0), random_experts(rng, 4), config, balancer=DeepSeekBalancer.zeros(4, 0.01))
    result = layer.forward(rng.standard_normal((64, D)))
    layer.update_balancer(result)
    loads = result.load_stats().loads
    assert np.all(np.abs(layer.balancer.biases) <= 0.01)
    assert np.all(np.sign(layer.balancer.biases) == -np.sign(loads - loads.mean()))


@pytest.mark.parametrize(
    "loads, expected", [([100, 100, 100, 100], 0.0), ([150, 50, 100, 100], np.sqrt(1250) / 100), ([42], 0.0)]
)
def test_cov(loads, expected):
    assert cov(loads) == pytest.approx(expected, abs=1e-12)


def test_cov_needs_positive_mean():
    with pytest.raises(DomainError):
        cov([0, 0, 0])


@pytest.mark.parametrize(
    "row, expected", [([1, 0, 0], [0, 0]), ([0, 0, 1], [0.5, 0.866025]), ([1 / 3, 1 / 3, 1 / 3], [0.5, 0.288675])]
)
def test_simplex_project(row, expected):
    np.testing.assert_allclose(simplex_project(np.array(row, dtype=float)), expected, atol=1e-6)


def test_simplex_project_rows_and_errors():
    assert simplex_project(np.eye(3)).shape == (3, 2)
    with pytest.raises(ShapeMismatchError):
        simplex_project(np.full((2, 4), 0.25))


def test_routing_summaries():
    probs = np.array([[0.25, 0.25, 0.25, 0.25], [0.7, 0.1, 0.1, 0.1], [0.28, 0.24, 0.24, 0.24]])
    assert uniform_band_fraction(probs) == pytest.approx(8 / 12)
    assert max_prob_std(probs) == pytest.approx(np.std([0.25, 0.7, 0.28]))
    table = specialization_matrix(probs, ["b", "a", "b"])
    assert list(table.columns) == ["source_tag", "expert_0", "expert_1", "expert_2", "expert_3"]
    assert table["source_tag"].tolist() == ["a", "b"]
    assert table.loc[1, "expert_0"] == pytest.approx(0.265)


def test_routing_dump_layout():
    probs = np.array([[0.5, 0.3, 0.2], [0.1, 0.1, 0.8]])
    dump = routing_dump(2, probs, np.array([[0, 1], [2, 0]]), ["x", "y"])
    assert list(dump.columns) == ["layer", "token_id", "source_tag", "p_0", "p_1", "p_2", "selected_indices"]
    assert dump["selected_indices"].tolist() == ["0 1", "2 0"]
    assert dump["layer"].tolist() == [2, 2]
    assert routing_dump(0, probs, None, None)["selected_indices"].tolist() == ["", ""]


def test_config_validation():
    config = MoEConfig.from_dict({"n_experts": 16, "top_k": 8, "nonlinearity": "tanh"})
    assert config.nonlinearity is Nonlinearity.TANH
    assert MoEConfig.from_dict(config.as_dict()).as_dict() == config.as_dict()
    with pytest.raises(DomainError):
        MoEConfig(n_experts=4, top_k=5)
    for data in ({"top_k": 5}, {"n_experts": 1}, {"nonlinearity": "gelu"}, {"n_shared": -1}, {"experts": 4}):
        with pytest.raises(ConfigError):
            MoEConfig.from_dict(data)
