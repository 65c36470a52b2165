"""Model-layer tests: FFN composition oracle, mixture output algebra,
gradient sparsity, parameter accounting, and the similarity probe."""

import numpy as np
import pytest

from moelab import kernels
from moelab.autodiff import Tape
from moelab.convert import ConversionConfig, convert_model
from moelab.errors import ConfigError, ShapeError
from moelab.model import (
    Model,
    ModelSpec,
    bind_params,
    expert_output_similarity,
    ffn_forward,
    ffn_param_count,
    forward_model,
    forward_numpy,
    init_dense_model,
    moe_param_count,
    pair_cosine,
)
from moelab.precision import PrecisionPolicy
from moelab.routing import GateSpec, gate_param_count

DESK = ModelSpec()  # hidden 64, inner 256, 6 blocks


def small_dense(n_layers=2, hidden=6, inner=10, seed=0):
    spec = ModelSpec(hidden=hidden, inner=inner, n_layers=n_layers)
    return init_dense_model(spec, np.random.default_rng(seed))


def test_ffn_forward_matches_hand_composition():
    model = small_dense(n_layers=1)
    x = np.random.default_rng(1).standard_normal((2, 6))
    tape = Tape()
    bound = bind_params(tape, model, PrecisionPolicy(), training=False)
    out = ffn_forward(tape, tape.const(x), bound, "block0.ffn")

    p = model.params
    h = kernels.gelu(kernels.matmul(x, p["block0.ffn.w1"]) + p["block0.ffn.b1"])
    expect = kernels.matmul(h, p["block0.ffn.w2"]) + p["block0.ffn.b2"]
    np.testing.assert_allclose(out.data, expect, rtol=0, atol=1e-12)


def test_forward_numpy_matches_tape_forward():
    model = small_dense(n_layers=3)
    x = np.random.default_rng(2).standard_normal((5, 6))
    tape_out = forward_model(Tape(), model, x).output.data
    np.testing.assert_array_equal(forward_numpy(model, x), tape_out)


def test_cloned_expert_output_bitwise_equals_dense_ffn():
    model = small_dense(n_layers=1)
    moe = convert_model(model, ConversionConfig(shared_init="verify_zero"))
    x = np.random.default_rng(3).standard_normal((4, 6))

    tape = Tape()
    bound_d = bind_params(tape, model, PrecisionPolicy(), training=False)
    dense_out = ffn_forward(tape, tape.const(x), bound_d, "block0.ffn")

    tape2 = Tape()
    bound_m = bind_params(tape2, moe, PrecisionPolicy(), training=False)
    for j in range(moe.spec.n_routed):
        expert_out = ffn_forward(tape2, tape2.const(x), bound_m, f"block0.routed{j}")
        assert np.array_equal(expert_out.data, dense_out.data)


def test_moe_with_zero_scaling_is_shared_only():
    # clone_dense shared + routed scaling 0: the routed term vanishes and the
    # blocks degrade to exactly the dense stack.
    dense = small_dense(n_layers=2)
    cfg = ConversionConfig(shared_init="clone_dense", routed_scaling=0.0,
                           gate=GateSpec(top_k=1))
    moe = convert_model(dense, cfg)
    x = np.random.default_rng(4).standard_normal((7, 6))
    m_out = forward_model(Tape(), moe, x).output.data
    d_out = forward_model(Tape(), dense, x).output.data
    np.testing.assert_array_equal(m_out, d_out)


def test_single_token_forced_selection_hand_oracle():
    # 1 token, 2 distinct routed experts, top_k=1: output adds the residual,
    # the shared output and weight * selected expert.
    dense = small_dense(n_layers=1)
    moe = convert_model(
        dense, ConversionConfig(shared_init="micro_noise", gate=GateSpec(top_k=1), seed=9)
    )
    # make the experts distinct and force selection of expert 0
    rng = np.random.default_rng(5)
    moe.params["block0.routed1.w1"] = rng.standard_normal((6, 10)) * 0.3
    moe.params["block0.gate.w"] = np.zeros((6, 2))  # uniform scores, tie -> expert 0

    x = rng.standard_normal((1, 6))
    result = forward_model(Tape(), moe, x, training=False)
    decision = result.decisions[0]
    np.testing.assert_array_equal(decision.indices, [[0]])
    w0 = decision.weights.data[0, 0]
    assert w0 == 0.5  # uniform softmax over two experts

    p = moe.params

    def ffn(prefix, xx):
        h = kernels.gelu(kernels.matmul(xx, p[f"{prefix}.w1"]) + p[f"{prefix}.b1"])
        return kernels.matmul(h, p[f"{prefix}.w2"]) + p[f"{prefix}.b2"]

    expect = x + ffn("block0.shared0", x) + w0 * ffn("block0.routed0", x)
    np.testing.assert_allclose(result.output.data, expect, rtol=0, atol=1e-12)


def test_parameter_accounting():
    dense = init_dense_model(DESK, np.random.default_rng(0))
    for kind in ("linear", "mlp", "cross_attention"):
        cfg = ConversionConfig(gate=GateSpec(kind=kind, top_k=2))
        moe = convert_model(dense, cfg)
        per_ffn = ffn_param_count(DESK.hidden, DESK.inner)
        gate = gate_param_count(cfg.gate, DESK.hidden, cfg.n_routed)
        expected = dense.param_count() + DESK.n_layers * (
            (cfg.n_routed + cfg.n_shared - 1) * per_ffn + gate
        )
        assert moe.param_count() == expected == moe_param_count(moe.spec)


def test_unselected_experts_receive_no_gradient():
    dense = small_dense(n_layers=1)
    moe = convert_model(dense, ConversionConfig(gate=GateSpec(top_k=1), seed=2))
    moe.frozen = set()  # unfreeze routed for this check
    # force every token to expert 0
    moe.params["block0.gate.w"] = np.zeros((6, 2))

    x = np.random.default_rng(6).standard_normal((5, 6))
    tape = Tape()
    result = forward_model(tape, moe, x, training=True)
    loss = tape.mean_all(tape.mul(result.output, result.output))
    for a in result.aux_losses:
        loss = tape.add(loss, a)
    tape.backward(loss)

    grads = {m.name: m.grad for m in result.bound.values()}
    assert np.linalg.norm(grads["block0.routed0.w1"]) > 0
    np.testing.assert_array_equal(grads["block0.routed1.w1"], 0.0)
    np.testing.assert_array_equal(grads["block0.routed1.b2"], 0.0)


def test_zero_shared_expert_gradient_structure():
    # With shared weights exactly zero: gelu(0)=0 kills dW2, and W2=0 blocks
    # any signal into W1/b1. Only the output bias b2 sees gradient.
    dense = small_dense(n_layers=1)
    moe = convert_model(dense, ConversionConfig(shared_init="verify_zero", gate=GateSpec(top_k=1)))

    x = np.random.default_rng(7).standard_normal((6, 6))
    tape = Tape()
    result = forward_model(tape, moe, x, training=True)
    loss = tape.mean_all(tape.mul(result.output, result.output))
    tape.backward(loss)

    grads = {m.name: m.grad for m in result.bound.values()}
    np.testing.assert_array_equal(grads["block0.shared0.w1"], 0.0)
    np.testing.assert_array_equal(grads["block0.shared0.w2"], 0.0)
    np.testing.assert_array_equal(grads["block0.shared0.b1"], 0.0)
    assert np.linalg.norm(grads["block0.shared0.b2"]) > 0


def test_frozen_params_bind_as_constants():
    dense = small_dense(n_layers=1)
    moe = convert_model(dense, ConversionConfig())
    tape = Tape()
    bound = bind_params(tape, moe, PrecisionPolicy(), training=True)
    assert not bound["block0.routed0.w1"].requires_grad
    assert bound["block0.shared0.w1"].requires_grad
    gate_names = [n for n in bound if ".gate." in n]
    assert gate_names and all(bound[n].requires_grad for n in gate_names)


def test_forward_rejects_bad_input_width():
    model = small_dense()
    with pytest.raises(ShapeError):
        forward_model(Tape(), model, np.zeros((3, 7)))


def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec(activation="swiglu")
    with pytest.raises(ConfigError):
        ModelSpec(kind="moe", n_routed=2, gate=GateSpec(top_k=3))
    with pytest.raises(ConfigError):
        ModelSpec(ffn_bias=False)


def test_spec_json_round_trip():
    spec = ModelSpec(kind="moe", gate=GateSpec(kind="mlp", top_k=2, alpha=0.05))
    again = ModelSpec.from_jsonable(spec.to_jsonable())
    assert again == spec


# --- similarity probe -------------------------------------------------------


def test_similarity_cloned_experts_exactly_one():
    dense = small_dense()
    moe = convert_model(dense, ConversionConfig())
    probe = np.random.default_rng(8).standard_normal((16, 6))
    rep = expert_output_similarity(moe, 0, probe)
    assert rep["pairs"][(0, 1)] == 1.0


def test_similarity_negated_expert_exactly_minus_one():
    dense = small_dense()
    moe = convert_model(dense, ConversionConfig())
    moe.params["block0.routed1.w2"] = -moe.params["block0.routed1.w2"]
    moe.params["block0.routed1.b2"] = -moe.params["block0.routed1.b2"]
    probe = np.random.default_rng(9).standard_normal((16, 6))
    rep = expert_output_similarity(moe, 0, probe)
    assert rep["pairs"][(0, 1)] == -1.0


def test_similarity_zero_expert_skipped_with_flag():
    dense = small_dense()
    moe = convert_model(dense, ConversionConfig())
    for f in ("w1", "b1", "w2", "b2"):
        moe.params[f"block0.routed1.{f}"] = np.zeros_like(moe.params[f"block0.routed1.{f}"])
    probe = np.random.default_rng(10).standard_normal((4, 6))
    rep = expert_output_similarity(moe, 0, probe)
    assert rep["pairs"] == {}
    assert rep["skipped_pairs"] == [(0, 1)]


def test_pair_cosine_orthogonal_rows():
    a = np.array([[1.0, 0.0], [2.0, 0.0]])
    b = np.array([[0.0, 1.0], [0.0, -3.0]])
    mean, excluded = pair_cosine(a, b)
    assert mean == 0.0 and excluded == 0


def test_pair_cosine_excludes_zero_rows():
    a = np.array([[1.0, 0.0], [0.0, 0.0]])
    b = np.array([[1.0, 0.0], [1.0, 1.0]])
    mean, excluded = pair_cosine(a, b)
    assert mean == 1.0 and excluded == 1


def test_model_copy_is_deep():
    model = small_dense()
    dup = model.copy()
    dup.params["block0.ffn.w1"][0, 0] += 1.0
    assert model.params["block0.ffn.w1"][0, 0] != dup.params["block0.ffn.w1"][0, 0]
