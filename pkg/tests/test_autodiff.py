import numpy as np
import pytest

from loss_convexification.autodiff import OMEGA, ParamSet, backward, check_gradient, forward
from loss_convexification.errors import NonFiniteError, PreconditionError, ShapeMismatchError, TapeConsumedError


def squared_distance(tape, inputs, params, omega):
    return tape.squared_norm(omega)


def two_layer(tape, inputs, params, omega):
    (x,) = inputs
    hidden = tape.tanh(tape.add(tape.matmul(tape.constant(x), params["w1"]), params["b1"]))
    out = tape.matmul(hidden, params["w2"])
    return tape.squared_norm(tape.sub(tape.reshape(out, (2,)), omega))


def test_forward_quadratic_value():
    loss, tape = forward(squared_distance, (), ParamSet(), np.array([3.0, 4.0]))
    assert loss == 25.0
    assert backward(tape)[OMEGA].tolist() == [6.0, 8.0]


def test_constant_builder_has_zero_gradients():
    params = ParamSet({"w": np.ones((2, 2))})
    loss, tape = forward(lambda tape, inputs, params, omega: tape.constant(0.0), (), params, np.zeros(2))
    grads = tape.backward()
    assert loss == 0.0
    assert not np.any(grads["w"])
    assert not np.any(grads[OMEGA])


def test_two_layer_matches_straight_line_evaluation():
    rng = np.random.default_rng(0)
    params = ParamSet({"w1": rng.standard_normal((3, 4)), "b1": rng.standard_normal(4), "w2": rng.standard_normal((4, 2))})
    x = rng.standard_normal((1, 3))
    omega = np.array([0.3, -0.7])
    loss, _ = forward(two_layer, (x,), params, omega)
    expected = np.sum(((np.tanh(x @ params["w1"] + params["b1"]) @ params["w2"]).ravel() - omega) ** 2)
    assert loss == pytest.approx(expected, rel=1e-14)


def test_parameter_not_in_loss_gets_zero_gradient():
    params = ParamSet({"unused": np.ones(3)})
    _, tape = forward(squared_distance, (), params, np.array([1.0, 2.0]))
    assert np.array_equal(tape.backward()["unused"], np.zeros(3))


def test_backward_twice_is_rejected():
    _, tape = forward(squared_distance, (), ParamSet(), np.ones(2))
    tape.backward()
    with pytest.raises(TapeConsumedError):
        tape.backward()


def test_shape_mismatch_names_the_node():
    def bad(tape, inputs, params, omega):
        return tape.squared_norm(tape.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3)))))

    with pytest.raises(ShapeMismatchError, match=r"node 3 \(matmul\)"):
        forward(bad, (), ParamSet(), np.zeros(1))


def test_non_finite_intermediate_raises():
    def log_zero(tape, inputs, params, omega):
        return tape.sum_reduce(tape.log(tape.constant(np.zeros(2))))

    with pytest.raises(NonFiniteError):
        forward(log_zero, (), ParamSet(), np.zeros(1))


def test_omega_is_a_reserved_parameter_name():
    with pytest.raises(PreconditionError):
        ParamSet({OMEGA: np.zeros(1)})


def test_forward_is_deterministic():
    rng = np.random.default_rng(1)
    params = ParamSet({"w1": rng.standard_normal((3, 4)), "b1": rng.standard_normal(4), "w2": rng.standard_normal((4, 2))})
    x = rng.standard_normal((1, 3))
    first_loss, first = forward(two_layer, (x,), params, np.ones(2))
    second_loss, second = forward(two_layer, (x,), params, np.ones(2))
    assert first_loss == second_loss
    first_grads, second_grads = first.backward(), second.backward()
    for name in first_grads:
        assert np.array_equal(first_grads[name], second_grads[name])


def test_check_gradient_passes_on_quadratic():
    report = check_gradient(squared_distance, ParamSet(), np.array([0.5, -1.5]), step=1e-5, tol=1e-5)
    assert report.passed
    assert not report.kinks


def test_check_gradient_passes_on_two_layer_network():
    rng = np.random.default_rng(2)
    params = ParamSet({"w1": rng.standard_normal((3, 4)), "b1": rng.standard_normal(4), "w2": rng.standard_normal((4, 2))})
    report = check_gradient(two_layer, params, np.array([0.1, 0.2]), inputs=(rng.standard_normal((1, 3)),))
    assert report.passed
    assert len(report.coordinates) == 12 + 4 + 8 + 2


def test_relu_kink_is_flagged_and_excluded():
    def relu_sum(tape, inputs, params, omega):
        return tape.sum_reduce(tape.relu(omega))

    report = check_gradient(relu_sum, ParamSet(), np.array([0.0, 1.0]))
    flagged = [c.index for c in report.kinks]
    assert flagged == [(0,)]
    assert report.passed


def test_check_gradient_rejects_bad_arguments():
    with pytest.raises(PreconditionError):
        check_gradient(squared_distance, ParamSet(), np.zeros(2), step=0.0)
    with pytest.raises(PreconditionError):
        check_gradient(squared_distance, ParamSet(), np.zeros(2), wrt="theta")


@pytest.mark.parametrize("op", ["sin", "cos", "exp", "sigmoid", "tanh", "abs"])
def test_elementwise_primitives_pass_gradient_check(op):
    def builder(tape, inputs, params, omega):
        return tape.sum_reduce(tape.mul(getattr(tape, op)(omega), params["w"]))

    params = ParamSet({"w": np.array([0.7, -1.3, 2.0])})
    assert check_gradient(builder, params, np.array([0.4, -0.9, 1.1])).passed


def test_softmax_and_division_pass_gradient_check():
    def builder(tape, inputs, params, omega):
        probs = tape.softmax(tape.mul(omega, params["w"]))
        ratio = tape.div(tape.index(probs, 0), tape.add(tape.index(probs, 1), tape.constant(1.0)))
        return tape.add(ratio, tape.sum_reduce(tape.mul(tape.log_softmax(omega), params["w"])))

    params = ParamSet({"w": np.array([0.5, 1.5, -0.5])})
    assert check_gradient(builder, params, np.array([0.2, -0.4, 0.9])).passed


def test_backward_is_linear():
    rng = np.random.default_rng(4)
    params = ParamSet({"w1": rng.standard_normal((3, 4)), "b1": rng.standard_normal(4), "w2": rng.standard_normal((4, 2))})
    x = rng.standard_normal((1, 3))
    omega = np.array([0.3, -0.7])
    a, b = 1.5, -0.25

    def quartic(tape, inputs, params, omega):
        return tape.add(tape.squared_norm(tape.mul(params["w2"], params["w2"])), tape.sum_reduce(tape.sin(omega)))

    def combined(tape, inputs, params, omega):
        return tape.add(tape.scale(two_layer(tape, inputs, params, omega), a), tape.scale(quartic(tape, inputs, params, omega), b))

    grads_f = forward(two_layer, (x,), params, omega)[1].backward()
    grads_g = forward(quartic, (x,), params, omega)[1].backward()
    grads = forward(combined, (x,), params, omega)[1].backward()
    for name in [*params, OMEGA]:
        assert np.allclose(grads[name], a * grads_f[name] + b * grads_g[name], rtol=1e-12, atol=1e-12)
