"""Recurrent step-size predictor: cells, proposal head, box projection.

The zero-parameter proposal constant is the softplus head evaluated at
zero on both branches: log(2)^2.
"""

import numpy as np
import pytest
from scipy.special import expit

import helpers
import oracles
from curvmm import autodiff as ad
from curvmm import curvature, predictor
from curvmm.exceptions import ShapeError

LOG2_SQUARED = 0.4804530139182014


def _zero_cell(h):
    w = np.zeros((h, h))
    b = np.zeros(h)
    return predictor.CellParameters(
        w.copy(), w.copy(), b.copy(), w.copy(), w.copy(), b.copy(),
        w.copy(), w.copy(), b.copy(), w.copy(), w.copy(), b.copy())


def _saturated_cell(h, bias=50.0):
    """Gates pinned open; candidate passes the input straight through."""
    cell = _zero_cell(h)
    cell.b_i = np.full(h, bias)
    cell.b_f = np.full(h, bias)
    cell.b_o = np.full(h, bias)
    cell.wx_c = np.eye(h)
    return cell


class TestCellStep:
    def test_all_zero(self):
        cell = _zero_cell(3)
        h, c = predictor.cell_step(cell, np.zeros((3, 2)), np.zeros((3, 2)),
                                   np.zeros((3, 2)))
        assert np.all(h == 0.0)
        assert np.all(c == 0.0)

    def test_saturated_gates_accumulate(self):
        # Open gates turn the cell into c' = c + tanh(input); two steps
        # compared against that hand recurrence.
        cell = _saturated_cell(2)
        u1 = np.array([[0.3], [-0.8]])
        u2 = np.array([[1.2], [0.5]])
        h, c = predictor.cell_step(cell, u1, np.zeros((2, 1)), np.zeros((2, 1)))
        c1_hand = np.tanh(u1)
        assert np.allclose(c, c1_hand, atol=1e-12)
        assert np.allclose(h, np.tanh(c1_hand), atol=1e-12)
        h, c = predictor.cell_step(cell, u2, h, c)
        c2_hand = c1_hand + np.tanh(u2)
        assert np.allclose(c, c2_hand, atol=1e-12)
        assert np.allclose(h, np.tanh(c2_hand), atol=1e-12)

    def test_matches_straight_line_recurrence(self):
        rng = np.random.default_rng(33)
        h_dim = 4
        arrays = [rng.standard_normal((h_dim, h_dim)) * 0.5 for _ in range(8)]
        biases = [rng.standard_normal(h_dim) * 0.5 for _ in range(4)]
        cell = predictor.CellParameters(
            arrays[0], arrays[1], biases[0], arrays[2], arrays[3], biases[1],
            arrays[4], arrays[5], biases[2], arrays[6], arrays[7], biases[3])
        inp = rng.standard_normal((h_dim, 3))
        h0 = rng.standard_normal((h_dim, 3))
        c0 = rng.standard_normal((h_dim, 3))
        h, c = predictor.cell_step(cell, inp, h0, c0)
        # Straight-line re-statement of the gate equations.
        gi = expit(arrays[0] @ inp + biases[0][:, None] + arrays[1] @ h0)
        gf = expit(arrays[2] @ inp + biases[1][:, None] + arrays[3] @ h0)
        go = expit(arrays[4] @ inp + biases[2][:, None] + arrays[5] @ h0)
        cand = np.tanh(arrays[6] @ inp + biases[3][:, None] + arrays[7] @ h0)
        c_hand = gf * c0 + gi * cand
        h_hand = go * np.tanh(c_hand)
        assert np.allclose(c, c_hand, atol=1e-12)
        assert np.allclose(h, h_hand, atol=1e-12)

    def test_shape_validation(self):
        with pytest.raises(ShapeError):
            predictor.CellParameters(
                np.zeros((3, 3)), np.zeros((3, 3)), np.zeros(3),
                np.zeros((3, 3)), np.zeros((2, 3)), np.zeros(3),
                np.zeros((3, 3)), np.zeros((3, 3)), np.zeros(3),
                np.zeros((3, 3)), np.zeros((3, 3)), np.zeros(3))


class TestPredictP:
    def test_zero_parameters_constant_head(self):
        pred = predictor.make_predictor(4, hidden=3, seed=0, weight_scale=0.0)
        state = predictor.initial_state(3, 2)
        p, _ = predictor.predict_p(np.ones((4, 2)), np.ones((4, 2)), state,
                                   pred)
        assert np.allclose(p, LOG2_SQUARED, atol=1e-15)

    def test_hadamard_identity_when_second_head_is_one(self):
        # Forcing the second branch's softplus output to one isolates the
        # first branch: softplus(dec2 h2 + b) = 1 at b = log(e - 1).
        rng = np.random.default_rng(5)
        pred = predictor.make_predictor(4, hidden=3, seed=7)
        pred.dec2_w = np.zeros_like(pred.dec2_w)
        pred.dec2_b = np.full_like(pred.dec2_b, np.log(np.e - 1.0))
        state = predictor.initial_state(3, 2)
        x = rng.standard_normal((4, 2))
        g = rng.standard_normal((4, 2))
        p, _ = predictor.predict_p(x, g, state, pred)
        f1_in = pred.enc1_w @ g + pred.enc1_b[:, None]
        h1, _ = predictor.cell_step(pred.cell1, f1_in, state.h1, state.c1)
        f1_raw = pred.dec1_w @ h1 + pred.dec1_b[:, None]
        assert np.allclose(p, np.logaddexp(0.0, f1_raw), atol=1e-12)

    def test_strictly_positive(self):
        rng = np.random.default_rng(8)
        pred = predictor.make_predictor(5, hidden=4, seed=3)
        state = predictor.initial_state(4, 3)
        for _ in range(20):
            p, state = predictor.predict_p(rng.standard_normal((5, 3)),
                                           rng.standard_normal((5, 3)),
                                           state, pred)
            assert np.all(p > 0.0)
            assert np.all(np.isfinite(p))

    def test_deterministic(self):
        pred = predictor.make_predictor(4, hidden=3, seed=11)
        x = np.random.default_rng(0).standard_normal((4, 2))
        g = np.random.default_rng(1).standard_normal((4, 2))
        s0 = predictor.initial_state(3, 2)
        p1, st1 = predictor.predict_p(x, g, s0, pred)
        p2, st2 = predictor.predict_p(x, g, predictor.initial_state(3, 2),
                                      pred)
        assert np.array_equal(p1, p2)
        assert np.array_equal(st1.c2, st2.c2)

    def test_shape_mismatch(self):
        pred = predictor.make_predictor(4, hidden=3, seed=0)
        state = predictor.initial_state(3, 2)
        with pytest.raises(ShapeError):
            predictor.predict_p(np.ones((5, 2)), np.ones((5, 2)), state, pred)

    def test_matches_graph_forward(self):
        s, hidden, t = 3, 4, 2
        pred = predictor.make_predictor(s, hidden=hidden, seed=13,
                                        p_scale=0.5)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((s, t))
        g = rng.standard_normal((s, t))
        state = predictor.initial_state(hidden, t)
        p_direct, _ = predictor.predict_p(x, g, state, pred)

        params = predictor.predictor_param_vars(s, hidden)
        x_e = ad.var("x", (s, t))
        g_e = ad.var("g", (s, t))
        zeros = ad.const(np.zeros((hidden, t)))
        state_es = {k: zeros for k in ("h1", "c1", "h2", "c2")}
        p_e, _ = predictor.predictor_graph(x_e, g_e, state_es, params,
                                           pred.p_scale)
        probe = ad.var("probe", (s, t))
        tape = ad.Tape([ad.dot(p_e, probe)])
        w = rng.standard_normal((s, t))
        buf = tape.forward({**predictor.predictor_param_arrays(pred),
                            "x": x, "g": g, "probe": w})
        got = tape.value(buf, tape.outputs[0])
        assert got == pytest.approx(float(np.sum(p_direct * w)), abs=1e-12)

    def test_parameter_gradients_match_fd(self):
        s, hidden, t = 3, 3, 2
        pred = predictor.make_predictor(s, hidden=hidden, seed=19)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((s, t))
        g = rng.standard_normal((s, t))
        params = predictor.predictor_param_vars(s, hidden)
        x_e = ad.const(x)
        g_e = ad.const(g)
        zeros = ad.const(np.zeros((hidden, t)))
        state_es = {k: zeros for k in ("h1", "c1", "h2", "c2")}
        p_e, _ = predictor.predictor_graph(x_e, g_e, state_es, params,
                                           pred.p_scale)
        target = rng.standard_normal((s, t))
        diff = ad.sub(p_e, ad.const(target))
        loss = ad.scale(ad.dot(diff, diff), 0.5)
        base = predictor.predictor_param_arrays(pred)
        tape = ad.Tape([loss])
        buf = tape.forward(base)
        names = predictor.predictor_param_names()
        grads = tape.backward(buf, names)
        for name in names:
            def f(arr, name=name):
                b = dict(base)
                b[name] = arr
                return ad.evaluate(loss, b)
            fd = oracles.fd_gradient(f, base[name], h=1e-6)
            assert np.max(np.abs(np.asarray(grads[name]) - fd)) < 1e-5, name


class TestProjectInterval:
    def _interval(self, lo, hi):
        return curvature.CurvatureInterval(nu_lo=lo, nu_hi=hi,
                                           source="analytic")

    def test_clamps_both_sides(self):
        p = predictor.project_interval(np.array([0.5, 2.0, -1.0]),
                                       self._interval(0.1, 1.0))
        assert np.allclose(p, [0.5, 1.0, 0.1])

    def test_inside_box_unchanged(self):
        vals = np.array([0.2, 0.9, 0.15])
        p = predictor.project_interval(vals, self._interval(0.1, 1.0))
        assert np.array_equal(p, vals)

    def test_idempotent(self):
        rng = np.random.default_rng(44)
        box = self._interval(0.05, 0.7)
        for _ in range(1000):
            p_tilde = rng.uniform(-2.0, 2.0, size=6)
            once = predictor.project_interval(p_tilde, box)
            twice = predictor.project_interval(once, box)
            assert np.array_equal(once, twice)
            assert np.all(once >= box.nu_lo) and np.all(once <= box.nu_hi)
