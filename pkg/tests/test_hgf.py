import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hotspot_erc import tensor as T
from hotspot_erc.hgf import GateParams, ModalPair, ablation_bypass, encode_modality, hgf_gate, init_encoder, init_gate
from hotspot_erc.nn import named_tensors, zero_residual_branches
from hotspot_erc.tensor import ShapeError, Tensor, grad_check


def gate(weight, bias):
    return GateParams(Tensor(np.asarray(weight, dtype=float).reshape(-1, 1), requires_grad=True), Tensor([float(bias)], requires_grad=True))


def pair(c, h, m="T"):
    return ModalPair(m, Tensor(np.asarray(c, dtype=float)), Tensor(np.asarray(h, dtype=float)))


class TestGate:
    def test_zero_params_average(self):
        z, alpha = hgf_gate(pair([[2, 0]], [[4, 2]]), gate(np.zeros(4), 0.0))
        assert alpha.shape == (1, 1) and alpha.item() == 0.5
        np.testing.assert_array_equal(z.data, [[3, 1]])

    def test_saturated_gate_returns_content(self):
        rng = np.random.default_rng(0)
        c, h = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        z, alpha = hgf_gate(pair(c, h), gate(np.zeros(4), -20.0))
        assert np.all(alpha.data < 1e-8)
        np.testing.assert_allclose(z.data, c, atol=1e-8 * np.abs(h - c).max())

    def test_derived_row(self):
        # pre-activation 1 from the bias alone
        z, alpha = hgf_gate(pair([[1, 0]], [[3, 2]]), gate(np.zeros(4), 1.0))
        assert alpha.item() == pytest.approx(0.731058, abs=1e-6)  # six printed digits, truncated
        np.testing.assert_allclose(z.data, [[2.462117, 1.462117]], atol=1e-6)

    def test_preactivation_uses_concat(self):
        w = np.array([1.0, -2.0, 0.5, 3.0])
        c, h = np.array([[0.2, 0.1]]), np.array([[-0.4, 0.3]])
        _, alpha = hgf_gate(pair(c, h), gate(w, 0.25))
        pre = np.concatenate([c, h], axis=1) @ w + 0.25
        assert alpha.item() == pytest.approx(1 / (1 + np.exp(-pre[0])), rel=1e-14)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            pair(np.zeros((2, 3)), np.zeros((2, 4)))
        with pytest.raises(ShapeError):
            hgf_gate(pair(np.zeros((2, 3)), np.zeros((2, 3))), gate(np.zeros(4), 0.0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 6), st.integers(1, 5))
    def test_convexity_and_row_proportionality(self, seed, length, dim):
        rng = np.random.default_rng(seed)
        c, h = rng.normal(size=(length, dim)), rng.normal(size=(length, dim))
        z, alpha = hgf_gate(pair(c, h), gate(rng.normal(size=2 * dim) * 3, rng.normal()))
        assert np.all(z.data >= np.minimum(c, h)) and np.all(z.data <= np.maximum(c, h))
        np.testing.assert_allclose(z.data - c, alpha.data * (h - c), rtol=1e-12, atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_equal_inputs_fixed_point(self, seed):
        rng = np.random.default_rng(seed)
        c = rng.normal(size=(4, 3))
        z, _ = hgf_gate(pair(c, c.copy()), gate(rng.normal(size=6) * 10, rng.normal() * 10))
        assert np.array_equal(z.data, c)

    def test_row_permutation_equivariance(self):
        rng = np.random.default_rng(1)
        c, h = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        g = gate(rng.normal(size=6), 0.3)
        perm = rng.permutation(5)
        z, a = hgf_gate(pair(c, h), g)
        zp, ap = hgf_gate(pair(c[perm], h[perm]), g)
        np.testing.assert_array_equal(zp.data, z.data[perm])
        np.testing.assert_array_equal(ap.data, a.data[perm])

    def test_gradcheck_gate(self):
        rng = np.random.default_rng(2)
        c, h = Tensor(rng.normal(size=(4, 3)), requires_grad=True), Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        g = gate(rng.normal(size=6), 0.1)
        proj = Tensor(rng.normal(size=(4, 3)))
        f = lambda: T.sum(T.mul(hgf_gate(ModalPair("A", c, h), g)[0], proj))
        assert grad_check(f, {"C": c, "H": h, "W": g.weight, "b": g.bias}, tol=1e-5).passed

    def test_init_gate_starts_at_half(self):
        g = init_gate(np.random.default_rng(0), 5)
        assert g.weight.shape == (10, 1) and g.bias.data[0] == 0.0


class TestEncode:
    def test_single_utterance(self):
        enc = init_encoder(np.random.default_rng(0), 5, 8, 2, 16)
        assert encode_modality(Tensor(np.ones((1, 5))), enc, "V").x.shape == (1, 8)

    def test_zeroed_branches_give_projection(self):
        rng = np.random.default_rng(1)
        enc = init_encoder(rng, 5, 8, 2, 16)
        enc.proj_b.data[:] = rng.normal(size=8)
        zero_residual_branches(enc.block)
        z = rng.normal(size=(3, 5))
        out = encode_modality(Tensor(z), enc).x.data
        np.testing.assert_allclose(out, z @ enc.proj_w.data + enc.proj_b.data, rtol=1e-14)

    def test_gradcheck_gate_then_encoder(self):
        rng = np.random.default_rng(3)
        g = init_gate(rng, 3)
        enc = init_encoder(rng, 3, 8, 2, 12)
        inputs = dict(named_tensors({"gate": g, "enc": enc}))
        for t in inputs.values():
            t.data += 0.1 * rng.normal(size=t.shape)
        c, h = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))
        inputs.update(C=c, H=h)
        proj = Tensor(rng.normal(size=(4, 8)))
        f = lambda: T.sum(T.mul(encode_modality(hgf_gate(ModalPair("T", c, h), g)[0], enc).x, proj))
        assert grad_check(f, inputs, tol=1e-5).passed


class TestBypass:
    def test_returns_content(self):
        p = pair(np.arange(6.0).reshape(3, 2), np.ones((3, 2)))
        assert ablation_bypass(p) is p.content

    def test_independent_of_hotspot(self):
        c = np.arange(6.0).reshape(3, 2)
        a = ablation_bypass(pair(c, np.zeros((3, 2)))).data
        b = ablation_bypass(pair(c, np.full((3, 2), 9.0))).data
        assert np.array_equal(a, b)
