"""Embedding network tests: recurrence base cases, BPTT finite differences,
parameter-count formula, averaging."""

import numpy as np
import pytest

import drvec.autodiff as ad
from drvec.autodiff import Tape, Tensor, backward, grad_check
from drvec.embedder import (DESK_EMBEDDER, FULL_EMBEDDER, DrVector,
                            EmbedderConfig, count_tensors, embed, embed_batch,
                            embedder_param_count, enroll_average,
                            init_embedder, lstm_p_forward)
from drvec.errors import DataError, DimensionError
from drvec.synth import stream

TINY = EmbedderConfig(num_layers=2, hidden_dim=5, proj_dim=3, embedding_dim=4, feature_dim=3)


def _tiny_params(seed=0, dtype=np.float64):
    return init_embedder(TINY, stream(seed, "init"), dtype=dtype)


def _zero_params(config, dtype=np.float64):
    params = init_embedder(config, stream(0, "init"), dtype=dtype)
    for _, t in params.tensors():
        t.data[...] = 0.0
    return params


class TestLstmLayer:
    def test_zero_parameters_give_zero_outputs(self):
        params = _zero_params(TINY)
        rng = np.random.default_rng(1)
        out = lstm_p_forward(params.layers[0], rng.standard_normal((6, 3)))
        np.testing.assert_array_equal(out.data, np.zeros((6, 3)))

    def test_single_step_equals_manual_cell(self):
        params = _tiny_params()
        layer = params.layers[0]
        x = np.random.default_rng(2).standard_normal((1, 3))
        out = lstm_p_forward(layer, x)

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        z = np.concatenate([x, np.zeros((1, 3))], axis=1)
        gi = sig(z @ layer.weights["i"].data + layer.biases["i"].data)
        gf = sig(z @ layer.weights["f"].data + layer.biases["f"].data)
        gg = np.tanh(z @ layer.weights["g"].data + layer.biases["g"].data)
        go = sig(z @ layer.weights["o"].data + layer.biases["o"].data)
        c = gi * gg  # zero initial cell state
        r = np.tanh((go * np.tanh(c)) @ layer.proj.data)
        np.testing.assert_allclose(out.data, r, rtol=1e-12)

    def test_outputs_bounded_by_tanh(self):
        params = _tiny_params(3)
        rng = np.random.default_rng(3)
        out = lstm_p_forward(params.layers[0], 5.0 * rng.standard_normal((10, 3)))
        assert np.all(out.data > -1.0) and np.all(out.data < 1.0)

    def test_rejects_wrong_feature_dim(self):
        params = _tiny_params()
        with pytest.raises(DimensionError):
            lstm_p_forward(params.layers[0], np.zeros((4, 7)))

    def test_gradients_match_finite_differences(self):
        params = _tiny_params(4)
        layer = params.layers[0]
        seq = np.random.default_rng(4).standard_normal((4, 3))
        loss = lambda: ad.sum_all(lstm_p_forward(layer, seq))
        for name, tensor in layer.tensors():
            err = ad.param_grad_check(loss, tensor)
            assert err < 1e-4, f"layer gradient check failed for {name}: {err}"


class TestEmbed:
    def test_zero_parameters_give_zero_embedding(self):
        params = _zero_params(TINY)
        feats = np.random.default_rng(5).standard_normal((6, 3))
        emb = embed(TINY, params, feats)
        np.testing.assert_array_equal(emb.values, np.zeros(4))

    def test_last_frame_dependence(self):
        params = _tiny_params(6)
        rng = np.random.default_rng(6)
        feats = rng.standard_normal((5, 3))
        extended = np.concatenate([feats, rng.standard_normal((1, 3))], axis=0)
        e1 = embed(TINY, params, feats)
        e2 = embed(TINY, params, extended)
        assert not np.allclose(e1.values, e2.values)

    def test_empty_sequence_rejected(self):
        params = _tiny_params()
        with pytest.raises(DataError):
            embed(TINY, params, np.zeros((0, 3)))

    def test_batch_matches_per_sequence_results(self):
        params = _tiny_params(7)
        rng = np.random.default_rng(7)
        seqs = [rng.standard_normal((t, 3)) for t in (2, 5, 3)]
        batched = embed_batch(TINY, params, seqs)
        for i, seq in enumerate(seqs):
            single = embed(TINY, params, seq)
            np.testing.assert_allclose(batched.data[i], single.values, rtol=1e-10)

    def test_full_pipeline_gradient_check(self):
        config = EmbedderConfig(num_layers=2, hidden_dim=6, proj_dim=4,
                                embedding_dim=4, feature_dim=3)
        params = init_embedder(config, stream(8, "init"), dtype=np.float64)
        feats = np.random.default_rng(8).standard_normal((5, 3))
        readout = Tensor(np.random.default_rng(9).standard_normal(4))
        loss = lambda: ad.sum_all(ad.mul(embed(config, params, feats).vec, readout))
        for name, tensor in params.tensors():
            err = ad.param_grad_check(loss, tensor)
            assert err < 1e-4, f"embed gradient check failed for {name}: {err}"

    def test_forward_determinism(self):
        params = _tiny_params(10)
        feats = np.random.default_rng(10).standard_normal((8, 3))
        a = embed(TINY, params, feats).values
        b = embed(TINY, params, feats).values
        np.testing.assert_array_equal(a, b)


class TestParameterCount:
    @pytest.mark.parametrize("config", [DESK_EMBEDDER, FULL_EMBEDDER, TINY])
    def test_formula_matches_allocation(self, config):
        params = init_embedder(config, stream(0, "init"))
        assert count_tensors(params.tensors()) == embedder_param_count(config)

    def test_full_preset_magnitude(self):
        # 3 layers of LSTM(768, proj 256) plus the output map
        assert embedder_param_count(FULL_EMBEDDER) == 4_719_872


class TestEnrollAverage:
    def _vec(self, values, d=2):
        return DrVector(Tensor(np.asarray(values, dtype=np.float64)), d)

    def test_single_embedding_is_identity(self):
        e = self._vec([1.0, 2.0, 3.0])
        assert enroll_average([e]) is e

    def test_mean_of_copies_is_idempotent(self):
        e = self._vec([0.3, -0.7, 1.1])
        avg = enroll_average([e, e, e, e])
        np.testing.assert_array_equal(avg.values, e.values)

    def test_pairwise_mean(self):
        avg = enroll_average([self._vec([1.0, 3.0]), self._vec([3.0, 1.0])])
        np.testing.assert_array_equal(avg.values, [2.0, 2.0])

    def test_preserves_d_split(self):
        avg = enroll_average([self._vec([1.0, 2.0, 3.0], d=1), self._vec([4.0, 5.0, 6.0], d=1)])
        assert avg.d == 1 and avg.s == 2

    def test_empty_list_rejected(self):
        with pytest.raises(DataError):
            enroll_average([])

    def test_mismatched_dims_rejected(self):
        with pytest.raises(DataError):
            enroll_average([self._vec([1.0, 2.0]), self._vec([1.0, 2.0, 3.0])])

    def test_gradient_flows_through_mean(self):
        base = np.random.default_rng(11).standard_normal(3)

        def f(t):
            e1 = DrVector(ad.reshape(t, (3,)), 3)
            e2 = DrVector(Tensor(np.array([1.0, 2.0, 3.0])), 3)
            return ad.sum_all(enroll_average([e1, e2]).vec)

        assert grad_check(f, Tensor(base)) < 1e-10


class TestLongSequenceBptt:
    def test_t10_gradients_match_finite_differences(self):
        params = _tiny_params(12)
        seq = np.random.default_rng(12).standard_normal((10, 3))
        readout = Tensor(np.random.default_rng(13).standard_normal(4))
        loss = lambda: ad.sum_all(ad.mul(embed(TINY, params, seq).vec, readout))
        for name, tensor in params.tensors():
            err = ad.param_grad_check(loss, tensor, max_coords=20)
            assert err < 1e-4, f"T=10 BPTT check failed for {name}: {err}"
