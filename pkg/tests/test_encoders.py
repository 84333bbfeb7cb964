"""Feature encoder and token embedding contracts: position-wise maps,
padding isolation at the source, and the pinned PAD row."""

import numpy as np
import pytest

from cbt import tensorkit as tk
from cbt.encoders import (EmbeddingTable, EncoderConfig, FeatureSequence,
                          TokenSequence, embed_tokens, encode_features,
                          init_embedding_params, init_encoder_params)
from cbt.tensorkit import Tensor
from cbt.trainer import ParamStore, truncated_normal

RNG = np.random.default_rng(99)


def make_store(cfg: EncoderConfig, seed=0, zero_bias=True) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_encoder_params(store, cfg, lambda shape: truncated_normal(rng, shape, 0.3))
    return store


class TestFeatureSequence:
    def test_rejects_interior_padding(self):
        with pytest.raises(ValueError, match="prefix"):
            FeatureSequence(np.zeros((3, 2)), [True, False, True])

    def test_rejects_nonzero_padded_rows(self):
        vals = np.ones((3, 2))
        with pytest.raises(ValueError, match="all-zero"):
            FeatureSequence(vals, [True, True, False])

    def test_truncation_pads_and_zeroes(self):
        vals = RNG.standard_normal((5, 3))
        seq = FeatureSequence.from_values(vals)
        cut = seq.truncated(2)
        assert cut.num_real == 2
        np.testing.assert_array_equal(cut.values[2:], np.zeros((3, 3)))
        np.testing.assert_array_equal(cut.values[:2], vals[:2])


class TestTokenSequence:
    def test_rejects_non_pad_id_in_padding(self):
        with pytest.raises(ValueError, match="PAD"):
            TokenSequence([5, 4, 3], [True, True, False])

    def test_num_real(self):
        seq = TokenSequence([5, 4, 0], [True, True, False])
        assert seq.num_real == 2


class TestEncodeFeatures:
    CFG = EncoderConfig(input_dim=4, hidden_dim=6, output_dim=5)

    def test_zero_row_zero_bias_maps_to_zero(self):
        store = make_store(self.CFG)
        x = FeatureSequence.from_values(np.zeros((3, 4)))
        out = encode_features(x, store, self.CFG)
        np.testing.assert_allclose(out.data, np.zeros((3, 5)), atol=1e-15)

    def test_permutation_equivariance(self):
        store = make_store(self.CFG)
        vals = RNG.standard_normal((6, 4))
        perm = np.array([3, 0, 5, 1, 4, 2])
        out = encode_features(FeatureSequence.from_values(vals), store, self.CFG)
        out_p = encode_features(FeatureSequence.from_values(vals[perm]), store,
                                self.CFG)
        np.testing.assert_array_equal(out.data[perm], out_p.data)

    def test_matches_single_row_oracle(self):
        store = make_store(self.CFG, seed=3)
        vals = RNG.standard_normal((4, 4))
        out = encode_features(FeatureSequence.from_values(vals), store, self.CFG)
        for t in range(4):
            single = encode_features(
                FeatureSequence.from_values(vals[t:t + 1]), store, self.CFG)
            # row-batched vs single-row BLAS paths may differ in the last ulp
            np.testing.assert_allclose(out.data[t], single.data[0],
                                       rtol=1e-13, atol=1e-14)

    def test_padded_rows_map_to_zero_despite_biases(self):
        store = make_store(self.CFG, seed=4)
        # nonzero biases would otherwise leak into padded rows
        store.replace("feature_encoder/b1", np.full(6, 0.5))
        store.replace("feature_encoder/b2", np.full(5, -0.25))
        vals = np.zeros((4, 4))
        vals[:2] = RNG.standard_normal((2, 4))
        x = FeatureSequence(vals, [True, True, False, False])
        out = encode_features(x, store, self.CFG)
        np.testing.assert_array_equal(out.data[2:], np.zeros((2, 5)))

    def test_width_mismatch_rejected(self):
        store = make_store(self.CFG)
        with pytest.raises(tk.ShapeError, match="width"):
            encode_features(FeatureSequence.from_values(np.zeros((2, 3))),
                            store, self.CFG)

    def test_positionwise_jacobian_is_block_diagonal(self):
        store = make_store(self.CFG, seed=5)
        vals = RNG.standard_normal((5, 4))
        xt = Tensor(vals, requires_grad=True)
        h = tk.add_bias(tk.matmul(xt, store["feature_encoder/w1"]),
                        store["feature_encoder/b1"])
        e = tk.add_bias(tk.matmul(tk.gelu(h), store["feature_encoder/w2"]),
                        store["feature_encoder/b2"])
        probe = RNG.standard_normal(5)
        loss = tk.sum_all(tk.mul_const(
            tk.take_rows(e, np.array([2])), probe[None, :]))
        g = tk.backward(loss)[xt]
        assert np.abs(g[2]).max() > 0
        np.testing.assert_array_equal(np.delete(g, 2, axis=0),
                                      np.zeros((4, 4)))


class TestEmbedTokens:
    def _table(self, vocab=10, dim=4, seed=0) -> EmbeddingTable:
        store = ParamStore()
        rng = np.random.default_rng(seed)
        init_embedding_params(store, vocab, dim,
                              lambda s: rng.standard_normal(s), prefix="text")
        return EmbeddingTable(store["text/embed"])

    def test_pad_ids_give_zero_rows(self):
        table = self._table()
        out = embed_tokens(TokenSequence([0, 0], [False, False]), table)
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_lookup_determinism(self):
        table = self._table()
        out = embed_tokens(TokenSequence.from_ids([5, 5]), table)
        np.testing.assert_array_equal(out.data[0], out.data[1])

    def test_direct_indexing_oracle(self):
        table = self._table(seed=7)
        out = embed_tokens(TokenSequence.from_ids([2, 7, 3]), table)
        np.testing.assert_array_equal(out.data, table.table.data[[2, 7, 3]])

    def test_out_of_range_error_names_id_and_position(self):
        table = self._table(vocab=8)
        with pytest.raises(IndexError, match="id 9 at position 1"):
            embed_tokens(TokenSequence.from_ids([2, 9, 3]), table)

    def test_no_gradient_reaches_pad_row(self):
        table = self._table()
        y = TokenSequence([4, 3, 0, 0], [True, True, False, False])
        out = embed_tokens(y, table)
        g = tk.backward(tk.sum_all(out)).get(table.table)
        assert g is not None
        np.testing.assert_array_equal(g[0], np.zeros(4))
