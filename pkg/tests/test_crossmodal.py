"""Cross-modal scorer and sequence-level NCE: scalar-loop oracle of the
whole forward pass, analytic slate anchors, and softmax-form properties."""

import math

import numpy as np
import pytest

from cbt import tensorkit as tk
from cbt.crossmodal import (CrossModalConfig, PairedExample, build_cross_batch,
                            cross_modal_nce, init_crossmodal_params, mi_score,
                            nce_from_scores)
from cbt.encoders import FeatureSequence, TokenSequence
from cbt.tensorkit import Tensor
from cbt.trainer import ParamStore, truncated_normal

from _oracles import gelu_scalar, layer_norm_loops, matmul_loops, softmax_row_scalar

RNG = np.random.default_rng(31337)

LN_4 = 1.3862943611198906


def make_store(cfg: CrossModalConfig, seed=0, scale=0.4) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_crossmodal_params(store, cfg, lambda s: truncated_normal(rng, s, scale))
    return store


def cell(v: float) -> Tensor:
    return Tensor(np.full((1, 1), float(v)))


class TestMiScore:
    CFG = CrossModalConfig(layers=1, heads=1, hidden=6, ff_width=8,
                           max_positions=16)

    def test_identical_token_rows_permutation_symmetry(self):
        store = make_store(self.CFG)
        hx = Tensor(RNG.standard_normal((3, 6)))
        row = RNG.standard_normal(6)
        hy = Tensor(np.tile(row, (4, 1)))
        pad3, pad4 = np.ones(3, bool), np.ones(4, bool)
        s1 = mi_score(hx, hy, pad3, pad4, self.CFG, store).item()
        s2 = mi_score(hx, Tensor(np.tile(row, (4, 1))), pad3, pad4, self.CFG,
                      store).item()
        assert s1 == s2

    def test_zero_mlp_head_scores_zero(self):
        store = make_store(self.CFG, seed=1)
        store.replace("cross/mlp/w1", np.zeros((6, 6)))
        store.replace("cross/mlp/b1", np.zeros(6))
        store.replace("cross/mlp/w2", np.zeros((6, 1)))
        store.replace("cross/mlp/b2", np.zeros(1))
        hx = Tensor(RNG.standard_normal((5, 6)))
        hy = Tensor(RNG.standard_normal((2, 6)))
        s = mi_score(hx, hy, np.ones(5, bool), np.ones(2, bool), self.CFG, store)
        assert s.item() == 0.0

    def test_combined_length_guard(self):
        store = make_store(self.CFG, seed=2)
        hx = Tensor(np.zeros((10, 6)))
        hy = Tensor(np.zeros((8, 6)))
        with pytest.raises(tk.ShapeError, match="max_positions"):
            mi_score(hx, hy, np.ones(10, bool), np.ones(8, bool), self.CFG, store)

    def test_matches_scalar_loop_oracle(self):
        cfg = self.CFG
        store = make_store(cfg, seed=3)
        hx = RNG.standard_normal((2, 6))
        hy = RNG.standard_normal((2, 6))
        got = mi_score(Tensor(hx), Tensor(hy), np.ones(2, bool),
                       np.ones(2, bool), cfg, store).item()

        # scalar reimplementation of the full forward pass
        agg = store["cross/agg"].data
        rows = np.vstack([
            agg[None, :],
            hx + store["cross/type_features"].data[None, :],
            hy + store["cross/type_tokens"].data[None, :],
        ])
        h = rows + store["cross/pos"].data[:5]
        p = "cross/layer0"
        u = layer_norm_loops(h, store[f"{p}/ln1/gain"].data,
                             store[f"{p}/ln1/bias"].data, 1e-6)
        q = matmul_loops(u, store[f"{p}/attn/wq"].data) + store[f"{p}/attn/bq"].data
        k = matmul_loops(u, store[f"{p}/attn/wk"].data) + store[f"{p}/attn/bk"].data
        v = matmul_loops(u, store[f"{p}/attn/wv"].data) + store[f"{p}/attn/bv"].data
        scale = 1.0 / math.sqrt(6)
        attn = np.zeros_like(u)
        for i in range(5):
            logits = [scale * float(q[i] @ k[j]) for j in range(5)]
            weights = softmax_row_scalar(logits)
            ctx = sum(w * v[j] for j, w in enumerate(weights))
            attn[i] = ctx @ store[f"{p}/attn/wo"].data + store[f"{p}/attn/bo"].data
        h = h + attn
        u = layer_norm_loops(h, store[f"{p}/ln2/gain"].data,
                             store[f"{p}/ln2/bias"].data, 1e-6)
        inner = np.vectorize(gelu_scalar)(
            matmul_loops(u, store[f"{p}/ff/w1"].data) + store[f"{p}/ff/b1"].data)
        h = h + matmul_loops(inner, store[f"{p}/ff/w2"].data) \
            + store[f"{p}/ff/b2"].data
        slot0 = h[0]
        mid = np.vectorize(gelu_scalar)(
            slot0 @ store["cross/mlp/w1"].data + store["cross/mlp/b1"].data)
        want = float((mid @ store["cross/mlp/w2"].data
                      + store["cross/mlp/b2"].data)[0])
        assert abs(got - want) < 1e-9

    def test_avgpool_aggregate_mode(self):
        cfg = CrossModalConfig(layers=1, heads=1, hidden=6, ff_width=8,
                               max_positions=16, aggregate="avgpool")
        store = make_store(cfg, seed=4)
        hx = Tensor(RNG.standard_normal((3, 6)))
        hy = Tensor(RNG.standard_normal((2, 6)))
        s = mi_score(hx, hy, np.ones(3, bool), np.ones(2, bool), cfg, store)
        assert s.shape == (1, 1)
        assert tk.assert_finite(s).ok


class TestSequenceNce:
    def test_equal_scores_three_negatives_ln4(self):
        loss = nce_from_scores(cell(0.7), [cell(0.7), cell(0.7), cell(0.7)])
        assert abs(loss.item() - LN_4) < 1e-9

    def test_saturated_softmax_near_zero(self):
        loss = nce_from_scores(cell(20.0), [cell(-20.0), cell(-20.0)])
        assert loss.item() < 1e-8

    def test_hand_set_scores_oracle(self):
        scores = [0.5, -0.3, 0.1]
        loss = nce_from_scores(cell(scores[0]),
                               [cell(scores[1]), cell(scores[2])]).item()
        mx = max(scores)
        want = mx + math.log(sum(math.exp(s - mx) for s in scores)) - scores[0]
        assert abs(loss - want) < 1e-10

    def test_empty_candidates_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            nce_from_scores(cell(1.0), [])

    def test_score_shift_invariance(self):
        base = nce_from_scores(cell(0.4), [cell(-1.0), cell(2.0)]).item()
        for c in (-100.0, 3.5, 77.0):
            shifted = nce_from_scores(cell(0.4 + c),
                                      [cell(-1.0 + c), cell(2.0 + c)]).item()
            assert abs(base - shifted) < 1e-9

    def test_softmax_ratios_sum_to_one(self):
        scores = [0.3, -0.2, 1.4, 0.0]
        ratios = []
        for i, s in enumerate(scores):
            negs = [cell(v) for j, v in enumerate(scores) if j != i]
            ratios.append(math.exp(-nce_from_scores(cell(s), negs).item()))
        # each ratio is the softmax of one score against the same slate
        assert abs(sum(ratios) - 1.0) < 1e-12
        assert all(0.0 < r < 1.0 for r in ratios)


class TestBuildCrossBatch:
    def test_pair_batch_single_negative(self):
        sets = build_cross_batch(2)
        assert [len(s) for s in sets] == [1, 1]

    def test_eight_way_batch(self):
        sets = build_cross_batch(8)
        assert [len(s) for s in sets] == [7] * 8

    def test_candidates_disjoint_from_positive(self):
        for b in (2, 3, 5, 8):
            for i, s in enumerate(build_cross_batch(b)):
                assert i not in s
                assert sorted(s) == [j for j in range(b) if j != i]

    def test_singleton_batch_rejected(self):
        with pytest.raises(ValueError):
            build_cross_batch(1)


class TestCrossModalNceBatch:
    def test_batch_loss_near_ln_b_at_tiny_init(self):
        cfg = CrossModalConfig(layers=1, heads=2, hidden=8, ff_width=16,
                               max_positions=32)
        rng = np.random.default_rng(0)
        store = ParamStore()
        init_crossmodal_params(store, cfg,
                               lambda s: truncated_normal(rng, s, 0.02))
        b, t = 4, 5
        hxs = [Tensor(RNG.standard_normal((t, 8))) for _ in range(b)]
        hys = [Tensor(RNG.standard_normal((t, 8))) for _ in range(b)]
        pads = [np.ones(t, bool)] * b
        loss = cross_modal_nce(hxs, hys, pads, pads, cfg, store).item()
        assert abs(loss - math.log(b)) < 0.1
