from __future__ import annotations

import math

import numpy as np
import pytest

from battrul.data import apply_norm, fit_norm, label_rul, window_array, window_ends
from battrul.stman import (
    ChannelAttention,
    StManConfig,
    StManModel,
    count_parameters,
    estimate_flops,
    load_stman,
    rul_loss,
    rul_loss_terms,
    rul_to_cycles,
    save_stman,
    stman_forward,
    train_rul,
)
from battrul.tensor import Tensor, ShapeError
from battrul.tensor import core as T
from battrul.tensor.gradcheck import grad_check
from battrul.training import TrainConfig, TrainingError, batched_predict

TOY = StManConfig(k=3, d_model=8, n_heads=2, d_fuse=4, d_h=4)


def _rul_windows(cells_with_knee, norm, n_w):
    Xs, ys = [], []
    for sc in cells_with_knee:
        cell, fpc = sc.cell, sc.knee_cycle
        y = label_rul(cell, fpc)
        ends = window_ends(cell.eol, n_w, 1, start=fpc)
        Xs.append(window_array(apply_norm(norm, cell.features), n_w, ends))
        ys.append(y[ends - 1])
    return np.concatenate(Xs), np.concatenate(ys)


class TestForward:
    def test_lambda_zero_gate(self, rng):
        m = StManModel(3, 10, TOY, seed=4)
        assert float(m.lam.data) == 0.0
        x = rng.normal(size=(5, 3, 10))
        assert np.array_equal(m(x).data, m(x, temporal_attention=False).data)

    def test_lambda_nonzero_changes_output(self, rng):
        m = StManModel(3, 10, TOY, seed=4)
        x = rng.normal(size=(5, 3, 10))
        m.lam.data = np.array(0.7)
        assert not np.allclose(m(x).data, m(x, temporal_attention=False).data)

    def test_range_and_attention_weights(self, rng):
        m = StManModel(7, 20, seed=0)
        m.lam.data = np.array(1.0)
        x = rng.normal(size=(4, 7, 20)) * 10
        out = m(x).data
        assert np.all((out > 0) & (out < 1))
        assert np.allclose(m.last_attention.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(m.last_attention > 0)

    def test_single_window_deterministic(self, rng):
        m = StManModel(3, 10, TOY, seed=1)
        w = rng.normal(size=(3, 10))
        assert stman_forward(m, w) == stman_forward(m, w)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            stman_forward(StManModel(3, 10, TOY), np.zeros((3, 11)))

    def test_channel_attention_permutation_equivariant(self, rng):
        att = ChannelAttention(8, 2, rng)
        tok = rng.normal(size=(2, 4, 5, 8))
        perm = rng.permutation(5)
        a = att(Tensor(tok)).data
        b = att(Tensor(tok[:, :, perm])).data
        assert np.allclose(a[:, :, perm], b, atol=1e-12)

    def test_attention_per_time_step(self, rng):
        # changing one time step leaves other steps' channel mixing untouched
        att = ChannelAttention(8, 2, rng)
        tok = rng.normal(size=(1, 4, 3, 8))
        tok2 = tok.copy()
        tok2[0, 2] += 1.0
        a, b = att(Tensor(tok)).data, att(Tensor(tok2)).data
        assert np.array_equal(a[0, [0, 1, 3]], b[0, [0, 1, 3]])
        assert not np.allclose(a[0, 2], b[0, 2])

    def test_bad_config(self):
        with pytest.raises(ValueError):
            StManConfig(d_model=9, n_heads=2)
        with pytest.raises(ValueError):
            StManConfig(k=4)

    def test_gradient_toy_window(self):
        rng = np.random.default_rng(0)
        m = StManModel(3, 10, TOY, seed=0)
        m.lam.data = np.array(rng.normal())
        x = rng.normal(size=(1, 3, 10))
        y = rng.uniform(0.1, 1.0, size=1)
        params = m.parameters()
        assert grad_check(lambda: rul_loss(m(x), y), params) < 1e-4


class TestLoss:
    def test_zero_when_equal(self):
        assert rul_loss(Tensor([0.3, 0.7]), [0.3, 0.7]).item() == 0.0

    def test_single_pair(self):
        mae, rmse, mape = rul_loss_terms(Tensor([0.4]), [0.5])
        assert math.isclose(mae.item(), 0.1, rel_tol=1e-12)
        assert math.isclose(rmse.item(), 0.1, rel_tol=1e-12)
        assert math.isclose(mape.item(), 0.2, rel_tol=1e-12)
        assert math.isclose(rul_loss(Tensor([0.4]), [0.5]).item(), 0.4, rel_tol=1e-12)

    def test_symmetric_errors(self):
        e = 0.07
        mae, rmse, _ = rul_loss_terms(Tensor([0.5 + e, 0.3 - e]), [0.5, 0.3])
        assert math.isclose(mae.item(), e, rel_tol=1e-12)
        assert math.isclose(rmse.item(), e, rel_tol=1e-12)

    def test_mape_floor(self):
        _, _, mape = rul_loss_terms(Tensor([0.02]), [0.0], mape_floor=0.01)
        assert math.isclose(mape.item(), 2.0, rel_tol=1e-12)
        _, _, mape = rul_loss_terms(Tensor([0.02]), [0.0])
        assert math.isclose(mape.item(), 0.02 / 1e-6, rel_tol=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            rul_loss(Tensor(np.zeros(0)), [])


class TestRulToCycles:
    def test_midpoint(self):
        assert rul_to_cycles(0.5, 900, 800) == 100.0

    def test_zero(self):
        assert rul_to_cycles(0.0, 950, 800) == 0.0

    def test_round_trip(self):
        for eol, fpc in [(1000, 800), (657, 423), (431, 300), (800, 1)]:
            y = label_rul(eol, fpc)
            j = np.arange(fpc + 1, eol + 1)
            back = np.array([rul_to_cycles(y[k - 1], k, fpc) for k in j])
            # algebraically exact; float rounding leaves < 1e-9 cycles
            assert np.max(np.abs(back - (eol - j))) < 1e-9

    def test_invalid(self):
        with pytest.raises(ValueError):
            rul_to_cycles(0.5, 800, 800)
        with pytest.raises(ValueError):
            rul_to_cycles(1.0, 900, 800)


class TestComplexity:
    def test_default_count(self):
        m = StManModel(7, 50)
        assert count_parameters(m) == 22530
        assert 10_000 <= count_parameters(m) <= 100_000

    def test_flops_positive_and_scales(self):
        m = StManModel(7, 50)
        f50 = estimate_flops(m)
        f100 = estimate_flops(m, (7, 100))
        assert f50 > count_parameters(m)
        assert 1.9 < f100 / f50 < 2.1

    def test_lstm_quadruples(self):
        small = StManModel(7, 50, StManConfig(d_h=64)).lstm.count_parameters()
        big = StManModel(7, 50, StManConfig(d_h=128)).lstm.count_parameters()
        assert 3.5 < big / small < 4.0


class TestTraining:
    def _data(self, small_corpus, n_w=10):
        train, val = small_corpus[:4], small_corpus[4:]
        norm = fit_norm([sc.cell for sc in train])
        return _rul_windows(train, norm, n_w), _rul_windows(val, norm, n_w)

    def test_validation_mae_halves(self, small_corpus):
        (X, y), (Xv, yv) = self._data(small_corpus)
        m = StManModel(7, 10, TOY, seed=0)
        before = np.mean(np.abs(batched_predict(m, Xv) - yv))
        train_rul(m, X, y, TrainConfig(lr=3e-3, batch_size=16, epochs=30, patience=30), mape_floor=0.01)
        after = np.mean(np.abs(batched_predict(m, Xv) - yv))
        assert after <= 0.5 * before

    def test_deterministic_history(self, small_corpus):
        (X, y), _ = self._data(small_corpus)
        cfg = TrainConfig(lr=3e-3, batch_size=16, epochs=2)
        h1 = train_rul(StManModel(7, 10, TOY, seed=0), X, y, cfg)
        h2 = train_rul(StManModel(7, 10, TOY, seed=0), X, y, cfg)
        assert h1 == h2

    def test_constant_labels(self, small_corpus):
        (X, _), _ = self._data(small_corpus)
        y = np.full(len(X), 0.3)
        m = StManModel(7, 10, TOY, seed=0)
        train_rul(m, X, y, TrainConfig(lr=3e-3, batch_size=16, epochs=10, patience=10))
        assert np.abs(batched_predict(m, X) - 0.3).mean() < 0.05

    def test_empty_rejected(self):
        with pytest.raises(TrainingError):
            train_rul(StManModel(3, 10, TOY), np.zeros((0, 3, 10)), np.zeros(0), TrainConfig())

    def test_checkpoint_round_trip(self, tmp_path, rng, small_corpus):
        m = StManModel(7, 10, TOY, seed=3)
        m.lam.data = np.array(0.25)
        norm = fit_norm([small_corpus[0].cell])
        save_stman(tmp_path / "s.npz", m, norm, "SYNTH")
        back, _, meta = load_stman(tmp_path / "s.npz")
        w = rng.normal(size=(7, 10))
        assert stman_forward(back, w) == stman_forward(m, w)
        assert meta["config"] == TOY.to_dict()
        with pytest.raises(ValueError):
            from battrul.hs import load_hs

            load_hs(tmp_path / "s.npz")


def test_no_grad_forward_has_no_tape(rng):
    m = StManModel(3, 10, TOY)
    with T.no_grad():
        out = m(rng.normal(size=(2, 3, 10)))
    assert not out.requires_grad
