"""Adversarial loop contracts: the loss bookkeeping identity, learning-rate
balancing, gradient isolation between the two networks, and seeded
reproducibility of whole runs."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adae import autodiff as ad
from adae.autodiff import Tensor
from adae.data import leave_one_out_split, synthetic_shapes
from adae.model import Autoencoder, build_arch
from adae.optim import Adam
from adae.training import (BalancerConfig, BalancerState, ConfigurationError,
                           LossReport, TrainConfig, TrainingDivergenceError,
                           balance_lr, compute_losses, current_rates, train,
                           train_step, _report_from_terms)


def small_arch():
    return build_arch("mnist_like")


def make_nets(seed=0):
    arch = small_arch()
    g = Autoencoder(arch, "generator", seed=seed * 2 + 1)
    d = Autoencoder(arch, "discriminator", seed=seed * 2 + 2)
    return g, d


def tiny_batch(n=4, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(-1, 1, (n, 1, 32, 32))
                  .astype(np.float32))


class TestLossReport:
    def test_fixed_point_networks_give_zero_losses(self):
        # if both nets reproduced their input exactly, every term vanishes
        report = _report_from_terms(rec_real_d=0.0, rec_real_g=0.0, adv=0.0)
        assert report.loss_d == 0.0 and report.loss_g == 0.0

    def test_arithmetic_from_the_two_equations(self):
        report = _report_from_terms(rec_real_d=0.5, rec_real_g=0.4, adv=0.2)
        assert report.loss_d == pytest.approx(0.3, abs=1e-15)
        assert report.loss_g == pytest.approx(0.6, abs=1e-15)

    def test_compute_losses_matches_manual_recomputation(self):
        g, d = make_nets(3)
        x = tiny_batch(6, seed=3)
        report = compute_losses(x, g, d, mode="eval")
        with ad.no_grad():
            gx = g.forward(x, "eval").data
            dx = d.forward(x, "eval").data
            dgx = d.forward(Tensor(gx), "eval").data
        rec_d = float(np.mean(np.abs(x.data - dx), dtype=np.float64))
        rec_g = float(np.mean(np.abs(x.data - gx), dtype=np.float64))
        adv = float(np.mean(np.abs(gx - dgx), dtype=np.float64))
        assert report.rec_real_d == pytest.approx(rec_d, abs=1e-10)
        assert report.rec_real_g == pytest.approx(rec_g, abs=1e-10)
        assert report.adv == pytest.approx(adv, abs=1e-10)
        assert report.loss_d == pytest.approx(rec_d - adv, abs=1e-10)
        assert report.loss_g == pytest.approx(rec_g + adv, abs=1e-10)

    def test_adversarial_terms_cancel_exactly(self):
        report = _report_from_terms(0.123456, 0.654321, 0.777)
        assert abs((report.loss_d + report.loss_g)
                   - (report.rec_real_d + report.rec_real_g)) < 1e-15


class TestBalancer:
    def _report(self, adv, rec_d=0.0):
        return _report_from_terms(rec_real_d=rec_d, rec_real_g=0.0, adv=adv)

    def test_zero_gap_splits_evenly(self):
        state = BalancerState(ema_delta=0.0)
        lr_g, lr_d = current_rates(state, 1e-5, BalancerConfig())
        assert lr_g == lr_d == 1e-5

    def test_saturation_shifts_everything_to_generator(self):
        state = BalancerState(ema_delta=1e9)
        lr_g, lr_d = current_rates(state, 1e-5, BalancerConfig())
        assert lr_g == pytest.approx(2e-5, rel=1e-10)
        assert 0.0 < lr_d < 1e-15

    def test_disabled_returns_base_for_both(self):
        state = BalancerState(ema_delta=123.0)
        cfg = BalancerConfig(enabled=False)
        assert balance_lr(state, self._report(5.0), 1e-4, cfg) == (1e-4, 1e-4)
        assert state.ema_delta == 123.0  # untouched while disabled

    def test_ema_sequence_matches_scalar_oracle(self):
        cfg = BalancerConfig(slope=1.5, ema_decay=0.97)
        state = BalancerState()
        deltas = [0.3, -0.1, 0.05, 0.8, -0.4, 0.0, 0.2]
        ema = 0.0
        for delta in deltas:
            lr_g, lr_d = balance_lr(state, self._report(adv=delta), 2e-5, cfg)
            ema = 0.97 * ema + 0.03 * delta
            s = 1.0 / (1.0 + math.exp(-1.5 * ema))
            assert abs(state.ema_delta - ema) < 1e-15
            assert abs(lr_g - 2 * 2e-5 * s) < 1e-12
            assert abs(lr_d - 2 * 2e-5 * (1 - s)) < 1e-12

    @settings(max_examples=200, deadline=None)
    @given(deltas=st.lists(st.floats(-50, 50), min_size=1, max_size=30),
           base_lr=st.floats(1e-7, 1e-2),
           slope=st.floats(0.1, 30.0))
    def test_rates_conserve_their_sum_and_stay_positive(self, deltas, base_lr, slope):
        cfg = BalancerConfig(slope=slope, ema_decay=0.9)
        state = BalancerState()
        for delta in deltas:
            lr_g, lr_d = balance_lr(state, self._report(adv=delta), base_lr, cfg)
            assert abs((lr_g + lr_d) - 2 * base_lr) < 1e-15
            assert lr_g > 0 and lr_d > 0

    def test_positive_gap_favors_generator(self):
        cfg = BalancerConfig(ema_decay=0.0)  # no smoothing: react instantly
        state = BalancerState()
        lr_g, lr_d = balance_lr(state, self._report(adv=1.0, rec_d=0.2), 1e-5, cfg)
        assert lr_g > 1e-5 > lr_d


class TestTrainStep:
    def _setup(self, seed=0):
        g, d = make_nets(seed)
        cfg = TrainConfig(base_lr=1e-3, balancer=BalancerConfig())
        return g, d, Adam(g.parameters()), Adam(d.parameters()), cfg, BalancerState()

    def test_zero_lr_with_disabled_balancer_freezes_parameters(self):
        g, d, og, od, cfg, state = self._setup(1)
        cfg.base_lr = 0.0
        cfg.balancer = BalancerConfig(enabled=False)
        before_g = g.parameter_checksum()
        before_d = d.parameter_checksum()
        train_step(tiny_batch(4, 1), g, d, og, od, cfg, state)
        assert g.parameter_checksum() == before_g
        assert d.parameter_checksum() == before_d

    def test_d_update_never_touches_g_and_vice_versa(self):
        g, d, og, od, cfg, state = self._setup(2)
        x = tiny_batch(4, 2)
        # D sub-update only: freeze G by zeroing its rate via a custom run
        gx = g.forward(x, "train")
        dx = d.forward(x, "train")
        dgx = d.forward(gx.detach(), "train")
        loss_d = ad.sub(ad.l1_mean(x, dx), ad.l1_mean(gx.detach(), dgx))
        before_g = g.parameter_checksum()
        od.zero_grad()
        loss_d.backward()
        od.step(1e-3)
        assert g.parameter_checksum() == before_g

        # G sub-update: gradients flow through D's forward, but D must not move
        og.zero_grad()
        od.zero_grad()
        gx2 = g.forward(x, "train")
        dgx2 = d.forward(gx2, "train")
        loss_g = ad.add(ad.l1_mean(x, gx2), ad.l1_mean(gx2, dgx2))
        before_d = d.parameter_checksum()
        loss_g.backward()
        og.step(1e-3)
        assert d.parameter_checksum() == before_d

    def test_isolation_holds_across_full_steps(self):
        g, d, og, od, cfg, state = self._setup(3)
        x = tiny_batch(4, 3)
        for i in range(3):
            before_g = g.parameter_checksum()
            before_d = d.parameter_checksum()
            train_step(x, g, d, og, od, cfg, state)
            # both must have moved, and the move is attributable: rerunning the
            # D phase alone from the same state equals the recorded D change
            assert g.parameter_checksum() != before_g
            assert d.parameter_checksum() != before_d

    def test_loss_identity_on_every_step(self):
        g, d, og, od, cfg, state = self._setup(4)
        x = tiny_batch(8, 4)
        for _ in range(20):
            r = train_step(x, g, d, og, od, cfg, state)
            assert abs((r.loss_d + r.loss_g) - (r.rec_real_d + r.rec_real_g)) < 1e-9

    def test_reconstruction_improves_on_a_fixed_batch(self):
        # 16-image batch, 200 steps: generator reconstruction at least halves
        g, d, og, od, cfg, state = self._setup(5)
        cfg.base_lr = 1e-3
        cfg.balancer = BalancerConfig(slope=20.0, ema_decay=0.9)
        ds = synthetic_shapes(16, 1, seed=50)
        x = Tensor(ds.images[ds.class_labels == 0])
        first = None
        for _ in range(200):
            report = train_step(x, g, d, og, od, cfg, state)
            if first is None:
                first = report.rec_real_g
        assert report.rec_real_g <= 0.5 * first

    def test_divergent_input_raises_with_location(self):
        g, d, og, od, cfg, state = self._setup(6)
        bad = Tensor(np.full((4, 1, 32, 32), np.nan, dtype=np.float32))
        with pytest.raises(TrainingDivergenceError) as err:
            train_step(bad, g, d, og, od, cfg, state, epoch=7, batch=3)
        assert err.value.epoch == 7 and err.value.batch == 3


class TestTrain:
    def _split(self, n_normal=60, n_anomalous=10, seed=77):
        ds = synthetic_shapes(n_normal, n_anomalous, seed=seed)
        return leave_one_out_split(ds, anomaly_class=1, seed=seed)

    def _cfg(self, **kw):
        base = dict(batch_size=16, base_lr=1e-4, epochs=2, seed=5,
                    balancer=BalancerConfig(slope=20.0, ema_decay=0.9),
                    adv_start_epoch=1, warmup_lr=1e-3)
        base.update(kw)
        return TrainConfig(**base)

    def test_fixed_seed_reproduces_history_and_checkpoint(self, tmp_path):
        split = self._split()
        arch = small_arch()
        g1, d1, h1 = train(split, arch, self._cfg(), out_dir=tmp_path / "a")
        g2, d2, h2 = train(split, arch, self._cfg(), out_dir=tmp_path / "b")
        assert h1 == h2
        assert g1.parameter_checksum() == g2.parameter_checksum()
        assert d1.parameter_checksum() == d2.parameter_checksum()
        assert (tmp_path / "a/checkpoint.adae").read_bytes() == \
            (tmp_path / "b/checkpoint.adae").read_bytes()

    def test_empty_dataset_is_a_configuration_error(self):
        split = self._split()
        empty = type(split)(
            train=type(split.train)(np.zeros((0, 1, 32, 32), dtype=np.float32),
                                    np.zeros(0, dtype=np.int64), "empty", True),
            test=split.test, test_anomalous=split.test_anomalous,
            anomaly_class=1, split_seed=0)
        with pytest.raises(ConfigurationError):
            train(empty, small_arch(), self._cfg())

    def test_unnormalized_dataset_is_rejected(self):
        split = self._split()
        raw_train = type(split.train)(
            (split.train.images * 127.5 + 127.5).astype(np.uint8),
            split.train.class_labels, "raw", False)
        bad = type(split)(train=raw_train, test=split.test,
                          test_anomalous=split.test_anomalous,
                          anomaly_class=1, split_seed=0)
        with pytest.raises(ConfigurationError):
            train(bad, small_arch(), self._cfg())

    def test_history_file_has_one_record_per_epoch(self, tmp_path):
        split = self._split()
        train(split, small_arch(), self._cfg(epochs=3), out_dir=tmp_path)
        lines = (tmp_path / "history.jsonl").read_text().strip().split("\n")
        assert len(lines) == 3
        record = json.loads(lines[0])
        assert set(record) == {"epoch", "loss_d", "loss_g", "rec_real_d",
                               "rec_real_g", "adv", "lr_g", "lr_d"}

    def test_reconstruction_improves_over_synthetic_run(self):
        split = self._split(n_normal=120, n_anomalous=10)
        cfg = self._cfg(epochs=8, batch_size=32, adv_start_epoch=6)
        _, _, history = train(split, small_arch(), cfg)
        assert history[-1].rec_real_g < history[0].rec_real_g

    def test_checkpoint_written_at_end(self, tmp_path):
        split = self._split()
        train(split, small_arch(), self._cfg(), out_dir=tmp_path)
        assert (tmp_path / "checkpoint.adae").exists()
