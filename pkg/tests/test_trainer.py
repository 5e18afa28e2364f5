import warnings

import numpy as np
import pytest

from partdisc.objectives import LossConfig, ModelParams
from partdisc.trainer import (
    TrainConfig,
    TrainState,
    _alpha_at,
    _cosine_lr,
    _tau_t,
    predict,
    train,
)

from conftest import small_synth


def quick_cfg(**overrides):
    kwargs = dict(epochs=3, warmup_epochs=1, batch_size=64, seed=0, K=3,
                  loss=LossConfig(alpha=1.0))
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def run(dataset, cfg):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return train(dataset, cfg)


class TestSchedules:
    def test_tau_t_endpoints(self):
        cfg = quick_cfg(tau_t_start=0.07, tau_t_end=0.04, tau_t_epochs=10)
        assert abs(_tau_t(cfg, 0) - 0.07) < 1e-12
        assert abs(_tau_t(cfg, 10) - 0.04) < 1e-12
        assert abs(_tau_t(cfg, 99) - 0.04) < 1e-12
        # monotone non-increasing
        vals = [_tau_t(cfg, e) for e in range(11)]
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))

    def test_alpha_warmup_ramp(self):
        cfg = quick_cfg(warmup_epochs=4, epochs=10, loss=LossConfig(alpha=2.0))
        assert _alpha_at(cfg, 0) == 0.0
        assert abs(_alpha_at(cfg, 2) - 1.0) < 1e-12
        assert _alpha_at(cfg, 4) == 2.0
        assert _alpha_at(cfg, 9) == 2.0

    def test_alpha_baseline_only_zero(self):
        cfg = quick_cfg(baseline_only=True, epochs=10, warmup_epochs=2)
        assert all(_alpha_at(cfg, e) == 0.0 for e in range(10))

    def test_cosine_lr(self):
        assert abs(_cosine_lr(0.1, 0, 10) - 0.1) < 1e-12
        assert abs(_cosine_lr(0.1, 10, 10)) < 1e-12
        assert abs(_cosine_lr(0.1, 5, 10) - 0.05) < 1e-12

    def test_config_validation(self):
        with pytest.raises(ValueError):
            quick_cfg(warmup_epochs=5, epochs=3).validate()


class TestTraining:
    def test_deterministic_given_seed(self, small_dataset):
        s1, m1 = run(small_dataset, quick_cfg())
        s2, m2 = run(small_dataset, quick_cfg())
        for name in ModelParams.GROUPS:
            np.testing.assert_array_equal(getattr(s1.params, name), getattr(s2.params, name))
        assert m1 == m2

    def test_alpha_zero_bitwise_equals_baseline(self, small_dataset):
        s_zero, m_zero = run(small_dataset, quick_cfg(loss=LossConfig(alpha=0.0)))
        s_base, m_base = run(small_dataset, quick_cfg(baseline_only=True))
        for name in ModelParams.GROUPS:
            np.testing.assert_array_equal(getattr(s_zero.params, name), getattr(s_base.params, name))
        keys = ("acc_all", "acc_old", "acc_new", "total")
        for a, b in zip(m_zero, m_base):
            for k in keys:
                assert a[k] == b[k]

    def test_metrics_rows_complete(self, small_dataset):
        _, metrics = run(small_dataset, quick_cfg())
        assert len(metrics) == 3
        for row in metrics:
            for key in ("epoch", "alpha", "lr", "acc_all", "acc_old", "acc_new", "mean_purity"):
                assert key in row
            assert 0.0 <= row["acc_all"] <= 1.0

    def test_accuracy_improves_over_initial(self):
        # global-only objective on a separable problem: accuracy must not
        # degrade from its first-epoch value and must end well above chance
        ds = small_synth()
        cfg = quick_cfg(epochs=15, warmup_epochs=2, baseline_only=True)
        state, metrics = run(ds, cfg)
        assert metrics[-1]["acc_all"] > metrics[0]["acc_all"]
        assert metrics[-1]["acc_all"] > 0.9

    def test_gmms_fitted_for_every_class(self, small_dataset):
        state, _ = run(small_dataset, quick_cfg())
        assert set(state.gmms.keys()) == set(range(6))
        for g in state.gmms.values():
            assert g.K <= 3

    def test_choose_k_explicit(self, small_dataset):
        state, _ = run(small_dataset, quick_cfg(K=2))
        assert state.K == 2

    def test_choose_k_silhouette(self):
        # well-separated parts: silhouette selection should recover K_true=3
        ds = small_synth(part_separation=8.0, noise_sigma=0.2)
        state, _ = run(ds, quick_cfg(K=None, k_range=(2, 5), epochs=1))
        assert state.K == 3

    def test_part_head_trained_flag(self, small_dataset):
        s_full, _ = run(small_dataset, quick_cfg())
        assert s_full.part_head_trained
        s_pdr, _ = run(small_dataset, quick_cfg(use_part_base=False))
        assert not s_pdr.part_head_trained
        s_base, _ = run(small_dataset, quick_cfg(baseline_only=True))
        assert not s_base.part_head_trained


class TestPredict:
    def test_combine_default_rules(self, small_dataset):
        state, _ = run(small_dataset, quick_cfg())
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            combined = predict(state, small_dataset)
            globl = predict(state, small_dataset, combine=False)
        assert combined.shape == globl.shape == (len(small_dataset),)
        # alpha=0 state must fall back to the global branch even when mixtures exist
        state.loss_cfg = LossConfig(alpha=0.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            np.testing.assert_array_equal(predict(state, small_dataset), globl)

    def test_untrained_part_head_not_combined(self, small_dataset):
        state, _ = run(small_dataset, quick_cfg(use_part_base=False))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            np.testing.assert_array_equal(
                predict(state, small_dataset),
                predict(state, small_dataset, combine=False),
            )

    def test_predictions_in_range(self, small_dataset):
        state, _ = run(small_dataset, quick_cfg())
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            preds = predict(state, small_dataset)
        assert preds.min() >= 0 and preds.max() < 6
