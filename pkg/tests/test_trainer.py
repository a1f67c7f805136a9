import math

import numpy as np
import pytest

from cubature_shaping import channels as ch
from cubature_shaping import ckf, nn, trainer
from cubature_shaping.constellations import square_qam
from cubature_shaping.errors import ConfigError, NumericalBreakdown, SearchFailure, UnsupportedChannelError
from oracles import awgn_mi_quadrature, qam_points

NOISELESS = ch.AwgnConfig(math.inf)


class TestStreams:
    def test_named_streams_independent(self):
        a = trainer.stream(0, "batch").random(4)
        b = trainer.stream(0, "channel").random(4)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, trainer.stream(0, "batch").random(4))
        assert not np.array_equal(a, trainer.stream(1, "batch").random(4))


class TestBatch:
    def test_each_symbol_twice(self):
        b = trainer.make_batch(4, 8, np.random.default_rng(0))
        assert np.array_equal(np.bincount(b.targets, minlength=4), [2, 2, 2, 2])
        assert np.array_equal(nn.indices_from_one_hot(b.inputs), b.targets)

    @pytest.mark.parametrize("M", [2, 16, 64])
    def test_flat_histogram(self, M):
        rng = np.random.default_rng(M)
        for _ in range(5):
            b = trainer.make_batch(M, 32 * M, rng)
            assert np.all(np.bincount(b.targets, minlength=M) == 32)

    def test_same_seed_same_order(self):
        a = trainer.make_batch(16, 64, np.random.default_rng(9))
        b = trainer.make_batch(16, 64, np.random.default_rng(9))
        assert np.array_equal(a.targets, b.targets)

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            trainer.make_batch(4, 10, np.random.default_rng(0))


class TestConfig:
    def test_defaults(self):
        cfg = trainer.TrainConfig(M=16, channel=ch.AwgnConfig(10.0))
        assert cfg.batch_size == 512
        assert cfg.max_iterations == 2000
        assert trainer.TrainConfig(M=4, channel=ch.AwgnConfig(10.0), optimizer="backprop").max_iterations == 20000

    @pytest.mark.parametrize("kw", [{"M": 12}, {"M": 1}, {"M": 4, "batch_size": 10}, {"M": 4, "max_iterations": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            trainer.TrainConfig(channel=ch.AwgnConfig(10.0), **kw)

    def test_backprop_rejects_bps(self):
        with pytest.raises(UnsupportedChannelError):
            trainer.TrainConfig(M=4, channel=ch.PhaseNoiseBpsConfig(15.0), optimizer="backprop")


class TestConvergenceMonitor:
    def test_constant_loss_stops_after_hits(self):
        mon = trainer._ConvergenceMonitor(trainer.Convergence(window=10, rel_tol=1e-4, hits=3))
        trace, stop_at = [], None
        for i in range(100):
            trace.append(1.0)
            if mon.update(trace):
                stop_at = i + 1
                break
        # first window sets the baseline, then three consecutive hits
        assert stop_at == 40

    def test_streak_resets(self):
        mon = trainer._ConvergenceMonitor(trainer.Convergence(window=1, rel_tol=1e-4, hits=2))
        trace = []
        out = []
        for v in [1.0, 1.0, 2.0, 2.0, 2.0]:
            trace.append(v)
            out.append(mon.update(trace))
        assert out == [False, False, False, False, True]


class TestTrain:
    def test_zero_iterations_returns_initial_weights(self):
        cfg = trainer.TrainConfig(M=4, channel=ch.AwgnConfig(10.0), max_iterations=0, master_seed=5)
        rep = trainer.train(cfg)
        init = nn.init_weights(cfg.layout, trainer.stream(5, "init"))
        assert np.array_equal(rep.final_weights, init)
        assert rep.loss_trace.size == 0 and rep.iterations_run == 0

    def test_deterministic(self):
        cfg = trainer.TrainConfig(M=4, channel=ch.AwgnConfig(8.0), max_iterations=30, master_seed=11)
        a, b = trainer.train(cfg), trainer.train(cfg)
        assert np.array_equal(a.final_weights, b.final_weights)
        assert np.array_equal(a.loss_trace, b.loss_trace)
        assert a.mi_validation == b.mi_validation

    def test_vanishing_gain_keeps_weights(self):
        cfg = trainer.TrainConfig(
            M=4, channel=ch.AwgnConfig(8.0), hp=ckf.CkfHyperparams(0.0, 1e12), max_iterations=20, master_seed=2
        )
        rep = trainer.train(cfg)
        init = nn.init_weights(cfg.layout, trainer.stream(2, "init"))
        assert np.max(np.abs(rep.final_weights - init)) < 1e-6

    def test_noiseless_ckf_reaches_capacity(self):
        cfg = trainer.TrainConfig(M=4, channel=NOISELESS, max_iterations=1000, master_seed=0)
        rep = trainer.train(cfg)
        assert rep.mi_validation >= 1.99
        assert rep.loss_trace.size == rep.iterations_run
        assert np.mean(rep.loss_trace[-50:]) < np.mean(rep.loss_trace[:50])

    def test_backprop_learns(self):
        cfg = trainer.TrainConfig(
            M=4, channel=ch.AwgnConfig(10.0), optimizer="backprop", learning_rate=1e-2, max_iterations=1500
        )
        rep = trainer.train(cfg)
        assert rep.hyperparams_used is None
        assert rep.mi_validation > 1.9

    def test_breakdown_surfaces_context(self, monkeypatch):
        def boom(state, hp, *a, **k):
            raise NumericalBreakdown("forced", state.iteration, hp)

        monkeypatch.setattr(ckf, "ckf_step", boom)
        cfg = trainer.TrainConfig(M=4, channel=ch.AwgnConfig(10.0), max_iterations=5)
        with pytest.raises(NumericalBreakdown) as info:
            trainer.train(cfg)
        assert info.value.iteration == 0
        assert "q=" in str(info.value)


class TestEvaluate:
    def test_single_run_stats_equal(self):
        s = trainer.evaluate(ch.AwgnConfig(5.0), 1, 1000, np.random.default_rng(0), constellation=square_qam(4))
        assert s.mean == s.max == s.p25

    def test_noiseless(self):
        s = trainer.evaluate(NOISELESS, 3, 1000, np.random.default_rng(0), constellation=square_qam(16))
        for v in (s.mean, s.max, s.p25):
            assert v == pytest.approx(4.0, abs=1e-6)

    def test_qam4_matches_quadrature(self):
        s = trainer.evaluate(ch.AwgnConfig(10.0), 20, 10_000, np.random.default_rng(1), constellation=square_qam(4))
        assert s.mean == pytest.approx(awgn_mi_quadrature(qam_points(4), 10.0), abs=0.02)

    def test_percentile_linear(self):
        s = trainer.EvalStats.from_runs([1.0, 2.0, 3.0, 4.0, 5.0])
        assert s.p25 == 2.0
        s = trainer.EvalStats.from_runs([0.0, 1.0])
        assert s.p25 == 0.25

    def test_same_rng_same_result(self):
        a = trainer.evaluate(ch.NlpnConfig(), 2, 500, np.random.default_rng(3), constellation=square_qam(16))
        b = trainer.evaluate(ch.NlpnConfig(), 2, 500, np.random.default_rng(3), constellation=square_qam(16))
        assert a == b

    def test_decoder_needs_weights(self):
        with pytest.raises(ValueError):
            trainer.evaluate(NOISELESS, 1, 10, np.random.default_rng(0), "decoder", constellation=square_qam(4))


class TestGridSearch:
    def test_singleton_equals_train(self):
        base = trainer.TrainConfig(M=4, channel=ch.AwgnConfig(8.0), max_iterations=40, master_seed=4)
        res = trainer.grid_search(base, [1e-3], [1e-1], test_symbols=2000)
        plain = trainer.train(trainer.TrainConfig(**{**base.__dict__, "hp": ckf.CkfHyperparams(1e-3, 1e-1)}))
        assert res.best == ckf.CkfHyperparams(1e-3, 1e-1)
        assert np.array_equal(res.report.final_weights, plain.final_weights)

    def test_winner_has_max_test_mi(self):
        base = trainer.TrainConfig(M=4, channel=ch.AwgnConfig(5.0), max_iterations=60, master_seed=1)
        res = trainer.grid_search(base, [1e-2, 1e-3, 1e-4], [1.0, 1e-1, 1e-2], test_symbols=5000)
        assert len(res.cells) == 9
        ok = [c for c in res.cells if c.status == "ok"]
        best = max(c.test_mi for c in ok)
        win = next(c for c in ok if (c.q, c.r) == (res.best.q, res.best.r))
        assert win.test_mi == best
        # re-evaluate every cell on the same test seed
        for c in ok:
            s = trainer.evaluate(
                base.channel, 1, 5000, trainer.stream(1, "evaluation"), weights=c.report.final_weights, M=4
            )
            assert s.mean == c.test_mi

    def test_ties_prefer_smaller_q_then_r(self, monkeypatch):
        def fake_train(cfg, initial_weights=None):
            w = nn.init_weights(cfg.layout, np.random.default_rng(0))
            return trainer.TrainReport(w, np.zeros(1), 1.0, 1, cfg.hp, "ckf", cfg.M)

        monkeypatch.setattr(trainer, "train", fake_train)
        base = trainer.TrainConfig(M=4, channel=ch.AwgnConfig(5.0), max_iterations=1)
        res = trainer.grid_search(base, [1.0, 1e-3], [1e-1, 1e-4], test_symbols=100)
        assert res.best == ckf.CkfHyperparams(1e-3, 1e-4)

    def test_all_diverged(self, monkeypatch):
        def fail(cfg, initial_weights=None):
            raise NumericalBreakdown("forced", 3, cfg.hp)

        monkeypatch.setattr(trainer, "train", fail)
        base = trainer.TrainConfig(M=4, channel=ch.AwgnConfig(5.0), max_iterations=1)
        with pytest.raises(SearchFailure) as info:
            trainer.grid_search(base, [1.0, 1e-1], [1.0])
        assert len(info.value.outcomes) == 2
        assert info.value.exit_code == 2

    def test_default_grid_size(self):
        assert len(trainer.DEFAULT_GRID) ** 2 == 49

    def test_empty_grid(self):
        base = trainer.TrainConfig(M=4, channel=ch.AwgnConfig(5.0))
        with pytest.raises(ConfigError):
            trainer.grid_search(base, [], [1.0])
