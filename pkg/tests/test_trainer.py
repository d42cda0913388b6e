import numpy as np
import pytest

from bdlab.adapters import AdapterSpec, ConfigurationError
from bdlab.data import RingMixture, Rasters, few_shot_pool, few_shot_set, select_few_shot
from bdlab.diffusion import SamplerConfig, ancestral_sample, make_schedule
from bdlab.metrics import MetricsRow
from bdlab.model import DenoiserModel, ModelConfig
from bdlab.probes import zero_probe
from bdlab.tensor import Tensor
from bdlab.trainer import (
    Adam,
    Checkpoint,
    CheckpointSeries,
    PriorPreservation,
    TrainConfig,
    TrainingDiverged,
    finetune,
    pretrain,
)

SCHED = make_schedule()
RING = RingMixture()


def small_model(seed=0):
    return DenoiserModel.build(ModelConfig(dim=2, hidden=16, blocks=1, n_labels=9, time_dim=8), seed=seed)


def same_state(a, b) -> bool:
    sa, sb = a.snapshot(), b.snapshot()
    return sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)


class TestAdam:
    def test_first_step(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        Adam([p], lr=0.1).step([np.array([2.0])])
        # bias-corrected m/sqrt(v) is g/|g| on the first step
        assert p.data[0] == pytest.approx(0.9, abs=1e-8)

    def test_matches_reference_update(self, rng):
        p0 = rng.standard_normal(3)
        grads = [rng.standard_normal(3) for _ in range(5)]
        p = Tensor(p0.copy(), requires_grad=True)
        opt = Adam([p], lr=0.01)
        m = v = np.zeros(3)
        ref = p0.copy()
        for n, g in enumerate(grads, start=1):
            opt.step([g])
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9**n)) / (np.sqrt(v / (1 - 0.999**n)) + 1e-8)
        assert np.allclose(p.data, ref, rtol=0, atol=1e-15)


class TestData:
    def test_pool_deterministic(self):
        assert np.array_equal(few_shot_pool(RING, 3), few_shot_pool(RING, 3))
        assert not np.array_equal(few_shot_pool(RING, 3), few_shot_pool(RING, 4))

    def test_few_shot_prefix(self):
        assert np.array_equal(few_shot_set(RING, 6, 1)[:2], few_shot_set(RING, 2, 1))
        assert np.array_equal(select_few_shot(RING, [0, 1], 1), few_shot_set(RING, 2, 1))

    def test_bad_indices(self):
        with pytest.raises(IndexError):
            select_few_shot(RING, [256], 0)
        with pytest.raises(IndexError):
            select_few_shot(RING, [], 0)

    def test_rasters(self):
        x, y = Rasters().sample(np.random.default_rng(0), 20)
        assert x.shape == (20, 64) and np.all(np.abs(x) <= 1 + 1e-12)
        assert set(np.unique(y)) <= {0, 1, 2, 3}

    def test_ring_labels(self):
        x, y = RING.sample(np.random.default_rng(0), 500)
        named = y < RING.generic_label
        assert np.array_equal(RING.assign_modes(x)[named], y[named])


@pytest.fixture(scope="module")
def trained():
    model = DenoiserModel.build(ModelConfig(dim=2, hidden=32, blocks=2), seed=0)
    return pretrain(RING, SCHED, model, iterations=1500, lr=2e-3, seed=0)


class TestPretrain:

    def test_seeded_runs_bit_identical(self):
        a, ha = pretrain(RING, SCHED, small_model(), iterations=30, batch_size=16, seed=4, eval_every=10)
        b, hb = pretrain(RING, SCHED, small_model(), iterations=30, batch_size=16, seed=4, eval_every=10)
        assert same_state(a, b) and ha == hb

    def test_loss_decreases(self, trained):
        _, history = trained
        assert history[-1] < history[0]

    def test_hits_several_modes(self, trained):
        model, _ = trained
        x = ancestral_sample(model, SCHED, SamplerConfig(steps=50, seed=0), RING.generic_label, n=100)
        assert len(set(RING.assign_modes(x)[RING.within_modes(x)])) >= 2

    def test_zero_probe_stays_near_zero(self, trained):
        model, _ = trained
        rec = zero_probe(model, 1000, RING.generic_label, SCHED, few_shot_set(RING, 1, 0))
        assert rec["dist_to_zero"] < rec["dist_to_anchor"]

    def test_divergence(self):
        model = small_model()
        model.layers["out_proj"].weight.data *= 1e8
        with pytest.raises(TrainingDiverged) as err:
            pretrain(RING, SCHED, model, iterations=5, batch_size=8)
        assert err.value.iteration == 0

    def test_patience_stops_early(self):
        _, history = pretrain(RING, SCHED, small_model(), iterations=400, batch_size=8, lr=1e-9, eval_every=10, patience=3)
        # the first evaluation sets the baseline, then three stale ones stop the run
        assert len(history) == 4


class TestFinetune:
    def run(self, **kw):
        kw.setdefault("iterations", 40)
        kw.setdefault("checkpoint_every", 10)
        return finetune(small_model(), few_shot_set(RING, 2, 0), SCHED, TrainConfig(**kw))

    def test_cadence_and_determinism(self):
        a = self.run(seed=3)
        b = self.run(seed=3)
        assert [e.iteration for e in a.entries] == [0, 10, 20, 30, 40]
        assert a.losses == b.losses
        assert all(
            np.array_equal(ea.state[k], eb.state[k]) for ea, eb in zip(a.entries, b.entries) for k in ea.state
        )
        assert self.run(seed=4).losses != a.losses

    def test_bayesian_determinism(self):
        spec = AdapterSpec(bayesian=True, placement="all-linear")
        a, b = self.run(seed=1, adapter=spec), self.run(seed=1, adapter=spec)
        assert a.losses == b.losses and same_state(a.model, b.model)

    def test_pretrained_untouched(self):
        pre = small_model()
        before = pre.snapshot()
        finetune(pre, few_shot_set(RING, 1, 0), SCHED, TrainConfig(iterations=5))
        assert all(np.array_equal(before[k], v) for k, v in pre.snapshot().items())

    def test_model_at_restores(self):
        s = self.run()
        m10 = s.model_at(10)
        assert all(np.array_equal(m10.snapshot()[k], v) for k, v in s.entries[1].state.items())

    def test_metrics_rows_and_losses(self):
        def ev(model, it):
            return MetricsRow(it, 0.5, 0.1, 1.0)

        s = finetune(
            small_model(), few_shot_set(RING, 1, 0), SCHED,
            TrainConfig(iterations=20, checkpoint_every=10, lam=0.1, adapter=AdapterSpec(bayesian=True)),
            evaluate=ev,
        )
        assert [r.iteration for r in s.rows] == [0, 10, 20]
        assert np.isnan(s.rows[0].l_dm) and s.rows[1].l_dm == pytest.approx(np.mean(s.losses[:10]))
        assert s.rows[0].l_r == pytest.approx(0.0, abs=1e-12) and s.rows[-1].l_r > 0

    def test_stop_when(self):
        s = finetune(
            small_model(), few_shot_set(RING, 1, 0), SCHED, TrainConfig(iterations=100, checkpoint_every=10),
            stop_when=lambda model, it, row: it >= 30,
        )
        assert s.entries[-1].iteration == 30 and len(s.losses) == 30

    def test_bnn_smoke_over_seeds(self):
        spec = AdapterSpec(bayesian=True, sigma_init=0.01, prior_sigma=0.01)
        for seed in range(5):
            s = finetune(
                small_model(), few_shot_set(RING, 1, seed), SCHED,
                TrainConfig(seed=seed, iterations=400, batch_size=8, checkpoint_every=400, adapter=spec, lr=2e-3),
            )
            losses = np.array(s.losses)
            assert np.all(np.isfinite(losses))
            assert losses[-50:].mean() < losses[:50].mean()

    def test_prior_weight_zero_is_noop(self):
        pool = (few_shot_set(RING, 8, 5), np.full(8, 8))
        plain = self.run(seed=2)
        zero = finetune(
            small_model(), few_shot_set(RING, 2, 0), SCHED,
            TrainConfig(seed=2, iterations=40, checkpoint_every=10, prior=PriorPreservation(True, 0.0)),
            class_set=pool,
        )
        assert zero.losses == plain.losses
        on = finetune(
            small_model(), few_shot_set(RING, 2, 0), SCHED,
            TrainConfig(seed=2, iterations=40, checkpoint_every=10, prior=PriorPreservation(True, 1.0)),
            class_set=pool,
        )
        assert not same_state(on.model, plain.model)

    def test_prior_without_class_set(self):
        with pytest.raises(ConfigurationError):
            finetune(small_model(), few_shot_set(RING, 1, 0), SCHED, TrainConfig(prior=PriorPreservation(True)))

    @pytest.mark.parametrize("n", [0, 17])
    def test_few_shot_size(self, n):
        with pytest.raises(ConfigurationError):
            finetune(small_model(), np.zeros((n, 2)), SCHED, TrainConfig())

    def test_non_finite_loss(self):
        model = small_model()
        model.layers["out_proj"].weight.data[:] = np.nan
        with pytest.raises(TrainingDiverged) as err:
            finetune(model, few_shot_set(RING, 1, 0), SCHED, TrainConfig(iterations=3))
        assert err.value.iteration == 0

    @pytest.mark.parametrize(
        "kw", [{"iterations": 0}, {"lam": -1.0}, {"batch_size": 0}, {"checkpoint_every": 0}]
    )
    def test_config_validation(self, kw):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kw)

    def test_config_round_trip(self):
        cfg = TrainConfig(seed=3, lam=0.1, adapter=AdapterSpec(variant="lora", bayesian=True))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_series_order(self):
        s = CheckpointSeries()
        s.append(Checkpoint(10, None, None))
        with pytest.raises(ValueError):
            s.append(Checkpoint(10, None, None))
