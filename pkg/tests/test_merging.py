import numpy as np
import pytest

from mergelab.errors import ConfigError, StructureError
from mergelab.merging import (
    MergeSpec,
    merge_encoders,
    select_lambda,
    task_arithmetic,
    ties_merge,
    ties_trim,
    weight_average,
)
from mergelab.models import (
    ClassifierHead,
    EncoderArch,
    MlpEncoder,
    ModelParams,
    task_vector,
)
from mergelab.numkit import Rng
from mergelab.synthdata import gen_task
from mergelab.training import TrainConfig, finetune, pretrain_base


def params_of(*arrays, names=None):
    names = names or [f"layer{i}.weight" for i in range(len(arrays))]
    return ModelParams([(n, np.asarray(a, dtype=np.float64)) for n, a in zip(names, arrays)])


def drifted(base: ModelParams, seed: int, steps: int = 400) -> ModelParams:
    """Emulate a trained model: many rounded small updates from the base."""
    rng = Rng(seed)
    out = []
    for name, v in base.items():
        t = v.copy()
        for _ in range(steps):
            t = t + rng.normal(t.shape) * 1e-3
        out.append((name, t))
    return ModelParams(out)


class TestWeightAverage:
    def test_identical_inputs_identity_bitwise(self):
        base = params_of(Rng(1).normal((6, 5)), Rng(2).normal(5))
        theta = drifted(base, seed=3)
        avg = weight_average([theta, theta.copy(), theta.copy()])
        assert avg.equals(theta)

    def test_arithmetic_mean(self):
        a = params_of([[1.0, 3.0]])
        b = params_of([[3.0, 1.0]])
        avg = weight_average([a, b])
        np.testing.assert_array_equal(avg["layer0.weight"], [[2.0, 2.0]])

    def test_permutation_invariant_bitwise(self):
        base = params_of(Rng(4).normal((8, 8)))
        ms = [drifted(base, seed=10 + i) for i in range(4)]
        forward = weight_average(ms)
        backward = weight_average(list(reversed(ms)))
        shuffled = weight_average([ms[2], ms[0], ms[3], ms[1]])
        assert forward.equals(backward)
        assert forward.equals(shuffled)

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            weight_average([])

    def test_non_homologous_rejected(self):
        with pytest.raises(StructureError):
            weight_average([params_of(np.zeros(2)), params_of(np.zeros(3))])

    def test_inputs_unmodified(self):
        a = params_of(Rng(5).normal((3, 3)))
        b = params_of(Rng(6).normal((3, 3)))
        sa, sb = a.copy(), b.copy()
        weight_average([a, b])
        assert a.equals(sa) and b.equals(sb)


class TestTaskArithmetic:
    def test_single_model_lambda_one_bit_exact(self):
        base = params_of(Rng(7).normal((10, 10)) * 0.15, Rng(8).normal(10))
        theta_t = drifted(base, seed=9)
        merged = task_arithmetic(base, [theta_t], lam=1.0)
        assert merged.equals(theta_t)

    def test_lambda_zero_returns_base(self):
        base = params_of(Rng(10).normal((4, 4)))
        theta_t = drifted(base, seed=11)
        merged = task_arithmetic(base, [theta_t], lam=0.0)
        assert merged.equals(base)

    def test_elementwise_oracle(self):
        base = params_of([0.0, 0.0])
        m1 = params_of([1.0, 0.0])
        m2 = params_of([0.0, 1.0])
        merged = task_arithmetic(base, [m1, m2], lam=0.5)
        np.testing.assert_array_equal(merged["layer0.weight"], [0.5, 0.5])

    def test_lambda_out_of_range(self):
        base = params_of([0.0])
        with pytest.raises(ConfigError):
            task_arithmetic(base, [base.copy()], lam=1.5)
        with pytest.warns(UserWarning):
            task_arithmetic(base, [base.copy()], lam=1.5, strict_lambda=False)

    def test_matches_weight_average_at_zero_base(self):
        # WA == TA with lam = 1/T when theta_b = 0
        ms = [params_of(Rng(20 + i).normal((5, 5))) for i in range(3)]
        zero = ms[0].map(np.zeros_like)
        wa = weight_average(ms)
        ta = task_arithmetic(zero, ms, lam=1.0 / 3.0)
        for name, v in wa.items():
            np.testing.assert_allclose(v, ta[name], atol=1e-12)


class TestTiesTrim:
    def test_keep_all_unchanged(self):
        base = params_of([0.0, 0.0, 0.0, 0.0])
        tv = task_vector(params_of([3.0, -1.0, 0.5, -4.0]), base)
        out = ties_trim(tv, 1.0)
        np.testing.assert_array_equal(out.delta["layer0.weight"], [3.0, -1.0, 0.5, -4.0])

    def test_magnitude_oracle(self):
        base = params_of([0.0, 0.0, 0.0, 0.0])
        tv = task_vector(params_of([3.0, -1.0, 0.5, -4.0]), base)
        out = ties_trim(tv, 0.5)
        np.testing.assert_array_equal(out.delta["layer0.weight"], [3.0, 0.0, 0.0, -4.0])

    def test_all_zero_stays_zero(self):
        base = params_of([0.0, 0.0, 0.0])
        tv = task_vector(base.copy(), base)
        for keep in (0.1, 0.5, 1.0):
            out = ties_trim(tv, keep)
            assert np.all(out.delta["layer0.weight"] == 0.0)

    def test_threshold_tie_prefers_lower_flat_index(self):
        base = params_of([0.0, 0.0, 0.0, 0.0])
        tv = task_vector(params_of([2.0, -2.0, 2.0, -2.0]), base)
        out = ties_trim(tv, 0.5)  # k=2, all magnitudes equal -> keep indices 0,1
        np.testing.assert_array_equal(out.delta["layer0.weight"], [2.0, -2.0, 0.0, 0.0])

    def test_global_across_layers(self):
        base = params_of([0.0, 0.0], [0.0, 0.0])
        theta = params_of([5.0, 0.1], [0.2, 6.0])
        out = ties_trim(task_vector(theta, base), 0.5)  # top-2 of 4, globally
        np.testing.assert_array_equal(out.delta["layer0.weight"], [5.0, 0.0])
        np.testing.assert_array_equal(out.delta["layer1.weight"], [0.0, 6.0])

    def test_ceil_keep_count(self):
        base = params_of([0.0, 0.0, 0.0])
        tv = task_vector(params_of([1.0, 2.0, 3.0]), base)
        out = ties_trim(tv, 0.4)  # ceil(1.2) = 2 kept
        assert int(np.count_nonzero(out.delta["layer0.weight"])) == 2

    def test_invalid_fraction(self):
        base = params_of([0.0])
        tv = task_vector(base.copy(), base)
        with pytest.raises(ConfigError):
            ties_trim(tv, 0.0)


class TestTiesMerge:
    def test_single_task_keep_all_reduces_to_ta(self):
        base = params_of(Rng(30).normal((8, 8)) * 0.1)
        theta_t = drifted(base, seed=31)
        merged = ties_merge(base, [theta_t], lam=1.0, keep_fraction=1.0)
        assert merged.equals(theta_t)

    def test_hand_traced_election_keep_all(self):
        # deltas {[2,-1],[1,3]}: coord 0 sum=3 -> +, mean{2,1}=1.5;
        # coord 1 sum=2 -> +, mean{3}=3
        base = params_of([0.0, 0.0])
        m1 = params_of([2.0, -1.0])
        m2 = params_of([1.0, 3.0])
        merged = ties_merge(base, [m1, m2], lam=1.0, keep_fraction=1.0)
        np.testing.assert_array_equal(merged["layer0.weight"], [1.5, 3.0])

    def test_hand_traced_election_keep_half(self):
        # trim each delta to its single largest entry: [2,0] and [0,3] -> [2,3]
        base = params_of([0.0, 0.0])
        m1 = params_of([2.0, -1.0])
        m2 = params_of([1.0, 3.0])
        merged = ties_merge(base, [m1, m2], lam=1.0, keep_fraction=0.5)
        np.testing.assert_array_equal(merged["layer0.weight"], [2.0, 3.0])

    def test_zero_sum_elects_positive(self):
        base = params_of([0.0])
        m1 = params_of([1.0])
        m2 = params_of([-1.0])
        merged = ties_merge(base, [m1, m2], lam=1.0, keep_fraction=1.0)
        np.testing.assert_array_equal(merged["layer0.weight"], [1.0])

    def test_agreeing_signs_never_discarded(self):
        rng = Rng(33)
        base = params_of(np.zeros(16))
        ms = [params_of(np.abs(rng.normal(16)) + 0.01) for _ in range(3)]
        merged = ties_merge(base, ms, lam=0.7, keep_fraction=1.0)
        stacked = np.stack([m["layer0.weight"] for m in ms])
        expected = 0.7 * stacked.mean(axis=0)
        np.testing.assert_allclose(merged["layer0.weight"], expected, atol=1e-12)


class TestMergeSpecDispatch:
    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            MergeSpec("fisher")
        with pytest.raises(ConfigError):
            MergeSpec("task_arithmetic", lam=2.0)
        with pytest.raises(ConfigError):
            MergeSpec("ties", lam=0.5, ties_keep_fraction=0.0)
        MergeSpec("weight_averaging")  # lam irrelevant

    def test_dispatch_matches_direct_calls(self):
        base = params_of(Rng(40).normal((6, 6)) * 0.1)
        ms = [drifted(base, seed=41 + i) for i in range(2)]
        assert merge_encoders(base, ms, MergeSpec("weight_averaging")).equals(
            weight_average(ms)
        )
        assert merge_encoders(base, ms, MergeSpec("task_arithmetic", lam=0.4)).equals(
            task_arithmetic(base, ms, 0.4)
        )
        assert merge_encoders(
            base, ms, MergeSpec("ties", lam=0.4, ties_keep_fraction=0.3)
        ).equals(ties_merge(base, ms, 0.4, 0.3))


class TestSelectLambda:
    @staticmethod
    def _suite():
        tasks = [gen_task(t, 3, 60, 8, 1.2, seed=50 + t) for t in range(2)]
        arch = EncoderArch(8, (16,), 8)
        theta_b = pretrain_base(tasks, arch, TrainConfig(epochs=5, seed=51)).encoder_params
        fts = [finetune(theta_b, ds, TrainConfig(epochs=15, seed=60 + ds.task_id)) for ds in tasks]
        models = [r.model.encoder.params for r in fts]
        heads = [r.model.head for r in fts]
        return theta_b, models, heads, tasks

    def test_single_value_grid(self):
        theta_b, models, heads, tasks = self._suite()
        assert select_lambda(theta_b, models, heads, tasks, grid=[0.3]) == 0.3

    def test_tie_prefers_smaller(self):
        theta_b, models, heads, tasks = self._suite()
        # duplicate value in the grid guarantees at least one exact tie
        lam = select_lambda(theta_b, models, heads, tasks, grid=[0.4, 0.4])
        assert lam == 0.4

    def test_selected_beats_lambda_zero(self):
        theta_b, models, heads, tasks = self._suite()
        lam = select_lambda(theta_b, models, heads, tasks)

        def val_acc(l):
            merged = task_arithmetic(theta_b, models, l, strict_lambda=False)
            enc = MlpEncoder.from_params(merged)
            accs = []
            for head, ds in zip(heads, tasks):
                from mergelab.models import accuracy_from_logits

                logits = head.logits(enc.encode(ds.features_of("val")))
                accs.append(accuracy_from_logits(logits, ds.labels_of("val")))
            return float(np.mean(accs))

        assert val_acc(lam) > val_acc(0.0)

    def test_empty_grid_rejected(self):
        theta_b, models, heads, tasks = self._suite()
        with pytest.raises(ConfigError):
            select_lambda(theta_b, models, heads, tasks, grid=[])
