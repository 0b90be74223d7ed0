import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclereg.convex import CoupledConvexConfig, coupled_convex
from cyclereg.correlation import correlate
from cyclereg.errors import DataError, GridError
from cyclereg.features import extract, init_state, load_checkpoint
from cyclereg.grid import DisplacementField, upsample_field, zero_field
from cyclereg.metrics import mean_endpoint_error
from cyclereg.phantom import PhantomSpec, make_dataset
from cyclereg.selftrain import (
    AugmentConfig,
    PseudoLabelStore,
    SelfTrainingConfig,
    TrainingSchedule,
    cosine_lr,
    difficulty_score,
    generate_pseudo_labels,
    random_affine,
    run_self_training,
    sampling_weights,
    train_stage,
    tre_loss,
)

SPEC32 = PhantomSpec(dims=(32, 32, 32), field_sigma=5.0, field_magnitude=4.0, seed=7)


def constant_field(shape, vec, grid_scale=8):
    data = torch.zeros(3, *shape)
    for c, v in enumerate(vec):
        data[c] = v
    return DisplacementField(data, grid_scale)


@pytest.fixture(scope="module")
def dataset32(tmp_path_factory):
    root = tmp_path_factory.mktemp("selftrain_data")
    return make_dataset(SPEC32, 4, root)


class TestTreLoss:
    def test_identical_fields_zero(self):
        f = constant_field((4, 4, 4), (1.0, 2.0, -1.0))
        assert float(tre_loss(f, f, (1.0, 1.0, 1.0))) == 0.0

    def test_unit_conversion(self):
        a = constant_field((4, 4, 4), (1.0, 0.0, 0.0), grid_scale=8)
        b = zero_field((4, 4, 4), grid_scale=8)
        assert float(tre_loss(a, b, (2.0, 2.0, 2.0))) == pytest.approx(16.0)

    def test_three_four_five_half_nodes(self):
        shape = (2, 2, 2)
        a = torch.zeros(3, *shape)
        a[1, 0] = 3.0
        a[2, 0] = 4.0  # half the nodes differ by (0, 3, 4)
        loss = tre_loss(DisplacementField(a, 1), zero_field(shape), (1.0, 1.0, 1.0))
        assert float(loss) == pytest.approx(2.5)

    def test_grid_mismatch_rejected(self):
        with pytest.raises(GridError):
            tre_loss(zero_field((4, 4, 4)), zero_field((5, 4, 4)), (1.0, 1.0, 1.0))

    def test_differentiable_and_nonnegative(self):
        data = torch.randn(3, 3, 3, 3, dtype=torch.float64).requires_grad_(True)
        loss = tre_loss(DisplacementField(data), zero_field((3, 3, 3), dtype=torch.float64),
                        (1.0, 1.0, 1.0))
        assert float(loss.detach()) >= 0.0
        loss.backward()
        assert data.grad is not None and torch.isfinite(data.grad).all()


class TestDifficultyScore:
    def test_identical_fields(self):
        f = constant_field((2, 2, 2), (0.5, 0.5, 0.5))
        assert difficulty_score(f, f, (1.0, 1.0, 1.0)) == 0.0

    def test_unit_conversion(self):
        a = constant_field((2, 2, 2), (2.0, 0.0, 0.0), grid_scale=8)
        b = zero_field((2, 2, 2), grid_scale=8)
        assert difficulty_score(a, b, (2.0, 2.0, 2.0)) == pytest.approx(32.0)

    def test_equals_tre_loss(self):
        rng = np.random.default_rng(0)
        a = DisplacementField(torch.as_tensor(rng.normal(size=(3, 3, 3, 3)).astype(np.float32)), 8)
        b = DisplacementField(torch.as_tensor(rng.normal(size=(3, 3, 3, 3)).astype(np.float32)), 8)
        assert difficulty_score(a, b, (2.0, 1.0, 1.0)) == pytest.approx(
            float(tre_loss(a, b, (2.0, 1.0, 1.0))))


class TestSamplingWeights:
    def test_singleton(self):
        assert sampling_weights([3.0]) == pytest.approx([1.0])

    def test_reference_values(self):
        weights = sampling_weights([5.0, 1.0, 9.0])
        assert weights == pytest.approx([0.33330, 0.66224, 0.00446], abs=1e-4)

    def test_all_equal_uses_index_ranking(self):
        weights = sampling_weights([2.0, 2.0, 2.0])
        ramp = 1 / (1 + np.exp(-np.array([5.0, 0.0, -5.0])))
        assert weights == pytest.approx(ramp / ramp.sum())

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(min_value=0, max_value=100), min_size=1, max_size=20))
    def test_valid_distribution_decreasing_in_rank(self, difficulties):
        weights = sampling_weights(difficulties)
        assert np.all(weights >= 0)
        assert abs(weights.sum() - 1.0) <= 1e-9
        order = np.argsort(np.asarray(difficulties), kind="stable")
        ranked = weights[order]
        assert np.all(np.diff(ranked) < 0)  # easiest first, strictly decreasing


class TestCosineLr:
    def test_endpoints(self):
        total = 37
        assert cosine_lr(0, total, 1e-3, 1e-5) == pytest.approx(1e-3)
        assert cosine_lr(total - 1, total, 1e-3, 1e-5) == pytest.approx(1e-5)

    def test_monotone_decay(self):
        values = [cosine_lr(i, 20, 1e-3, 1e-5) for i in range(20)]
        assert all(b <= a for a, b in zip(values, values[1:]))


class TestRandomAffine:
    def test_disabled_gives_identity(self):
        rng = np.random.default_rng(1)
        aff = random_affine(rng, (32, 32, 32), AugmentConfig(enabled=False))
        assert torch.equal(aff.matrix, torch.eye(3))
        assert torch.equal(aff.offset, torch.zeros(3))

    def test_magnitude_bounds(self):
        rng = np.random.default_rng(2)
        cfg = AugmentConfig(max_rotation_deg=10.0, max_scale=0.1, max_translation=5.0)
        shape = (32, 32, 32)
        center = torch.full((3,), 15.5)
        for _ in range(20):
            aff = random_affine(rng, shape, cfg)
            det = abs(float(torch.linalg.det(aff.matrix.double())))
            assert 0.9 ** 3 - 1e-6 <= det <= 1.1 ** 3 + 1e-6
            moved = aff.apply_points(center.view(3, 1)).squeeze()
            assert float((moved - center).abs().max()) <= 5.0 + 1e-5


class TestGeneratePseudoLabels:
    def test_store_bookkeeping_and_determinism(self, dataset32, tmp_path):
        cfg = SelfTrainingConfig(seed=0)
        state = init_state(0)
        store_a = PseudoLabelStore(tmp_path / "a")
        generate_pseudo_labels(state, dataset32, cfg, store_a, 0)
        assert len(store_a.pair_ids(0)) == len(dataset32)
        assert all(d >= 0 for d in store_a.difficulties(0))
        store_b = PseudoLabelStore(tmp_path / "b")
        generate_pseudo_labels(init_state(0), dataset32, cfg, store_b, 0)
        for pair in dataset32.pairs:
            fa = (store_a.stage_dir(0) / f"{pair.pair_id}.refined.rgf").read_bytes()
            fb = (store_b.stage_dir(0) / f"{pair.pair_id}.refined.rgf").read_bytes()
            assert fa == fb

    def test_stage0_labels_beat_identity_on_most_pairs(self, dataset32, tmp_path):
        cfg = SelfTrainingConfig(seed=0)
        store = PseudoLabelStore(tmp_path / "labels")
        generate_pseudo_labels(init_state(0), dataset32, cfg, store, 0)
        improved = 0
        for pair in dataset32.pairs:
            gt = pair.load_gt_field()
            label = upsample_field(store.load_entry(0, pair.pair_id).refined, gt.shape)
            if mean_endpoint_error(label, gt) < mean_endpoint_error(zero_field(gt.shape), gt):
                improved += 1
        assert improved >= 3  # >= 75% of 4 pairs

    def test_unrefined_labels_flagged(self, dataset32, tmp_path):
        cfg = SelfTrainingConfig(seed=0, refine_labels=False)
        store = PseudoLabelStore(tmp_path / "raw_labels")
        generate_pseudo_labels(init_state(0), dataset32, cfg, store, 0)
        assert store.manifest(0)["flags"]["labels_refined"] is False


class TestTrainStage:
    def test_loss_decreases_on_seeded_data(self, dataset32, tmp_path):
        cfg = SelfTrainingConfig(augment=AugmentConfig(max_translation=3.0), seed=0)
        store = PseudoLabelStore(tmp_path / "labels")
        generate_pseudo_labels(init_state(0), dataset32, cfg, store, 0)
        schedule = TrainingSchedule(stages=1, iterations_per_stage=60, batch_size=2)
        state, report = train_stage(1, init_state(1), store, dataset32, schedule, cfg)
        assert report["loss_mean_final_tenth"] < report["loss_first"]
        assert report["lr_first"] == pytest.approx(1e-3)
        assert report["lr_last"] == pytest.approx(1e-5)
        assert report["labels_refined"] is True
        assert report["learning_stream_refined"] is False

    def test_self_consistent_labels_have_small_readout_gap(self, dataset32):
        # labels equal to the network's own hard outputs: the remaining loss is
        # exactly the soft/hard read-out gap, near zero for peaked costs
        state = init_state(3)
        fixed, moving = dataset32.load_pair(0)
        cfg = CoupledConvexConfig()
        with torch.no_grad():
            feat_f, feat_m, _, _ = extract(state, fixed, moving)
            cost = correlate(feat_f, feat_m)
            hard = coupled_convex(cost, CoupledConvexConfig(hard_mode=True))
            soft = coupled_convex(cost, cfg)
        gap = float(tre_loss(soft, hard, (1.0, 1.0, 1.0)))
        assert gap < 0.5  # mm; typical mismatched-label losses are 5-10 mm

    def test_missing_previous_stage_rejected(self, dataset32, tmp_path):
        store = PseudoLabelStore(tmp_path / "empty")
        schedule = TrainingSchedule(stages=1, iterations_per_stage=1)
        with pytest.raises(DataError):
            train_stage(1, init_state(0), store, dataset32, schedule,
                        SelfTrainingConfig())


class TestRunSelfTraining:
    def test_bookkeeping_three_stages(self, dataset32, tmp_path):
        cfg = SelfTrainingConfig(augment=AugmentConfig(max_translation=3.0), seed=0)
        schedule = TrainingSchedule(stages=3, iterations_per_stage=4, batch_size=2)
        out = tmp_path / "run"
        state, report = run_self_training(dataset32, schedule, cfg, seed=0, out_dir=out)
        store = PseudoLabelStore(out / "labels")
        assert store.stages() == [0, 1, 2, 3]  # 4 pseudo-label versions
        checkpoints = sorted((out / "checkpoints").glob("*.ckpt"))
        assert len(checkpoints) == 3
        assert [s["stage"] for s in sorted(report["stages"], key=lambda s: s["stage"])] \
            == [1, 2, 3]
        # warm restart: every stage starts at lr_max
        assert all(s["lr_first"] == pytest.approx(1e-3) for s in report["stages"])
        assert state.stage == 3

    def test_resume_skips_completed_stages(self, dataset32, tmp_path):
        cfg = SelfTrainingConfig(augment=AugmentConfig(max_translation=3.0), seed=0)
        schedule = TrainingSchedule(stages=2, iterations_per_stage=3, batch_size=2)
        out = tmp_path / "run"
        state_a, _ = run_self_training(dataset32, schedule, cfg, seed=0, out_dir=out)
        state_b, _ = run_self_training(dataset32, schedule, cfg, seed=0, out_dir=out,
                                       resume=True)
        for (name, pa), (_, pb) in zip(state_a.state_dict().items(),
                                       state_b.state_dict().items()):
            assert torch.equal(pa, pb), name

    def test_different_init_for_first_learning_stage(self, dataset32, tmp_path):
        cfg = SelfTrainingConfig(augment=AugmentConfig(enabled=False), seed=0)
        schedule = TrainingSchedule(stages=1, iterations_per_stage=1, batch_size=1)
        out = tmp_path / "run"
        run_self_training(dataset32, schedule, cfg, seed=11, out_dir=out)
        trained = load_checkpoint(out / "checkpoints" / "stage_01.ckpt")
        assert trained.seed == 12  # seed + 1, per the different-initialization rule
