import numpy as np
import pytest

from gatedunipose import tensor as T
from gatedunipose.data import SyntheticSpec, read_image_tensor
from gatedunipose.model import ModelConfig, build_model, save_checkpoint
from gatedunipose.tensor import Tensor
from gatedunipose.training import Adam, HeatmapTrainer, ToyTrainer, TrainConfig, TrainingDiverged, pck


def tiny_config(**overrides) -> ModelConfig:
    base = dict(input_size=(32, 32), joints=2, stem_stride=4, stage_channels=(4, 8, 8, 8),
                stage_depths=(1, 1, 1, 1), stage_kernels=(7, 3, 3, 3), decoder_channels=4, seed=5)
    return ModelConfig(**{**base, **overrides})


def tiny_spec(samples=16, seed=2) -> SyntheticSpec:
    return SyntheticSpec(joints=2, image_size=(32, 32), blob_radius=2.0, jitter=4.0, samples=samples, seed=seed)


def toy_trainer(tmp_path=None, **train):
    cfg = TrainConfig(**{"steps": 8, "batch_size": 4, "lr": 1e-3, "holdout": 4, **train})
    return ToyTrainer(build_model(tiny_config()), tiny_spec(), cfg, out_dir=tmp_path)


def test_adam_first_step_matches_closed_form(f64):
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    opt = Adam([("p", p)], lr=0.1)
    p.grad = np.array([0.3, -0.0, 4.0])
    opt.step()
    # bias-corrected first step is lr * g / (|g| + eps')
    expected = np.array([1.0, -2.0, 0.5]) - 0.1 * np.array([0.3, 0.0, 4.0]) / (np.abs([0.3, 0.0, 4.0]) + 1e-8)
    assert np.allclose(p.data, expected, rtol=0, atol=1e-12)


def test_adam_skips_parameters_without_gradient(f64):
    p = Tensor(np.ones(2), requires_grad=True)
    opt = Adam([("p", p)])
    opt.step()
    assert np.array_equal(p.data, np.ones(2))


def test_adam_state_round_trip(f64):
    p = Tensor(np.ones(3), requires_grad=True)
    opt = Adam([("p", p)])
    p.grad = np.arange(3.0)
    opt.step()
    other = Adam([("p", p)])
    other.load_records(opt.state_records())
    assert other.step_count == 1
    assert np.array_equal(other.m["p"], opt.m["p"]) and np.array_equal(other.v["p"], opt.v["p"])


def test_pck_counts_visible_joints_only():
    gt = np.array([[[0, 0, 2], [10, 10, 2], [5, 5, 0]]], dtype=float)
    pred = np.array([[[1, 1], [13, 10], [100, 100]]], dtype=float)
    assert pck(pred, gt, 2.0) == 0.5
    assert pck(pred, gt, 3.0) == 1.0
    assert pck(pred, np.zeros((1, 1, 3)), 2.0) == 0.0


def test_zero_learning_rate_keeps_epoch_loss_constant(f64):
    trainer = toy_trainer(lr=0.0)
    result = trainer.run(steps=3 * trainer.steps_per_epoch)
    losses = [e["loss"] for e in result.epochs]
    assert len(losses) == 3
    assert losses[0] == losses[1] == losses[2]


def test_training_reduces_loss(f64):
    trainer = toy_trainer(lr=3e-3)
    result = trainer.run(steps=24)
    assert result.losses[-1] < result.losses[0]
    assert 0.0 <= result.final_pck <= 1.0
    assert len(result.epochs) == 24 // trainer.steps_per_epoch


def test_fixed_order_batching_repeats_each_epoch():
    trainer = toy_trainer()
    n = trainer.steps_per_epoch
    assert n == 4
    seen = np.concatenate([trainer.batch_indices(s) for s in range(n)])
    assert sorted(seen) == list(range(16))
    assert all(np.array_equal(trainer.batch_indices(s), trainer.batch_indices(s + n)) for s in range(n))


def test_holdout_is_disjoint_from_training_samples():
    trainer = toy_trainer()
    for h in trainer.holdout_images:
        assert not any(np.array_equal(h, x) for x in trainer.images)


def test_resume_matches_an_uninterrupted_run(f64, tmp_path):
    straight = toy_trainer()
    full = straight.run(steps=8).losses

    first = toy_trainer()
    head = first.run(steps=4).losses
    first.save(tmp_path)
    second = toy_trainer()
    start = second.restore(tmp_path)
    assert start == 4
    tail = second.run(start_step=start, steps=4).losses
    assert np.allclose(head + tail, full, rtol=0, atol=1e-12)


def test_non_finite_loss_aborts_and_dumps_the_batch(f64, tmp_path):
    trainer = toy_trainer(tmp_path)
    idx = trainer.batch_indices(0)
    trainer.images[idx[1], 0, 3, 3] = np.nan
    with pytest.raises(TrainingDiverged, match="step 0"):
        trainer.run(steps=2)
    images = read_image_tensor(tmp_path / "diverged_step0_images.gupi")
    kps = read_image_tensor(tmp_path / "diverged_step0_keypoints.gupi")
    assert images.shape == (4, 3, 32, 32) and np.isnan(images).any()
    assert np.array_equal(kps, trainer.keypoints[idx])


def test_distillation_term_is_added_with_its_weight(f64):
    teacher = build_model(tiny_config(seed=9))
    cfg = TrainConfig(steps=1, batch_size=4, lr=0.0, holdout=4, distill_weight=0.5)
    plain = ToyTrainer(build_model(tiny_config()), tiny_spec(), TrainConfig(steps=1, batch_size=4, lr=0.0, holdout=4))
    distilled = ToyTrainer(build_model(tiny_config()), tiny_spec(), cfg, teacher=teacher)
    assert distilled.train_step(0) > plain.train_step(0)


def test_heatmap_trainer_without_holdout_reports_nan(f64, rng):
    model = build_model(tiny_config())
    images = rng.random((4, 3, 32, 32))
    kps = np.concatenate([rng.uniform(4, 28, (4, 2, 2)), np.full((4, 2, 1), 2.0)], axis=2)
    trainer = HeatmapTrainer(model, images, kps, TrainConfig(steps=2, batch_size=2))
    result = trainer.run()
    assert len(result.losses) == 2 and np.isnan(result.final_pck)


def test_saved_checkpoint_reloads_for_prediction(f64, tmp_path, rng):
    trainer = toy_trainer()
    trainer.run(steps=2)
    path = trainer.save(tmp_path)
    assert path.name == "model.gupz" and (tmp_path / "optimizer.gupz").exists()
    from gatedunipose.model import load_checkpoint

    x = rng.random((2, 3, 32, 32))
    assert np.array_equal(load_checkpoint(path).predict(x), trainer.model.predict(x))


def test_training_runs_in_f32():
    with T.precision("f32"):
        trainer = toy_trainer()
        result = trainer.run(steps=4)
        assert trainer.images.dtype == np.float32
    assert np.all(np.isfinite(result.losses))
