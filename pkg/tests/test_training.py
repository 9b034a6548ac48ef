import math
import os

import numpy as np
import pytest
import torch

from gravitynet.data import load_dataset, read_manifest
from gravitynet.errors import DataIOError, InvalidInputError
from gravitynet.synthetic import SyntheticSpec, generate_synthetic
from gravitynet.training import (
    CHECKPOINT_MAGIC,
    PlateauScheduler,
    TrainConfig,
    build_configured_model,
    load_checkpoint,
    make_grid,
    run_detection,
    save_checkpoint,
    train_model,
)

MICRO_CONFIG = TrainConfig(
    epochs=2,
    batch_size=4,
    step=10,
    hooking_distance=10.0,
    box_side=5.0,
    head_channels=16,
    head_depth=1,
    validation_fraction=0.3,
    seed=11,
)


@pytest.fixture(scope="module")
def micro_dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("micro") / "ds")
    spec = SyntheticSpec(
        image_count=10, image_size=(64, 64), lesions_per_image=(1, 3),
        distractor_count=(1, 2), rng_seed=5,
    )
    generate_synthetic(spec, out)
    return load_dataset(read_manifest(out))


class TestPlateauScheduler:
    def make(self, lr=1e-4, factor=0.1, patience=3):
        param = torch.nn.Parameter(torch.zeros(1))
        opt = torch.optim.Adam([param], lr=lr)
        return PlateauScheduler(opt, factor, patience)

    def test_two_trigger_arithmetic(self):
        sched = self.make()
        for metric in [1.0] + [2.0] * 3 + [3.0] * 3:
            sched.step(metric)
        assert sched.lr == pytest.approx(1e-6)

    def test_requires_consecutive_non_improving_epochs(self):
        sched = self.make()
        for metric in [1.0, 2.0, 0.5, 2.0, 2.0]:
            sched.step(metric)
        assert sched.lr == pytest.approx(1e-4)
        sched.step(2.0)
        assert sched.lr == pytest.approx(1e-5)

    def test_improvement_must_beat_best_seen(self):
        sched = self.make(patience=2)
        sched.step(1.0)
        sched.step(1.5)
        sched.step(1.2)  # worse than best 1.0, counts as bad
        assert sched.lr == pytest.approx(1e-5)


class TestGrid:
    def test_desk_geometry(self):
        grid = make_grid(256, 256, MICRO_CONFIG)
        assert (grid.fm_height, grid.fm_width) == (8, 8)
        assert grid.grid_size == 32

    def test_rejects_non_divisible_size(self):
        with pytest.raises(InvalidInputError):
            make_grid(250, 256, MICRO_CONFIG)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        grid = make_grid(64, 64, MICRO_CONFIG)
        net = build_configured_model(grid, MICRO_CONFIG)
        opt = torch.optim.Adam(net.parameters(), lr=1e-4)
        path = str(tmp_path / "ckpt.pt")
        save_checkpoint(path, net, opt, grid, MICRO_CONFIG, epoch=7, best_metric=0.5)
        loaded = load_checkpoint(path)
        assert loaded.epoch == 7
        assert loaded.best_metric == 0.5
        assert loaded.grid == grid
        assert loaded.train_config == MICRO_CONFIG
        for a, b in zip(net.state_dict().values(), loaded.net.state_dict().values()):
            assert torch.equal(a, b)

    def test_magic_string_present(self, tmp_path):
        grid = make_grid(64, 64, MICRO_CONFIG)
        net = build_configured_model(grid, MICRO_CONFIG)
        path = str(tmp_path / "ckpt.pt")
        save_checkpoint(path, net, None, grid, MICRO_CONFIG, 1, 0.0)
        payload = torch.load(path, weights_only=True)
        assert payload["magic"] == CHECKPOINT_MAGIC

    def test_rejects_foreign_file(self, tmp_path):
        path = str(tmp_path / "other.pt")
        torch.save({"weights": torch.zeros(3)}, path)
        with pytest.raises(DataIOError):
            load_checkpoint(path)

    def test_missing_file(self):
        with pytest.raises(DataIOError):
            load_checkpoint("/nope/ckpt.pt")


class TestTrainLoop:
    def test_micro_run_produces_report_and_checkpoint(self, micro_dataset, tmp_path):
        result = train_model(micro_dataset, 0, MICRO_CONFIG, str(tmp_path), save_init=True)
        assert os.path.exists(result.checkpoint_path)
        assert os.path.exists(str(tmp_path / "init.pt"))
        report = result.report
        assert len(report.epochs) == 2
        assert report.best_epoch in (1, 2)
        assert all(math.isfinite(e.train_loss) for e in report.epochs)
        assert all(0.0 <= e.val_aufc <= 1.0 for e in report.epochs)
        assert report.time_per_epoch_s > 0
        assert report.throughput_ips > 0
        # fold split: 10 images -> 5 per fold, 30% validation = 2 images
        assert len(result.split.val_ids) == 2
        assert len(result.split.train_ids) == 3
        assert len(result.split.test_ids) == 5

    def test_identical_seeds_reproduce_weights(self, micro_dataset, tmp_path):
        a = train_model(micro_dataset, 0, MICRO_CONFIG, str(tmp_path / "a"))
        b = train_model(micro_dataset, 0, MICRO_CONFIG, str(tmp_path / "b"))
        ckpt_a = load_checkpoint(a.checkpoint_path)
        ckpt_b = load_checkpoint(b.checkpoint_path)
        for pa, pb in zip(ckpt_a.net.state_dict().values(), ckpt_b.net.state_dict().values()):
            assert torch.equal(pa, pb)
        assert [e.train_loss for e in a.report.epochs] == [e.train_loss for e in b.report.epochs]

    def test_different_seed_changes_split(self, micro_dataset, tmp_path):
        other = TrainConfig(**{**MICRO_CONFIG.__dict__, "seed": 99})
        a = train_model(micro_dataset, 0, MICRO_CONFIG, str(tmp_path / "a"))
        b = train_model(micro_dataset, 0, other, str(tmp_path / "b"))
        assert a.split != b.split

    def test_detection_runner_consistency(self, micro_dataset, tmp_path):
        result = train_model(micro_dataset, 0, MICRO_CONFIG, str(tmp_path))
        checkpoint = load_checkpoint(result.checkpoint_path)
        samples = [micro_dataset.by_id(i) for i in result.split.test_ids]
        dets_a, tpi, throughput = run_detection(
            checkpoint.net, checkpoint.grid, samples, MICRO_CONFIG.inference_config()
        )
        dets_b, _, _ = run_detection(
            checkpoint.net, checkpoint.grid, samples, MICRO_CONFIG.inference_config()
        )
        assert dets_a == dets_b
        assert tpi > 0 and throughput > 0
        assert set(dets_a) == set(result.split.test_ids)

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            TrainConfig(epochs=0)
        with pytest.raises(InvalidInputError):
            TrainConfig(lr_decay_factor=1.5)
