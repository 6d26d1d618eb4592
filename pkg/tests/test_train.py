"""Training loop, early stopping, resumption and the multi-run protocol."""
import csv

import numpy as np
import pytest

from medkan.config import MedKANConfig, RunConfig, StageSpec, TrainConfig, load_run_config
from medkan.datasets import DatasetSplit, prepare_split, synth_blobs
from medkan.errors import DataError
from medkan.gradcheck import toy_config
from medkan.metrics import EvalReport
from medkan.model import MedKAN
from medkan.train import (
    METRICS_HEADER,
    evaluate,
    predict_logits,
    train_loop,
    train_runs,
    write_echo,
)
from medkan.variants import ABLATION_ROWS, ablation_config


@pytest.fixture(scope="module")
def splits():
    train, val, test = synth_blobs(3, 10, 8, 8, seed=0)
    return {"train": train, "val": val, "test": test}


def _constant(acc=0.5):
    return lambda model, split: EvalReport(acc=acc, auc=0.5, loss=1.0, n=len(split))


def _read_rows(path):
    with path.open(newline="", encoding="utf-8") as handle:
        return list(csv.reader(handle))


class TestTrainLoop:
    def test_patience_stops_early(self, splits):
        cfg = TrainConfig(lr=1e-3, batch_size=8, max_epochs=10, patience=1)
        result = train_loop(MedKAN(toy_config(), seed=0), splits, cfg, evaluate_fn=_constant())
        assert [r.epoch for r in result.history] == [1, 2]
        assert result.state.epochs_since_best == 1
        assert result.best.extra["epoch"] == 1

    def test_best_weights_restored(self, splits):
        model = MedKAN(toy_config(), seed=0)
        cfg = TrainConfig(lr=1e-2, batch_size=8, max_epochs=3, patience=5)
        result = train_loop(model, splits, cfg, evaluate_fn=_constant())
        current = model.state_dict()
        for name, array in result.best.tensors.items():
            np.testing.assert_array_equal(current[name], array)
        assert any(not np.array_equal(current[n], result.final.tensors[n]) for n in current)

    def test_metrics_csv_is_deterministic(self, splits, tmp_path, single_thread):
        cfg = TrainConfig(lr=1e-3, batch_size=8, max_epochs=2, patience=5, seed=4)
        tables = []
        for name in ("a.csv", "b.csv"):
            train_loop(MedKAN(toy_config(), seed=4), splits, cfg, metrics_path=tmp_path / name)
            rows = _read_rows(tmp_path / name)
            assert tuple(rows[0]) == METRICS_HEADER
            assert len(rows) == 3
            tables.append([row[:-1] for row in rows])
        assert tables[0] == tables[1]

    def test_resume_continues_epoch_count(self, splits):
        cfg = TrainConfig(lr=1e-3, batch_size=8, max_epochs=2, patience=5)
        model = MedKAN(toy_config(), seed=0)
        first = train_loop(model, splits, cfg, evaluate_fn=_constant())
        model.load_state_dict(first.final.tensors)
        longer = TrainConfig(lr=1e-3, batch_size=8, max_epochs=3, patience=5)
        resumed = train_loop(model, splits, longer, state=first.final.train_state, evaluate_fn=_constant())
        assert [r.epoch for r in resumed.history] == [3]
        assert resumed.state.step > first.state.step

    def test_empty_split(self, splits):
        empty = DatasetSplit(np.zeros((0, 1, 8, 8), dtype=np.float32), np.zeros(0), "val", 3)
        with pytest.raises(DataError):
            train_loop(MedKAN(toy_config()), {"train": splits["train"], "val": empty}, TrainConfig())

    def test_missing_split(self, splits):
        with pytest.raises(DataError):
            train_loop(MedKAN(toy_config()), {"train": splits["train"]}, TrainConfig())

    @pytest.mark.slow
    def test_training_reduces_loss(self, single_thread):
        train, val, test = synth_blobs(3, 40, 8, 8, seed=1)
        cfg = TrainConfig(lr=3e-3, batch_size=16, max_epochs=12, patience=12, seed=1)
        model = MedKAN(toy_config(), seed=1)
        result = train_loop(model, {"train": train, "val": val}, cfg)
        assert result.history[-1].train_loss < result.history[0].train_loss
        assert evaluate(model, test).acc > 1 / 3


def _prepared(splits, size):
    return {name: prepare_split(split, size) for name, split in zip(("train", "val", "test"), splits)}


class TestAcceptance:
    @pytest.mark.slow
    def test_overfits_64_samples(self, single_thread, tmp_path):
        # 16 of 23 samples per class land in train: 64 training images
        data = _prepared(synth_blobs(4, 23, 16, 16, seed=3), 16)
        assert len(data["train"]) == 64
        model_cfg = MedKANConfig(
            input_size=16,
            stages=[StageSpec(num_lik=1, num_gik=1, dim=32, groups=4, downsample=False)],
            num_classes=4,
        )
        cfg = TrainConfig(lr=3e-3, batch_size=16, max_epochs=200, patience=30, seed=3)
        runs = []
        for name in ("a.csv", "b.csv"):
            model = MedKAN(model_cfg, seed=3)
            train_loop(model, {"train": data["train"], "val": data["train"]}, cfg, metrics_path=tmp_path / name)
            runs.append([row[:-1] for row in _read_rows(tmp_path / name)])
            assert evaluate(model, data["train"]).acc == 1.0
        assert runs[0] == runs[1]

    @pytest.mark.slow
    def test_scaled_down_noisy_blobs(self, single_thread):
        data = _prepared(synth_blobs(4, 100, 28, 28, seed=5, noise=0.3), 28)
        model_cfg = MedKANConfig(
            input_size=28,
            stages=[
                StageSpec(num_lik=1, num_gik=0, dim=16, groups=4, downsample=False),
                StageSpec(num_lik=1, num_gik=1, dim=32, groups=4, downsample=True),
            ],
            num_classes=4,
        )
        cfg = TrainConfig(lr=2e-3, batch_size=32, max_epochs=50, patience=10, seed=5)
        model = MedKAN(model_cfg, seed=5)
        result = train_loop(model, data, cfg)
        assert max(r.val_acc for r in result.history) >= 0.95
        assert evaluate(model, data["val"]).acc >= 0.95

    @pytest.mark.parametrize("row", ABLATION_ROWS, ids=[r.name for r in ABLATION_ROWS])
    def test_ablation_rows_train_and_log(self, row, splits, tmp_path):
        model_cfg = ablation_config(toy_config(), row)
        cfg = TrainConfig(lr=1e-3, batch_size=8, max_epochs=3, patience=5, seed=0)
        metrics = tmp_path / "metrics.csv"
        result = train_loop(MedKAN(model_cfg, seed=0), splits, cfg, metrics_path=metrics)
        rows = _read_rows(metrics)
        assert tuple(rows[0]) == METRICS_HEADER
        assert [int(r[0]) for r in rows[1:]] == [1, 2, 3]
        assert all(np.isfinite(r.train_loss) and np.isfinite(r.val_loss) for r in result.history)


class TestEvaluation:
    def test_predict_logits_covers_split(self, splits):
        logits = predict_logits(MedKAN(toy_config(), seed=0), splits["test"], batch_size=2)
        assert logits.shape == (len(splits["test"]), 3)

    def test_batch_size_does_not_change_logits(self, splits):
        model = MedKAN(toy_config(), seed=0)
        small = predict_logits(model, splits["val"], batch_size=1)
        large = predict_logits(model, splits["val"], batch_size=64)
        np.testing.assert_allclose(small, large, atol=1e-6)

    def test_evaluate_report(self, splits):
        report = evaluate(MedKAN(toy_config(), seed=0), splits["val"])
        assert report.n == len(splits["val"])
        assert 0.0 <= report.acc <= 1.0


class TestRuns:
    def _run_config(self, runs):
        return RunConfig(
            model=toy_config(),
            train=TrainConfig(lr=1e-3, batch_size=8, max_epochs=2, patience=5),
            runs=runs,
        )

    def test_single_run_layout(self, splits, tmp_path):
        results = train_runs(self._run_config(1), splits, tmp_path)
        assert len(results) == 1
        for name in ("metrics.csv", "best.ckpt", "final.ckpt"):
            assert (tmp_path / name).is_file()
        assert not (tmp_path / "summary.csv").exists()

    def test_multi_run_summary(self, splits, tmp_path):
        results = train_runs(self._run_config(2), splits, tmp_path)
        for run in range(2):
            assert (tmp_path / f"run_{run}" / "best.ckpt").is_file()
        rows = _read_rows(tmp_path / "summary.csv")
        assert rows[0] == ["run", "seed", "best_epoch", "best_val_acc", "best_val_auc"]
        assert [row[0] for row in rows[1:]] == ["0", "1", "mean", "sd"]
        assert [row[1] for row in rows[1:3]] == ["0", "1"]
        accs = [r.best_record.val_acc for r in results]
        assert float(rows[3][3]) == pytest.approx(np.mean(accs))
        assert float(rows[4][3]) == pytest.approx(np.std(accs, ddof=1))

    def test_echo_reloads(self, tmp_path):
        cfg = self._run_config(3)
        write_echo(tmp_path / "config.echo.json", cfg)
        assert load_run_config(tmp_path / "config.echo.json").to_dict() == cfg.to_dict()
