"""
Tests for the bconv command line.
"""

import csv
import os
import shutil
import subprocess
import sys
import tempfile

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from bconv import __version__
from bconv import tensor as T
from bconv.cells import CellState, cell_forward
from bconv.checkpoint import load_checkpoint
from bconv.config import RunConfig, load_config
from bconv.data import BatchPlan, batches
from bconv.main import (
    EXIT_CHECKPOINT,
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_GRADCHECK,
    EXIT_OK,
    build_parser,
    load_datasets,
    main,
)
from bconv.network import build_network


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_parser_aliases():
    """Test --checkpoint and --init name the same option."""
    parser = build_parser()
    assert parser.parse_args(["train", "--checkpoint", "a.bcnv"]).init == "a.bcnv"
    assert parser.parse_args(["eval", "--init", "a.bcnv"]).init == "a.bcnv"
    assert parser.parse_args(["inspect-state"]).mode == "train"


def test_version_flag(capsys):
    """Test --version prints the package version and exits cleanly."""
    with pytest.raises(SystemExit) as excinfo:
        main(["--version"])
    assert excinfo.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_missing_required_option():
    """Test argparse rejects eval without a checkpoint."""
    with pytest.raises(SystemExit) as excinfo:
        main(["eval"])
    assert excinfo.value.code == 2


def test_module_execution():
    """Test that the package can be executed as a module."""
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    result = subprocess.run(
        [sys.executable, "-m", "bconv", "--version"],
        capture_output=True,
        text=True,
        cwd=root,
    )
    assert result.returncode == 0
    assert __version__ in result.stdout


def test_synthetic_eval_split_uses_next_seed():
    """Test the held-out synthetic split is drawn with its own seed."""
    config = RunConfig(
        synth_per_class=3, synth_eval_per_class=2, synth_resolution=8, seed=4
    )
    train, held_out = load_datasets(config)
    assert len(train) == 12
    assert len(held_out) == 8
    assert not (train.images[:2] == held_out.images[:2]).all()
    assert load_datasets(config.with_overrides(synth_eval_per_class=0))[1] is None


@pytest.mark.integration
class TestCommands:
    """Running each command end to end on a tiny synthetic setup."""

    def setup_method(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def _config(self, text, name="run.cfg"):
        path = os.path.join(self.temp_dir, name)
        with open(path, "w") as f:
            f.write(text)
        return path

    def _out(self, name):
        return os.path.join(self.temp_dir, name)

    def _run(self, command, config_path, out, *extra):
        return main([command, "--config", config_path, "--out", self._out(out), *extra])

    def _train(self, config_path, name="train", extra=()):
        assert self._run("train", config_path, name, *extra) == EXIT_OK
        return os.path.join(self._out(name), "checkpoint.bcnv")

    def test_train_writes_checkpoint_and_metrics(self, small_config_text, capsys):
        """Test train creates the output directory and its two files."""
        checkpoint = self._train(self._config(small_config_text))
        assert load_checkpoint(checkpoint).kind == "ptl"

        rows = read_csv(os.path.join(self._out("train"), "metrics.csv"))
        assert rows[0] == ["epoch", "loss", "train_acc", "eval_acc", "lr", "seconds"]
        assert [row[0] for row in rows[1:]] == ["0", "1"]
        assert all(row[5] == "0.000000" for row in rows[1:])
        assert "final loss" in capsys.readouterr().out

    def test_training_is_reproducible(self, small_config_text):
        """Test two runs with one seed produce identical checkpoints."""
        config = self._config(small_config_text)
        first = self._train(config, "a")
        second = self._train(config, "b")
        with open(first, "rb") as f, open(second, "rb") as g:
            assert f.read() == g.read()

    def test_zero_epochs_saves_the_initial_network(self, small_config_text, capsys):
        """Test epochs = 0 writes the seeded initialization and a header-only CSV."""
        text = small_config_text.replace("epochs = 2", "epochs = 0")
        config_path = self._config(text)
        checkpoint = self._train(config_path)
        rows = read_csv(os.path.join(self._out("train"), "metrics.csv"))
        assert rows == [["epoch", "loss", "train_acc", "eval_acc", "lr", "seconds"]]
        assert "final loss" not in capsys.readouterr().out

        config = load_config(config_path)
        train, _ = load_datasets(config)
        net_config = config.network_config(
            train.class_count, train.resolution, train.channels
        )
        network = build_network(net_config, np.random.default_rng(config.seed))
        tensors = load_checkpoint(checkpoint).tensors
        assert list(tensors) == [name for name, _ in network.named_parameters()]
        for name, tensor in network.named_parameters():
            assert_array_equal(tensors[name], tensor.data)

    def test_chained_fine_tuning_is_reproducible(self, small_config_text):
        """Test training on set A then fine-tuning on set B repeats byte for byte."""
        first = self._config(small_config_text, "a.cfg")
        second = self._config(small_config_text + "synth_variant = 1\n", "b.cfg")
        outputs = []
        for run in ("one", "two"):
            checkpoint = self._train(first, f"{run}_a")
            self._train(second, f"{run}_b", extra=["--init", checkpoint])
            files = []
            for stage in ("a", "b"):
                folder = self._out(f"{run}_{stage}")
                for name in ("metrics.csv", "checkpoint.bcnv"):
                    with open(os.path.join(folder, name), "rb") as f:
                        files.append(f.read())
            outputs.append(files)
        assert outputs[0] == outputs[1]
        assert outputs[0][0] != outputs[0][2]

    def test_train_from_checkpoint(self, small_config_text):
        """Test --init continues from a saved network."""
        config = self._config(small_config_text)
        first = self._train(config, "first")
        second = self._train(config, "second", extra=["--init", first])
        names = load_checkpoint(second).tensors.keys()
        assert names == load_checkpoint(first).tensors.keys()

    def test_eval_reports_per_class(self, small_config_text, capsys):
        """Test eval writes one row per class and prints the accuracy."""
        config = self._config(small_config_text)
        checkpoint = self._train(config)
        capsys.readouterr()
        assert self._run("eval", config, "eval", "--checkpoint", checkpoint) == EXIT_OK
        rows = read_csv(os.path.join(self._out("eval"), "eval_per_class.csv"))
        assert rows[0] == ["class", "correct", "total", "accuracy"]
        assert [row[0] for row in rows[1:]] == ["0", "1", "2"]
        assert sum(int(row[2]) for row in rows[1:]) == 12
        assert capsys.readouterr().out.startswith("accuracy ")

    def test_eval_on_mismatched_data(self, small_config_text):
        """Test evaluating on data with another class count is a data error."""
        checkpoint = self._train(self._config(small_config_text))
        text = small_config_text.replace("synth_classes = 3", "synth_classes = 4")
        other = self._config(text, "other.cfg")
        assert self._run("eval", other, "e", "--checkpoint", checkpoint) == EXIT_DATA

    def test_distill_sweep_writes_one_student_per_lambda(self, small_config_text):
        """Test a lambda sweep names its outputs after each weight."""
        teacher = self._train(self._config(small_config_text))
        text = small_config_text + "distill_lambda = 0, 0.5\n"
        config = self._config(text, "distill.cfg")
        assert self._run("distill", config, "d", "--teacher", teacher) == EXIT_OK
        names = sorted(os.listdir(self._out("d")))
        assert names == [
            "metrics_lambda_0.5.csv",
            "metrics_lambda_0.csv",
            "student_lambda_0.5.bcnv",
            "student_lambda_0.bcnv",
        ]
        student = os.path.join(self._out("d"), "student_lambda_0.bcnv")
        assert load_checkpoint(student).kind == "backbone"

    def test_distill_single_lambda(self, small_config_text):
        """Test one lambda writes the plain output names."""
        teacher = self._train(self._config(small_config_text))
        text = small_config_text + "distill_lambda = 0.8\n"
        config = self._config(text, "distill.cfg")
        assert self._run("distill", config, "d", "--teacher", teacher) == EXIT_OK
        names = sorted(os.listdir(self._out("d")))
        assert names == ["checkpoint.bcnv", "metrics.csv"]

    def test_distill_needs_a_ptl_teacher(self, small_config_text, capsys):
        """Test a backbone checkpoint is refused as a teacher."""
        backbone = self._train(self._config(small_config_text + "cells = false\n"))
        config = self._config(small_config_text, "distill.cfg")
        code = self._run("distill", config, "d", "--teacher", backbone)
        assert code == EXIT_CHECKPOINT
        assert "must be a PTL network" in capsys.readouterr().err

    def test_distill_feature_mismatch(self, small_config_text):
        """Test the student's feature extent must equal the teacher's."""
        teacher = self._train(self._config(small_config_text))
        text = small_config_text.replace(
            "feature_channels = 12", "feature_channels = 10"
        )
        config = self._config(text, "d.cfg")
        assert self._run("distill", config, "d", "--teacher", teacher) == EXIT_CONFIG

    def test_gradcheck_command(self, small_config_text):
        """Test the gradient check battery passes and writes its report."""
        config = self._config(small_config_text)
        assert self._run("gradcheck", config, "g") == EXIT_OK
        rows = read_csv(os.path.join(self._out("g"), "gradcheck.csv"))
        assert rows[0] == ["check", "probes", "max_rel_error", "tolerance", "result"]
        assert {row[4] for row in rows[1:]} == {"pass"}
        assert "cell_v1" in {row[0] for row in rows[1:]}

    def test_gradcheck_failure_exit_code(self, small_config_text, monkeypatch, capsys):
        """Test a sigmoid derivative off by one percent fails the battery."""
        backward = T.Sigmoid.backward

        def scaled_backward(ctx, grad):
            return tuple(1.01 * g for g in backward(ctx, grad))

        monkeypatch.setattr(T.Sigmoid, "backward", staticmethod(scaled_backward))
        config = self._config(small_config_text)
        assert self._run("gradcheck", config, "g") == EXIT_GRADCHECK
        report = read_csv(os.path.join(self._out("g"), "gradcheck.csv"))
        rows = {row[0]: row for row in report[1:]}
        assert rows["sigmoid"][4] == "fail"
        assert rows["cell_v1"][4] == "fail"
        assert rows["tanh"][4] == "pass"
        assert "gradient check failed: " in capsys.readouterr().err

    def test_inspect_state_rows(self, small_config_text):
        """Test one row per cell for each inspected batch in train mode."""
        config = self._config(small_config_text)
        assert self._run("inspect-state", config, "s") == EXIT_OK
        rows = read_csv(os.path.join(self._out("s"), "state_summary.csv"))
        assert rows[0] == ["batch", "cell", "c_norm", "c_mean", "h_norm", "h_mean"]
        assert len(rows) == 1 + 3 * 4
        assert [row[0] for row in rows[1:]] == ["0"] * 4 + ["1"] * 4 + ["2"] * 4
        assert all(float(row[2]) > 0 for row in rows[1:])
        assert all(row[4] == "" for row in rows[1:])

    def test_inspect_state_first_batch_is_one_step_from_zero(self, small_config_text):
        """Test batch-0 norms equal a single cell update of a zero state."""
        config_path = self._config(small_config_text)
        assert self._run("inspect-state", config_path, "s") == EXIT_OK
        rows = read_csv(os.path.join(self._out("s"), "state_summary.csv"))[1:5]

        config = load_config(config_path)
        train, _ = load_datasets(config)
        net_config = config.network_config(
            train.class_count, train.resolution, train.channels
        )
        network = build_network(net_config, np.random.default_rng(config.seed))
        plan = BatchPlan(config.seed, config.batch_size)
        images, _ = next(batches(train, plan, 0))

        def fresh_step(x, params):
            zero = CellState.for_params(params, x.shape[2], x.shape[3])
            y, state = cell_forward(x, zero, params)
            return y, float(np.linalg.norm(state.c.data))

        y, norm = fresh_step(network.stem_fuse(images), network.stem_cell)
        expected = [norm]
        x = images
        for pair in network.pairs:
            x = pair.block(x)
            fused = pair.fuse(T.concat_channels(x, pair.downsample_y(y)))
            y, norm = fresh_step(fused, pair.cell)
            expected.append(norm)

        assert [row[1] for row in rows] == network.cell_names
        for row, norm in zip(rows, expected):
            assert row[0] == "0"
            assert float(row[2]) == pytest.approx(norm, rel=1e-6)

    def test_inspect_state_eval_mode_keeps_zero_states(self, small_config_text):
        """Test eval-mode inspection never writes the states."""
        config = self._config(small_config_text)
        checkpoint = self._train(config)
        code = self._run(
            "inspect-state", config, "s", "--checkpoint", checkpoint, "--mode", "eval"
        )
        assert code == EXIT_OK
        rows = read_csv(os.path.join(self._out("s"), "state_summary.csv"))
        assert all(float(row[2]) == 0.0 for row in rows[1:])

    def test_inspect_state_needs_cells(self, small_config_text):
        """Test a cell-less network cannot be inspected."""
        config = self._config(small_config_text + "cells = false\n")
        assert self._run("inspect-state", config, "s") == EXIT_CONFIG

    def test_bad_config_exit_code(self, capsys):
        """Test an unknown key exits with the config code and names the key."""
        config = self._config("colour = blue\n")
        assert self._run("train", config, "t") == EXIT_CONFIG
        assert "bconv train: colour: unknown key" in capsys.readouterr().err

    def test_missing_checkpoint_exit_code(self, small_config_text):
        """Test a missing checkpoint exits with the checkpoint code."""
        config = self._config(small_config_text)
        missing = self._out("none.bcnv")
        code = self._run("eval", config, "e", "--checkpoint", missing)
        assert code == EXIT_CHECKPOINT

    def test_missing_cifar_file_exit_code(self):
        """Test an unreadable dataset exits with the data code."""
        absent = self._out("absent.bin")
        config = self._config(f"dataset = cifar\ncifar_train = {absent}\n")
        assert self._run("train", config, "t") == EXIT_DATA
