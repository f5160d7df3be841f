import numpy as np
import pytest

from conftest import MNIST_DIR, needs_mnist
from fernnet import convref, fern
from fernnet.cli import main
from fernnet.fern import FernLayer, builtin_pattern
from fernnet.nn import build_lenet5, save_checkpoint
from fernnet.train import RunConfig, load_config, parse_config


def _train_args(data_dir, out, *extra):
    return ["train", "--data-dir", str(data_dir), "--out", str(out), "--epochs", "1",
            "--steps-per-epoch", "2", "--batch", "20", *extra]


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--model", "nope"])
    assert info.value.code == 1


def test_missing_data_exit_code(tmp_path):
    assert main(_train_args(tmp_path / "none", tmp_path / "run")) == 2


def test_bad_batch_exit_code(toy_data_dir, tmp_path):
    assert main(_train_args(toy_data_dir, tmp_path / "run", "--batch", "25")) == 1


def test_pattern_file_with_conv_rejected(toy_data_dir, tmp_path):
    pf = tmp_path / "p.txt"
    pf.write_text("-1,0;1,0\n")
    assert main(_train_args(toy_data_dir, tmp_path / "run", "--model", "conv",
                            "--pattern-file", str(pf))) == 1


def test_train_then_eval(toy_data_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(_train_args(toy_data_dir, out, "--model", "TI2", "--noise", "0")) == 0
    assert (out / "metrics.csv").read_text().startswith("epoch,loss,test_acc\n")
    assert (out / "config.txt").exists() and (out / "last.ckpt").exists()
    assert main(["eval", str(out / "best.ckpt"), "--data-dir", str(toy_data_dir)]) == 0
    assert "accuracy" in capsys.readouterr().out


def test_custom_pattern_file_trains(toy_data_dir, tmp_path):
    pf = tmp_path / "diag.txt"
    pf.write_text("# diagonals\n-1,-1; 1,1; -1,1; 1,-1\n0,2; 2,0\n")
    assert main(_train_args(toy_data_dir, tmp_path / "run", "--model", "TI1",
                            "--pattern-file", str(pf))) == 0


def test_memorized_toy_set_scores_one(toy_data_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--data-dir", str(toy_data_dir), "--out", str(out), "--model", "conv",
                 "--epochs", "3", "--steps-per-epoch", "20", "--batch", "100",
                 "--noise", "0"]) == 0
    capsys.readouterr()
    assert main(["eval", str(out / "last.ckpt"), "--data-dir", str(toy_data_dir)]) == 0
    assert "accuracy 1.0000 (100/100)" in capsys.readouterr().out


def test_eval_empty_split(tmp_path):
    d = tmp_path / "empty"
    d.mkdir()
    from fernnet.data import write_idx
    write_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte",
              np.zeros((0, 1, 28, 28), dtype=np.float32), np.zeros(0, dtype=np.int64))
    save_checkpoint(build_lenet5("TI1"), tmp_path / "m.ckpt")
    assert main(["eval", str(tmp_path / "m.ckpt"), "--data-dir", str(d)]) == 2


def test_eval_bad_checkpoint(tmp_path, toy_data_dir):
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    assert main(["eval", str(tmp_path / "junk.ckpt"), "--data-dir", str(toy_data_dir)]) == 2


@needs_mnist
def test_untrained_model_is_near_chance(tmp_path, capsys):
    save_checkpoint(build_lenet5("TI2", np.random.default_rng(0)), tmp_path / "m.ckpt")
    assert main(["eval", str(tmp_path / "m.ckpt"), "--data-dir", str(MNIST_DIR)]) == 0
    acc = float(capsys.readouterr().out.split()[1])
    assert abs(acc - 0.10) <= 0.05


def test_bench_zero_iterations():
    assert main(["bench", "--iterations", "0"]) == 1


def test_bench_reports_matching_counters(capsys):
    assert main(["bench", "--model", "conv", "--model", "TI2", "--iterations", "3",
                 "--warmup", "1"]) == 0
    report = capsys.readouterr().out
    assert "MISMATCH" not in report and "speedup vs conv" in report


def test_bench_bad_input_shape():
    with pytest.raises(SystemExit) as info:
        main(["bench", "--input", "28x28"])
    assert info.value.code == 1


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--instances", "1"]) == 0
    assert "FAIL" not in capsys.readouterr().out


# ---------------------------------------------------------------- config

def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk run\nmodel = TI3\nlr=0.002\nheuristic-bp = off\n")
    cfg = load_config(path, lr=0.005)
    assert (cfg.model, cfg.lr, cfg.heuristic_bp) == ("TI3", 0.005, False)


def test_config_dump_round_trip():
    cfg = RunConfig(model="TI2", lr=3e-4, heuristic_bp=False)
    assert RunConfig().updated(**parse_config(cfg.dumps())) == cfg


def test_long_schedule():
    cfg = load_config(preset="long")
    assert [cfg.learning_rate(e) for e in (0, 99, 100, 200, 300, 1199)] == \
        pytest.approx([1e-2, 1e-2, 1e-3, 1e-4, 1e-4, 1e-4])


# ---------------------------------------------------------------- threading

def test_parallel_builds_are_bit_identical():
    rng = np.random.default_rng(4)
    ps = builtin_pattern("TI3")
    layer = FernLayer.create(3, 5, ps, rng)
    x = rng.standard_normal((40, 3, 8, 8)).astype(np.float32)
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))
    dy, dx, bs, ds = ps.flat()
    outs, idxs = [], []
    for build in (fern._forward.serial, fern._forward.parallel):
        out = np.empty((40, 5, 8, 8), np.float32)
        idx = np.empty((40, 3, ps.width, 8, 8), np.int32)
        build(xp, dy, dx, bs, ds, layer.table, layer.bias, 2, out, idx,
              np.zeros((40, 4), np.int64))
        outs.append(out)
        idxs.append(idx)
    np.testing.assert_array_equal(*outs)
    err = rng.standard_normal((40, 8, 8, 5)).astype(np.float32)
    grads = []
    for build in (fern._backward.serial, fern._backward.parallel):
        gin = np.zeros(xp.shape, np.float32)
        gt = np.zeros((3,) + layer.table.shape, np.float32)
        gb = np.zeros((3, 5), np.float32)
        build(xp, idxs[0], err, dy, dx, bs, ds, layer.table, 2, True, True, 16, gin, gt, gb)
        grads.append((gin, gt, gb))
    for a, b in zip(*grads):
        np.testing.assert_array_equal(a, b)

    conv = convref.ConvLayer.create(3, 4, 5, 5, rng)
    cerr = rng.standard_normal((40, 4, 8, 8)).astype(np.float32)
    results = []
    for build in (convref._backward.serial, convref._backward.parallel):
        gin = np.zeros(xp.shape, np.float32)
        gw = np.zeros((3,) + conv.weights.shape, np.float32)
        gb = np.zeros((3, 4), np.float32)
        build(xp, conv.weights, cerr, True, 16, gin, gw, gb)
        results.append((gin, gw, gb))
    for a, b in zip(*results):
        np.testing.assert_array_equal(a, b)
