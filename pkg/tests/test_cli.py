import filecmp
import json
import subprocess
import sys

import pytest

from dynsplat import pipeline
from dynsplat.cli import UsageError, main, read_overrides


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "d"
    assert main(["synth", "--out", str(d), "--seed", "7", "--frames", "4"]) == 0
    return d


@pytest.fixture(scope="module")
def run_dir(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "o"
    code = main(["run", "--dataset", str(dataset), "--mode", "gt", "--deterministic", "--seed", "1", "--out", str(out),
                 "--iters", "2", "--leaf-size", "0.25"])
    assert code == 0
    return out


def test_synth_twice_is_identical(dataset, tmp_path):
    again = tmp_path / "d2"
    assert main(["synth", "--out", str(again), "--seed", "7", "--frames", "4"]) == 0
    cmp = filecmp.dircmp(dataset, again)
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in cmp.subdirs.values():
        assert not sub.diff_files and not sub.left_only and not sub.right_only


def test_run_writes_outputs(run_dir, capsys):
    for name in ("trajectory.txt", "map.upmap", "metrics.csv", "report.json", "trajectory.png", "metrics.png"):
        assert (run_dir / name).is_file(), name
    report = json.loads((run_dir / "report.json").read_text())
    assert report["frames"] == 4 and report["ate_cm"] == 0.0
    assert {"anchors", "gaussians", "mean_masked_psnr", "timings_s"} <= report.keys()
    assert len((run_dir / "trajectory.txt").read_text().splitlines()) == 4


def test_eval_identical_trajectories(run_dir, capsys):
    traj = str(run_dir / "trajectory.txt")
    assert main(["eval", "--est", traj, "--gt", traj]) == 0
    assert "ATE 0.000 cm" in capsys.readouterr().out


def test_render_then_eval_images(run_dir, dataset, tmp_path, capsys):
    traj = str(run_dir / "trajectory.txt")
    views = tmp_path / "views"
    assert main(["render", "--map", str(run_dir / "map.upmap"), "--est", traj, "--dataset", str(dataset),
                 "--out", str(views)]) == 0
    assert len(list((views / "rgb").glob("*.png"))) == 4
    capsys.readouterr()
    assert main(["eval", "--est", traj, "--gt", str(dataset / "groundtruth.txt"), "--dataset", str(dataset),
                 "--renders", str(views)]) == 0
    out = capsys.readouterr().out
    assert "ATE 0.000 cm" in out and "PSNR" in out


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["run", "--bogus"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 1
    assert main(["run", "--out", str(tmp_path / "o")]) == 1  # tum format needs a dataset


def test_data_errors_exit_2(tmp_path, capsys):
    assert main(["run", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert main(["eval", "--est", str(tmp_path / "none.txt"), "--gt", str(tmp_path / "none.txt")]) == 2
    line = tmp_path / "line.txt"
    line.write_text("".join(f"{i}.0 {i} 0 0 0 0 0 1\n" for i in range(5)))
    assert main(["eval", "--est", str(line), "--gt", str(line)]) == 2
    assert "rank deficient" in capsys.readouterr().err


def test_mapper_failure_exits_3(dataset, tmp_path, monkeypatch, capsys):
    def broken(kf, state):
        raise RuntimeError("boom")

    monkeypatch.setattr(pipeline, "mapper_step", broken)
    out = tmp_path / "o"
    assert main(["run", "--dataset", str(dataset), "--deterministic", "--out", str(out), "--no-plots"]) == 3
    assert (out / "trajectory.txt").is_file()
    assert "boom" in capsys.readouterr().err


def test_config_overrides(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# tuning\niters = 7\nleaf-size=0.3\nprune = off\nlr_feature=0.05\n")
    assert read_overrides(cfg) == {"n_iters": 7, "leaf_size": 0.3, "prune": False, "lr_feature": 0.05}
    cfg.write_text("speed=11\n")
    with pytest.raises(UsageError, match="unknown setting"):
        read_overrides(cfg)
    cfg.write_text("iters=many\n")
    with pytest.raises(UsageError):
        read_overrides(cfg)


def test_config_file_applies_to_run(dataset, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("iters=1\nprune=false\n")
    out = tmp_path / "o"
    assert main(["run", "--dataset", str(dataset), "--deterministic", "--out", str(out), "--no-plots",
                 "--config", str(cfg)]) == 0
    assert json.loads((out / "report.json").read_text())["anchors_removed"] == 0


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "dynsplat.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "selftest" in r.stdout


def test_selftest_quick(capsys):
    assert main(["selftest", "--quick"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("[PASS]") for line in lines)
