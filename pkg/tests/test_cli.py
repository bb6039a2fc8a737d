import json
import subprocess
import sys

import numpy as np
import pytest

from rsen import basenet, cli, data

SMALL = ["--set", "w=4", "--set", "p=3", "--set", "labeled_batch=8", "--set", "unlabeled_batch=16",
         "--set", "m=2", "--set", "n_per_class=4"]


@pytest.fixture()
def scene(tmp_path):
    prefix = tmp_path / "scene"
    assert cli.main(["synth", "--rows", "16", "--cols", "16", "--bands", "6", "--k", "3",
                     "--seed", "1", "--out", str(prefix)]) == 0
    return tmp_path / "scene.hsc", tmp_path / "scene.labels"


def _train(tmp_path, scene, name, *extra):
    out = tmp_path / name
    code = cli.main(["train", "--cube", str(scene[0]), "--labels", str(scene[1]), "--out", str(out),
                     "--epochs", "2", "--unlabeled", "40", *SMALL, *extra])
    return code, out


def test_synth_round_trip_and_determinism(tmp_path, scene):
    cube = data.load_cube(scene[0])
    labels = data.load_labels(scene[1])
    assert (cube.rows, cube.cols, cube.bands) == (16, 16, 6) and set(np.unique(labels)) == {1, 2, 3}
    assert cli.main(["synth", "--rows", "16", "--cols", "16", "--bands", "6", "--k", "3",
                     "--seed", "1", "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again.hsc").read_bytes() == scene[0].read_bytes()
    assert (tmp_path / "again.labels").read_bytes() == scene[1].read_bytes()


def test_synth_bad_k_exit_2(tmp_path, capsys):
    assert cli.main(["synth", "--k", "1", "--out", str(tmp_path / "x")]) == 2
    assert "error" in capsys.readouterr().err


def test_train_writes_outputs_and_is_reproducible(tmp_path, scene):
    code, a = _train(tmp_path, scene, "a")
    assert code == 0
    for name in ("checkpoint.rsen", "history.csv", "metrics.csv", "config.resolved"):
        assert (a / name).is_file()
    _, b = _train(tmp_path, scene, "b")
    for name in ("checkpoint.rsen", "history.csv", "metrics.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    resolved = (a / "config.resolved").read_text()
    for key in cli.default_run_config():
        assert f"\n{key} = " in "\n" + resolved
    assert "epochs = 2" in resolved and "alpha = 0.95" in resolved


def test_resolved_config_recreates_run(tmp_path, scene):
    _, a = _train(tmp_path, scene, "a")
    cfg_path = tmp_path / "rerun.cfg"
    cfg_path.write_text((a / "config.resolved").read_text().replace(f"out = {a}", f"out = {tmp_path / 'c'}"))
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    assert (a / "checkpoint.rsen").read_bytes() == (tmp_path / "c" / "checkpoint.rsen").read_bytes()


def test_train_zero_epochs_checkpoint_is_init(tmp_path, scene):
    out = tmp_path / "z"
    assert cli.main(["train", "--cube", str(scene[0]), "--labels", str(scene[1]), "--out", str(out),
                     "--epochs", "0", *SMALL, "--seed", "7"]) == 0
    dims, student, teacher, _ = basenet.load_checkpoint(out / "checkpoint.rsen")
    init = basenet.init_params(7, dims.n, dims.p, dims.w, dims.k)
    assert all(np.array_equal(student[n], init[n]) and np.array_equal(teacher[n], init[n])
               for n in basenet.PARAM_NAMES)
    assert (out / "metrics.csv").read_text().startswith("run,seed,OA")


def test_train_ablation_flags(tmp_path, scene):
    code, out = _train(tmp_path, scene, "sup", "--unlabeled", "0")
    assert code == 0
    rows = (out / "history.csv").read_text().splitlines()[1:]
    assert all(r.split(",")[2] == "0.0" for r in rows)
    code, out = _train(tmp_path, scene, "nof", "--no-filter")
    assert code == 0
    rows = (out / "history.csv").read_text().splitlines()[1:]
    assert {r.split(",")[3] for r in rows} == {"16"}


def test_train_repetitions(tmp_path, scene):
    code, out = _train(tmp_path, scene, "rep", "--repetitions", "2", "--epochs", "1")
    assert code == 0
    assert (out / "checkpoint_rep0.rsen").is_file() and (out / "history_rep1.csv").is_file()
    lines = (out / "metrics.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in lines[1:]] == ["0", "1", "mean", "std"]


@pytest.mark.parametrize("bad", [["--set", "nonsense=1"], ["--set", "alpha=high"], ["--set", "alpha=2"],
                                 ["--set", "no_equals_sign"]])
def test_train_config_errors_exit_2(tmp_path, scene, bad):
    code, _ = _train(tmp_path, scene, "bad", *bad)
    assert code == 2


def test_config_file_comments_and_unknown_keys(tmp_path):
    good = tmp_path / "good.cfg"
    good.write_text("# comment\nepochs = 3  # trailing\n\nuse_filter = false\nfixed_q = none\n")
    cfg = cli.load_run_config(good, ["epochs = 4"])
    assert cfg["epochs"] == 4 and cfg["use_filter"] is False and cfg["fixed_q"] is None
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochz = 3\n")
    with pytest.raises(cli.ConfigError, match="unknown key"):
        cli.load_run_config(bad)


def test_missing_data_exit_2(tmp_path):
    assert cli.main(["train", "--cube", str(tmp_path / "nope.hsc"), "--labels", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "o")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(tmp_path, scene):
    code, out = _train(tmp_path, scene, "div", "--set", "learning_rate=1e200")
    assert code == 3
    snap = json.loads((out / "divergence.json").read_text())
    assert snap["iteration"] >= 0 and snap["repetition"] == 0 and len(snap["labeled_batch"]) == 8


def test_non_finite_cube_rejected_exit_2(tmp_path, scene):
    values = data.load_cube(scene[0]).values.copy()
    values[3, 3, :] = np.inf
    data.save_cube(data.HsiCube(values), tmp_path / "inf.hsc")
    code, _ = _train(tmp_path, (tmp_path / "inf.hsc", scene[1]), "inf")
    assert code == 2


def test_eval_and_map(tmp_path, scene):
    code, out = _train(tmp_path, scene, "t", "--epochs", "6")
    ckpt = out / "checkpoint.rsen"
    metrics = tmp_path / "eval.csv"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--cube", str(scene[0]), "--labels", str(scene[1]),
                     "--out", str(metrics)]) == 0
    oa = float(metrics.read_text().splitlines()[1].split(",")[2])
    assert oa > 1 / 3
    m1, m2 = tmp_path / "m1.ppm", tmp_path / "m2.ppm"
    for m in (m1, m2):
        assert cli.main(["map", "--checkpoint", str(ckpt), "--cube", str(scene[0]), "--out", str(m)]) == 0
    assert m1.read_bytes() == m2.read_bytes() and m1.read_bytes().startswith(b"P6\n16 16\n255\n")


def test_eval_wrong_band_count_exit_2(tmp_path, scene, capsys):
    _, out = _train(tmp_path, scene, "t", "--epochs", "0")
    assert cli.main(["synth", "--rows", "16", "--cols", "16", "--bands", "7", "--k", "3",
                     "--out", str(tmp_path / "other")]) == 0
    code = cli.main(["eval", "--checkpoint", str(out / "checkpoint.rsen"), "--cube", str(tmp_path / "other.hsc"),
                     "--labels", str(tmp_path / "other.labels")])
    assert code == 2
    assert "expects 6 bands but the cube has 7" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck", "--seeds", "1"]) == 0
    text = capsys.readouterr().out
    assert all(name in text for name in basenet.PARAM_NAMES) and "ok" in text
    assert cli.main(["gradcheck", "--seeds", "1", "--corrupt-gradient"]) == 4


def test_thread_cap_does_not_change_results(tmp_path, scene, monkeypatch):
    _, a = _train(tmp_path, scene, "a")
    monkeypatch.setenv("RSEN_THREADS", "1")
    _, b = _train(tmp_path, scene, "b")
    assert (a / "checkpoint.rsen").read_bytes() == (b / "checkpoint.rsen").read_bytes()
    monkeypatch.setenv("RSEN_THREADS", "many")
    assert cli.main(["gradcheck", "--seeds", "1"]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rsen.cli", "synth", "--k", "1", "--out", str(tmp_path / "x")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
