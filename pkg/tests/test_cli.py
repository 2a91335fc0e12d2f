import csv

import pytest

from robustfield.cli import run_cli
from robustfield.scene import load_dataset

SMALL = ["--image-size", "20", "--n-train", "3", "--n-eval", "2"]
FAST = ["--steps", "4", "--resolution", "5", "--n-samples", "8", "--patches", "2", "--eval-interval", "2"]


def test_gen_hard_has_six_distractors(tmp_path):
    assert run_cli(["gen", "--difficulty", "hard", "--out", str(tmp_path / "d"), "--seed", "7"] + SMALL) == 0
    ds = load_dataset(tmp_path / "d")
    assert len(ds.spec.distractor_pool) == 6
    assert ds.manifest["seeds"]["scene"] == 7


def test_gen_is_idempotent(tmp_path):
    for name in ("a", "b"):
        assert run_cli(["gen", "--difficulty", "medium", "--out", str(tmp_path / name)] + SMALL) == 0
    for f in (tmp_path / "a").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_train_eval_render_hist(tmp_path):
    run_cli(["gen", "--difficulty", "medium", "--out", str(tmp_path / "d")] + SMALL)
    args = ["train", "--data", str(tmp_path / "d"), "--loss", "robust", "--mask-mode", "trim_only",
            "--dump-masks", "2", "--out", str(tmp_path / "run")] + FAST
    assert run_cli(args) == 0
    assert (tmp_path / "run" / "field.rfv").exists()
    assert (tmp_path / "run" / "metrics.csv").exists()
    assert any((tmp_path / "run" / "masks").iterdir())
    ckpt = str(tmp_path / "run" / "field.rfv")
    assert run_cli(["eval", "--checkpoint", ckpt, "--data", str(tmp_path / "d"), "--out", str(tmp_path / "ev")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ev" / "eval.csv")))
    assert [r["frame"] for r in rows] == ["3", "4", "mean"]
    assert run_cli(["render", "--checkpoint", ckpt, "--frames", "2", "--image-size", "12",
                    "--out", str(tmp_path / "r")]) == 0
    assert sorted(p.name for p in (tmp_path / "r").iterdir()) == ["render_0_4.ppm", "render_1_4.ppm"]
    assert run_cli(["hist", "--checkpoint", ckpt, "--data", str(tmp_path / "d"), "--bins", "8",
                    "--out", str(tmp_path / "h")]) == 0
    assert (tmp_path / "h" / "hist_distractor.csv").exists()


def test_sweep_rows_match_grid(tmp_path):
    args = ["sweep", "--axis", "trim_quantile", "--values", "0.3,0.5,0.7,0.9", "--out", str(tmp_path / "s"),
            "--difficulty", "hard"] + SMALL + FAST
    assert run_cli(args) == 0
    rows = list(csv.DictReader(open(tmp_path / "s" / "sweep.csv")))
    assert [r["value"] for r in rows] == ["0.3", "0.5", "0.7", "0.9"]
    assert all(r["eval_psnr"] for r in rows)


@pytest.mark.parametrize("axis,values,n", [("clutter_fraction", "0,1", 2), ("neighborhood", "16:8,12", 2),
                                            ("loss", "l2,oracle", 2), ("mask_mode", "trim_only,full", 2)])
def test_sweep_other_axes(tmp_path, axis, values, n):
    assert run_cli(["sweep", "--axis", axis, "--values", values, "--out", str(tmp_path)] + SMALL + FAST) == 0
    assert len(list(csv.DictReader(open(tmp_path / "sweep.csv")))) == n


def test_usage_errors_exit_2(tmp_path, capsys):
    assert run_cli([]) == 2
    assert run_cli(["gen", "--out", str(tmp_path), "--bogus"]) == 2
    assert run_cli(["gen", "--difficulty", "extreme", "--out", str(tmp_path)]) == 2
    assert run_cli(["eval", "--checkpoint", str(tmp_path / "nope.rfv"), "--data", str(tmp_path / "nope"),
                    "--out", str(tmp_path)]) == 2
    assert run_cli(["sweep", "--axis", "colour", "--values", "1", "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_runtime_errors_exit_1(tmp_path):
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "field.rfv").write_bytes(b"garbage")
    assert run_cli(["render", "--checkpoint", str(bad / "field.rfv"), "--out", str(tmp_path / "r")]) == 1
    assert run_cli(["gen", "--clutter-fraction", "2.0", "--out", str(tmp_path / "g")]) == 1


def test_parallel_sweep_matches_sequential(tmp_path):
    base = ["sweep", "--axis", "mask_mode", "--values", "trim_only,full"] + SMALL + FAST
    assert run_cli(base + ["--out", str(tmp_path / "seq")]) == 0
    assert run_cli(base + ["--jobs", "2", "--out", str(tmp_path / "par")]) == 0
    strip = lambda p: [{k: v for k, v in r.items() if k != "seconds"} for r in csv.DictReader(open(p))]
    assert strip(tmp_path / "seq" / "sweep.csv") == strip(tmp_path / "par" / "sweep.csv")
