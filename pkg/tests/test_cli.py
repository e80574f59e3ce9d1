import os
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from segcalib.cli import build_parser, main
from segcalib.io import read_cloud, read_label_image, read_report

DEMO = Path(__file__).resolve().parents[1] / "demo"


def run_cli(*args, cwd):
    env = dict(os.environ, SEGCALIB_LOG="WARNING")
    return subprocess.run([sys.executable, "-m", "segcalib", *map(str, args)], cwd=cwd,
                          capture_output=True, text=True, env=env)


def pipeline(workdir):
    """synth -> render -> calibrate -> reconstruct -> evaluate in ``workdir``."""
    w = Path(workdir)
    w.mkdir(parents=True, exist_ok=True)
    shutil.copy(DEMO / "run.cfg", w / "run.cfg")
    steps = [
        ("synth", "--spec", "default", "--density", "5", "--seed", "3", "--out", "cloud.ply",
         "--write-spec", "scene.json", "--scans", "scans", "--num-scans", "3",
         "--scan-range", "15"),
        ("render", "--cloud", "cloud.ply", "--pose", "-11 -6 6 35 -15",
         "--intrinsics", "80 80 80 50 160 100", "--lambda", "20", "--out", "target.pgm",
         "--png", "target.png"),
        ("calibrate", "--config", "run.cfg", "--out", "result.txt"),
        ("reconstruct", "--scans", "scans", "--poses", "scans/poses.txt", "--out", "merged.ply",
         "--voxel", "0.2"),
        ("evaluate", "--scene-spec", "scene.json", "--config", "run.cfg", "--trials", "2",
         "--keep", "1", "--out", "eval.txt"),
    ]
    for step in steps:
        proc = run_cli(*step, cwd=w)
        assert proc.returncode == 0, (step, proc.stderr)
    return w


def output_bytes(w):
    return {p.relative_to(w).as_posix(): p.read_bytes()
            for p in sorted(Path(w).rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    return pipeline(base / "a"), pipeline(base / "b")


def test_help_lists_all_flags(capsys):
    parser = build_parser()
    for name, sub in parser._subparsers._group_actions[0].choices.items():
        text = sub.format_help()
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("reconstruct", "calibrate", "render", "evaluate", "synth"):
        assert cmd in out


def test_missing_file_exits_nonzero(tmp_path, capsys):
    code = main(["render", "--cloud", str(tmp_path / "nope.ply"), "--pose", "0 0 0 0 0",
                 "--intrinsics", "10 10 5 5 10 10", "--out", str(tmp_path / "x.pgm")])
    assert code != 0
    assert "nope.ply" in capsys.readouterr().err


def test_error_categories(tmp_path):
    bad = tmp_path / "bad.xyz"
    bad.write_text("0 0 0 77\n")
    args = ["render", "--cloud", str(bad), "--pose", "0 0 0 0 0",
            "--intrinsics", "10 10 5 5 10 10", "--out", str(tmp_path / "x.pgm")]
    assert main(args) == 4
    bad.write_text("0 0 zero 1\n")
    assert main(args) == 3
    bad.write_text("0 0 0 1\n")
    args[4] = "0 0 0 0 91"
    assert main(args) == 9
    with pytest.raises(SystemExit) as exc:
        main(["calibrate"])
    assert exc.value.code == 2


def test_pipeline_outputs(pipeline_runs):
    w = pipeline_runs[0]
    fields, tables = read_report(w / "result.txt")
    for key in ("pose.tx", "pose.ty", "pose.tz", "pose.yaw", "pose.pitch", "final_loss"):
        assert key in fields
    assert float(fields["error.translation_cm"]) < 10
    assert [int(r[0]) for r in tables["stages"][1]] == [1, 2, 3]
    assert (w / "result_views.png").exists() and (w / "result_trace.png").exists()
    assert read_label_image(w / "target.pgm").shape == (100, 160)
    assert len(read_cloud(w / "merged.ply")) > 0
    fields, tables = read_report(w / "eval.txt")
    assert len(tables["trials"][1]) == 2
    assert (w / "eval_trials.png").exists()


def test_pipeline_byte_identical(pipeline_runs):
    a, b = (output_bytes(w) for w in pipeline_runs)
    assert a.keys() == b.keys()
    differing = [k for k in a if a[k] != b[k]]
    assert not differing
