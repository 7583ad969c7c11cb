import hashlib
import json

import numpy as np
import pytest

from textloop.cli import main
from textloop.geometry import Pose
from textloop.logio import read_trajectory
from textloop.loop_closure import LoopConstraint


def _sha(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """One corridor run shared by the read-only tests below."""
    d = tmp_path_factory.mktemp("corridor")
    assert main(["simulate", "--scenario", "corridor", "--seed", "3", "--out", str(d)]) == 0
    assert main(["detect", "--log", str(d / "log.jsonl"), "--out", str(d / "loops.jsonl")]) == 0
    return d


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert "textloop" in capsys.readouterr().out


def test_invalid_scenario_exits_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["simulate", "--scenario", "spiral", "--seed", "0", "--out", str(tmp_path)])
    assert info.value.code == 2
    # a config-supplied scenario bypasses argparse choices and must still fail
    (tmp_path / "bad.ini").write_text("[sim]\nscenario = spiral\n")
    rc = main(["simulate", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path)])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_simulate_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["simulate", "--scenario", "corridor", "--seed", "9", "--out", str(out)]) == 0
    assert _sha(a / "log.jsonl") == _sha(b / "log.jsonl")
    assert _sha(a / "gt.jsonl") == _sha(b / "gt.jsonl")


def test_detect_without_texts_writes_empty_loops(run_dir, tmp_path):
    quiet = tmp_path / "quiet.jsonl"
    with open(run_dir / "log.jsonl") as fin, open(quiet, "w") as fout:
        for line in fin:
            if json.loads(line)["type"] != "texts":
                fout.write(line)
    out = tmp_path / "loops.jsonl"
    assert main(["detect", "--log", str(quiet), "--out", str(out)]) == 0
    assert out.read_text() == ""


def test_detect_golden_constraint_count(run_dir):
    loops = [
        LoopConstraint.from_json(json.loads(line))
        for line in (run_dir / "loops.jsonl").read_text().splitlines()
    ]
    assert len(loops) == 31
    assert all(c.frame_j < c.frame_i for c in loops)


def test_single_sign_revisit_gives_one_constraint(run_dir, tmp_path):
    single = tmp_path / "single.jsonl"
    with open(run_dir / "log.jsonl") as fin, open(single, "w") as fout:
        for line in fin:
            rec = json.loads(line)
            if rec["type"] == "texts":
                rec["detections"] = [d for d in rec["detections"] if d["text"] == "A1-R03"]
                if not rec["detections"]:
                    continue
            fout.write(json.dumps(rec, separators=(",", ":")) + "\n")
    # one acceptance suppresses the rest of the pass
    config = tmp_path / "run.ini"
    config.write_text("[detect]\ncooldown_frames = 10000\n")
    out = tmp_path / "loops.jsonl"
    assert main(["detect", "--log", str(single), "--config", str(config), "--out", str(out)]) == 0
    loops = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(loops) == 1
    assert loops[0]["source"] == "id"


def test_truncated_line_exits_2_with_line_number(run_dir, tmp_path, capsys):
    lines = (run_dir / "log.jsonl").read_text().splitlines()
    lines[4] = lines[4][: len(lines[4]) // 2]
    broken = tmp_path / "broken.jsonl"
    broken.write_text("\n".join(lines) + "\n")
    rc = main(["detect", "--log", str(broken), "--out", str(tmp_path / "loops.jsonl")])
    assert rc == 2
    assert "line 5" in capsys.readouterr().err


def test_log_must_start_with_calib(run_dir, tmp_path, capsys):
    lines = (run_dir / "log.jsonl").read_text().splitlines()
    headless = tmp_path / "headless.jsonl"
    headless.write_text("\n".join(lines[1:]) + "\n")
    rc = main(["detect", "--log", str(headless), "--out", str(tmp_path / "loops.jsonl")])
    assert rc == 2
    assert "calib" in capsys.readouterr().err


def test_out_of_order_odometry_exits_2(run_dir, tmp_path, capsys):
    lines = (run_dir / "log.jsonl").read_text().splitlines()
    records = [json.loads(line) for line in lines]
    odom_idx = [k for k, r in enumerate(records) if r["type"] == "odom"]
    records[odom_idx[1]], records[odom_idx[2]] = records[odom_idx[2]], records[odom_idx[1]]
    shuffled = tmp_path / "shuffled.jsonl"
    shuffled.write_text("\n".join(json.dumps(r, separators=(",", ":")) for r in records) + "\n")
    rc = main(["detect", "--log", str(shuffled), "--out", str(tmp_path / "loops.jsonl")])
    assert rc == 2
    assert "out of order" in capsys.readouterr().err


def test_optimize_with_empty_loops_returns_odometry(run_dir, tmp_path):
    empty = tmp_path / "none.jsonl"
    empty.write_text("")
    traj = tmp_path / "traj.jsonl"
    rc = main(["optimize", "--log", str(run_dir / "log.jsonl"), "--loops", str(empty), "--out", str(traj)])
    assert rc == 0
    _, odom = read_trajectory(run_dir / "log.jsonl")
    _, optimized = read_trajectory(traj)
    assert len(odom) == len(optimized)
    assert all(a.is_close(b, tol=1e-10) for a, b in zip(odom, optimized))


def test_evaluate_est_equal_gt_scores_zero_ate(run_dir, tmp_path):
    report_path = tmp_path / "report.json"
    rc = main(
        [
            "evaluate",
            "--traj", str(run_dir / "gt.jsonl"),
            "--gt", str(run_dir / "gt.jsonl"),
            "--loops", str(run_dir / "loops.jsonl"),
            "--out", str(report_path),
        ]
    )
    assert rc == 0
    report = json.loads(report_path.read_text())
    assert report["ate_mean"] < 1e-12
    assert report["params"] == {"tau": 1.0, "min_travel": 10.0}


def test_evaluate_mismatched_lengths_exits_2(run_dir, tmp_path, capsys):
    _, gt = read_trajectory(run_dir / "gt.jsonl")
    short = tmp_path / "short.jsonl"
    from textloop.logio import gt_record, write_log

    write_log(short, [gt_record(k, p) for k, p in enumerate(gt[:-5])])
    rc = main(
        [
            "evaluate",
            "--traj", str(short),
            "--gt", str(run_dir / "gt.jsonl"),
            "--loops", str(run_dir / "loops.jsonl"),
            "--out", str(tmp_path / "report.json"),
        ]
    )
    assert rc == 2
    assert capsys.readouterr().err.startswith("error:")


def test_env_override_reaches_commands(run_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("TEXTLOOP_EVAL__TAU", "1.7")
    report_path = tmp_path / "report.json"
    rc = main(
        [
            "evaluate",
            "--traj", str(run_dir / "gt.jsonl"),
            "--gt", str(run_dir / "gt.jsonl"),
            "--loops", str(run_dir / "loops.jsonl"),
            "--out", str(report_path),
        ]
    )
    assert rc == 0
    assert json.loads(report_path.read_text())["params"]["tau"] == 1.7


def test_missing_input_file_exits_2(tmp_path, capsys):
    rc = main(["detect", "--log", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "x")])
    assert rc == 2
    assert capsys.readouterr().err.startswith("error:")
