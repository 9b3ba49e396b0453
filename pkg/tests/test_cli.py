import json

import numpy as np
import pytest

from src.cli import run
from src.core.geometry import area, iou
from src.services.dataio_service import load_gts

SMALL_RUN = "TRAIN_IMAGES=4\nTEST_IMAGES=2\nSTEPS=30\nBATCH_SIZE=16\nDECAY_STEPS=20\nHIDDEN_DIM=8\n"


def _files(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def _write_fixture(tmp_path):
    gts = tmp_path / "gts"
    dets = tmp_path / "dets"
    gts.mkdir()
    dets.mkdir()
    (gts / "a.txt").write_text("0 0 10 0 10 10 0 10 plane 0\n")
    (dets / "a.txt").write_text(
        "plane 0.9 0 0 10 0 10 10 0 10\nplane 0.8 0 0 10 0 10 10 0 10\nplane 0.2 40 40 50 40 50 50 40 50\n"
    )
    return gts, dets


def test_synth_encode_decode_round_trip(tmp_path):
    out = tmp_path / "synth"
    assert run(["synth", "--out", str(out), "--images", "2", "--seed", "3"]) == 0
    assert sorted(p.name for p in (out / "gts").iterdir()) == ["img_0000.txt", "img_0001.txt"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 3
    assert set(manifest["outputs"]) == {"gts/img_0000.txt", "gts/img_0001.txt"}

    reps = tmp_path / "enc" / "reps.csv"
    assert run(["encode", "--in", str(out / "gts"), "--out", str(reps)]) == 0
    assert reps.read_text().splitlines()[0] == "image_id,class,x,y,w,h,alpha1,alpha2,alpha3,alpha4,r"

    decoded = tmp_path / "dec"
    assert run(["decode", "--in", str(reps), "--out", str(decoded)]) == 0
    before, after = load_gts(out / "gts"), load_gts(decoded)
    assert set(before) == set(after)
    for image_id in before:
        assert len(before[image_id]) == len(after[image_id])
        for a, b in zip(before[image_id], after[image_id]):
            assert a.cls == b.cls
            assert iou(a.polygon, b.polygon) == pytest.approx(1.0, abs=1e-3)


def test_synth_rotations(tmp_path):
    out = tmp_path / "synth"
    assert run(["synth", "--out", str(out), "--images", "1", "--rotations", "3"]) == 0
    names = sorted(p.name for p in (out / "gts").iterdir())
    assert names == ["img_0000.txt", "img_0000_rot090.txt", "img_0000_rot180.txt", "img_0000_rot270.txt"]


def test_nms_and_eval_map(tmp_path, capsys):
    gts, dets = _write_fixture(tmp_path)
    kept = tmp_path / "kept"
    assert run(["nms", "--in", str(dets), "--out", str(kept)]) == 0
    assert len((kept / "a.txt").read_text().splitlines()) == 2

    report = tmp_path / "report"
    assert run(["eval", "map", "--dets", str(kept), "--gts", str(gts), "--out", str(report)]) == 0
    assert (report / "ap.csv").read_text().splitlines()[-1] == "mAP,1.000000"
    assert (report / "pr_curve.csv").exists()
    assert (report / "manifest.json").exists()
    assert "mAP" in capsys.readouterr().out


def test_eval_fmeasure_and_lamr(tmp_path):
    gts, dets = _write_fixture(tmp_path)
    out = tmp_path / "prf"
    assert run(["eval", "fmeasure", "--dets", str(dets), "--gts", str(gts), "--out", str(out)]) == 0
    text = (out / "report.txt").read_text()
    assert "Precision: 0.333333" in text
    assert "Recall: 1.000000" in text
    out = tmp_path / "lamr"
    assert run(["eval", "lamr", "--dets", str(dets), "--gts", str(gts), "--out", str(out)]) == 0
    assert (out / "fppi_curve.csv").read_text().startswith("fppi,miss_rate\n")


def test_parse_error_exits_with_status_two(tmp_path, capsys):
    gts, dets = _write_fixture(tmp_path)
    (dets / "b.txt").write_text("plane 0.5 0 0 10 0 10 10 0 10\nplane oops 0 0 10 0 10 10 0 10\n")
    out = tmp_path / "report"
    assert run(["eval", "map", "--dets", str(dets), "--gts", str(gts), "--out", str(out)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: AnnotationParseError: line 2:")
    assert "b.txt" in err
    assert not out.exists()


def test_config_error_exits_with_status_two(tmp_path, capsys):
    _, dets = _write_fixture(tmp_path)
    out = tmp_path / "kept"
    assert run(["nms", "--in", str(dets), "--out", str(out), "--iou", "1.5"]) == 2
    assert "error: ConfigError: nms_iou must lie in [0, 1]" in capsys.readouterr().err
    assert not out.exists()


def test_bad_log_level():
    assert run(["--log-level", "loud", "confusion", "--out", "unused"]) == 2


def test_help_shows_defaults(monkeypatch, capsys):
    monkeypatch.setenv("COLUMNS", "200")
    monkeypatch.setenv("TERMINAL_WIDTH", "200")
    assert run(["nms", "--help"]) == 0
    assert "(default 0.5)" in capsys.readouterr().out


def test_confusion(tmp_path):
    out = tmp_path / "confusion"
    assert run(["confusion", "--out", str(out), "--range", "1", "--step", "0.5"]) == 0
    lines = (out / "confusion.csv").read_text().splitlines()
    assert lines[0] == "angle,vertex_jump,gliding_jump,aligned"
    assert len(lines) == 5
    assert (out / "confusion.txt").read_text().startswith("Largest vertex-target jump")


def test_robustness(tmp_path):
    out = tmp_path / "robustness"
    assert run(["robustness", "--out", str(out), "--aspects", "4", "--angle-errors", "0,2", "--trials", "5"]) == 0
    lines = (out / "robustness.csv").read_text().splitlines()
    assert lines[0] == "kind,aspect,epsilon,mean_iou,std_iou,trials"
    assert len(lines) == 7


def test_selection(tmp_path):
    out = tmp_path / "selection"
    assert run(["selection", "--out", str(out), "--images", "3"]) == 0
    assert "oriented only" in (out / "selection.txt").read_text()


def test_train_demo(tmp_path):
    config = tmp_path / "run.env"
    config.write_text(SMALL_RUN)
    out = tmp_path / "train"
    assert run(["train-demo", "--out", str(out), "--config", str(config), "--steps", "12"]) == 0
    assert len((out / "loss_trace.csv").read_text().splitlines()) == 13
    assert json.loads((out / "checkpoint.json").read_text())["format_version"] == 1


def test_pipeline_reruns_are_byte_identical(tmp_path):
    config = tmp_path / "run.env"
    config.write_text(SMALL_RUN)
    first, second = tmp_path / "first", tmp_path / "second"
    assert run(["pipeline", "--out", str(first), "--config", str(config)]) == 0
    assert run(["pipeline", "--out", str(second), "--config", str(config)]) == 0
    files = _files(first)
    assert {"metrics.txt", "manifest.json", "checkpoint.json", "loss_trace.csv"} <= set(files)
    assert any(name.startswith("dets/") for name in files)
    assert files == _files(second)
    assert "Untrained mAP" in files["metrics.txt"].decode()


def test_decode_to_rotated_rectangles(tmp_path):
    reps = tmp_path / "reps.csv"
    reps.write_text(
        "image_id,class,x,y,w,h,alpha1,alpha2,alpha3,alpha4,r\n"
        "a,plane,5,5,10,10,0.5,0.5,0.5,0.5,0.5\n"
        "a,ship,50,50,20,10,0.25,0.5,0.25,0.5,0.5\n"
    )
    out = tmp_path / "rbox"
    assert run(["decode", "--in", str(reps), "--out", str(out), "--rbox"]) == 0
    diamond, kite = load_gts(out)["a"]
    assert area(diamond.polygon) == pytest.approx(50.0)
    assert iou(diamond.polygon, [[5, 0], [10, 5], [5, 10], [0, 5]]) == pytest.approx(1.0)
    assert area(kite.polygon) >= 100.0 - 1e-9
    edges = np.roll(kite.polygon, -1, axis=0) - kite.polygon
    assert np.dot(edges[0], edges[1]) == pytest.approx(0.0, abs=1e-6)


def test_undecodable_input_exits_with_status_two(tmp_path, capsys):
    source = tmp_path / "gts"
    source.mkdir()
    (source / "a.txt").write_bytes(b"0 0 10 0 10 10 0 10 pl\xffane 0\n")
    out = tmp_path / "enc" / "reps.csv"
    assert run(["encode", "--in", str(source), "--out", str(out)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: InvalidInputError:")
    assert "not UTF-8" in err
    assert len(err.strip().splitlines()) == 1
    assert not out.parent.exists()


def test_unwritable_output_exits_with_status_two(tmp_path, capsys):
    gts, _ = _write_fixture(tmp_path)
    blocker = tmp_path / "blocker"
    blocker.write_text("a file, not a directory\n")
    assert run(["encode", "--in", str(gts), "--out", str(blocker / "reps.csv")]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: InvalidInputError: cannot")
    assert blocker.read_text() == "a file, not a directory\n"
