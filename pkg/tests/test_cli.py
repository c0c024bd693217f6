import json

import numpy as np
import pytest

from rppg_forgery.cli import run
from rppg_forgery.stmap import SpatioTemporalMap, read_map, write_map

SMALL_MODEL = ["--stf-width", "2", "--feat-width", "2", "--feat-dim", "4", "--hidden", "3"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    codes = [
        run(["synth", "--sources", "3", "--videos-per-source", "4", "--frames", "112", "--rois", "2",
             "--channels", "2", "--out", str(root / "traces")]),
        run(["extract", "--traces", str(root / "traces"), "--out", str(root / "maps")]),
        run(["train", "--maps", str(root / "maps"), "--epochs", "2", "--batch", "4", "--momentum", "0.5",
             *SMALL_MODEL, "--out", str(root / "model.ckpt")]),
        run(["eval", "--model", str(root / "model.ckpt"), "--maps", str(root / "maps"),
             "--report", str(root / "report.json")]),
    ]
    return root, codes


def test_full_pipeline_exits_zero_and_writes_outputs(pipeline):
    root, codes = pipeline
    assert codes == [0, 0, 0, 0]
    assert (root / "traces" / "manifest.json").is_file()
    assert (root / "maps" / "maps.json").is_file()
    history = json.loads((root / "history.json").read_text())
    assert len(history) == 2 and {"epoch", "lr", "loss_ce", "loss_rho", "val_acc"} <= set(history[0])
    report = json.loads((root / "report.json").read_text())
    heldout = report["config"]["checkpoint"]["split"]["heldout_videos"]
    assert report["num_videos"] == len(heldout) == 3
    assert {"average_accuracy", "clip_level_accuracy", "confusion_matrix"} <= set(report)
    assert (root / "confusion.csv").read_text().startswith("true\\pred,0,1,2")


def test_every_run_prints_its_effective_config(tmp_path, capsys):
    assert run(["synth", "--sources", "2", "--videos-per-source", "1", "--frames", "64", "--rois", "2",
                "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    doc = json.loads(out[:out.index("\n}") + 2])
    assert doc["command"] == "synth"
    assert doc["config"]["seed"] == 42 and doc["config"]["fps"] == 30.0


def test_eval_on_all_videos(pipeline):
    root, _ = pipeline
    assert run(["eval", "--model", str(root / "model.ckpt"), "--maps", str(root / "maps"),
                "--report", str(root / "all.json"), "--videos", "all"]) == 0
    assert json.loads((root / "all.json").read_text())["num_videos"] == 12


def test_extract_on_empty_directory_names_the_manifest(tmp_path, capsys):
    assert run(["extract", "--traces", str(tmp_path), "--out", str(tmp_path / "maps")]) == 2
    assert "manifest.json" in capsys.readouterr().err


def test_unknown_flag_and_missing_input_exit_two(tmp_path, capsys):
    assert run(["synth", "--out", str(tmp_path), "--bogus"]) == 2
    assert run(["eval", "--model", str(tmp_path / "none.ckpt"), "--maps", str(tmp_path),
                "--report", str(tmp_path / "r.json")]) == 2
    assert "usage" in capsys.readouterr().err


def test_inter_blend_on_single_source_maps_exits_one(tmp_path, capsys):
    assert run(["synth", "--sources", "2", "--videos-per-source", "2", "--frames", "112", "--rois", "2",
                "--out", str(tmp_path / "traces")]) == 0
    manifest = tmp_path / "traces" / "manifest.json"
    doc = json.loads(manifest.read_text())
    doc["videos"] = [v for v in doc["videos"] if v["source_id"] == 1]
    manifest.write_text(json.dumps(doc))
    assert run(["extract", "--traces", str(tmp_path / "traces"), "--out", str(tmp_path / "maps")]) == 0
    capsys.readouterr()
    code = run(["train", "--maps", str(tmp_path / "maps"), "--blend", "inter", "--epochs", "1",
                *SMALL_MODEL, "--out", str(tmp_path / "m.ckpt")])
    assert code == 1
    assert "source" in capsys.readouterr().err


def test_blend_demo_writes_the_blend(tmp_path):
    rng = np.random.default_rng(0)
    a = SpatioTemporalMap(rng.normal(size=(8, 3, 2)), 0, 0, 0)
    b = SpatioTemporalMap(rng.normal(size=(8, 3, 2)), 1, 1, 0)
    write_map(tmp_path / "a.stmp", a)
    write_map(tmp_path / "b.stmp", b)
    assert run(["blend-demo", "--map-a", str(tmp_path / "a.stmp"), "--map-b", str(tmp_path / "b.stmp"),
                "--alpha", "0.25", "--out", str(tmp_path / "o.stmp")]) == 0
    np.testing.assert_allclose(read_map(tmp_path / "o.stmp").data, 0.25 * a.data + 0.75 * b.data, atol=1e-15)
    write_map(tmp_path / "c.stmp", SpatioTemporalMap(np.zeros((4, 3, 2)), 2, 2, 0))
    assert run(["blend-demo", "--map-a", str(tmp_path / "a.stmp"), "--map-b", str(tmp_path / "c.stmp"),
                "--out", str(tmp_path / "x.stmp")]) == 1
