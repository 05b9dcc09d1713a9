import csv
import json
import shutil

import numpy as np
import pytest

from tilscope.cli import main
from tilscope.raster import Raster, load_raster, save_raster


@pytest.fixture(scope="module")
def roi(tmp_path_factory):
    out = tmp_path_factory.mktemp("roi")
    assert main(["synth", "roi_small", "--seed", "3", "--out", str(out)]) == 0
    return out


def _run(kind, bundle, out, *extra, config=True):
    args = ["run", kind, "--slide", str(bundle / "slide.png"), "--tissue-mask", str(bundle / "tissue.png"),
            "--out", str(out), *extra]
    if config:
        args += ["--config", str(bundle / "config.txt")]
    return main(args)


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


# ---------------------------------------------------------------- synth


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "detection_blobs", "--seed", "1", "--out", str(tmp_path / name)]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_synth_blobs_rows_match_count(tmp_path):
    main(["synth", "detection_blobs", "--seed", "1", "--out", str(tmp_path)])
    k = json.loads((tmp_path / "expected.json").read_text())["blob_count"]
    with open(tmp_path / "expected_detections.csv") as fh:
        assert len(list(csv.DictReader(fh))) == k


def test_synth_slide_l2_expected(tmp_path):
    main(["synth", "slide_l2", "--seed", "7", "--out", str(tmp_path)])
    exp = json.loads((tmp_path / "expected.json").read_text())
    assert exp["tils_score"] == 100 * 1000 * 16 // 160_000 == 10
    assert exp["stroma_in_bulk_area_um2"] == 160_000.0
    assert abs(exp["tissue_area_mm2"] - 6.0) < 0.01
    labels = load_raster(tmp_path / "gt_labels.png").data
    sx, sy, block = exp["stroma_block"]
    assert np.all(labels[sy:sy + block, sx:sx + block] == 2)


def test_synth_unknown_scenario(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["synth", "nope", "--out", str(tmp_path)])
    assert info.value.code == 2


# ---------------------------------------------------------------- run


def test_score_small_roi_emits_l1_outputs(roi, tmp_path):
    assert _run("score", roi, tmp_path) == 0
    names = set(_files(tmp_path))
    assert {"labels.png", "detections.csv", "manifest.json"} <= names
    assert "report.json" not in names
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["branch"] == "L1" and manifest["status"] == "ok"
    expected = json.loads((roi / "expected.json").read_text())
    with open(tmp_path / "detections.csv") as fh:
        assert len(list(csv.DictReader(fh))) == expected["til_count"]


def test_manifest_records_defaults_and_hashes(roi, tmp_path):
    assert _run("detect", roi, tmp_path) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert "detection.det_threshold" in manifest["defaults_applied"]
    assert len(manifest["config_sha256"]) == 64
    assert set(manifest["inputs"]) == {"slide", "tissue_mask", "config"}
    assert set(manifest["versions"]) == {"tilscope", "numpy", "python"}


def test_segment_with_probabilities(roi, tmp_path):
    assert _run("segment", roi, tmp_path, "--save-probabilities", "--figures") == 0
    labels = load_raster(tmp_path / "labels.png")
    assert set(np.unique(labels.data)) <= {0, 1, 2}
    prob = load_raster(tmp_path / "tumor_prob.png")
    assert prob.resolution.mpp_x == 1.0 and prob.data.shape == (1000, 1000)
    assert (tmp_path / "overlay.png").exists()


def test_missing_input_is_validation_error(roi, tmp_path, capsys):
    code = main(["run", "score", "--slide", str(roi / "nope.png"), "--tissue-mask", str(roi / "tissue.png"),
                 "--out", str(tmp_path)])
    assert code == 2
    assert "inputs" in capsys.readouterr().err
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "error" and manifest["error"]["stage"] == "inputs"


def test_bad_config_is_validation_error(roi, tmp_path, capsys):
    cfg = tmp_path / "bad.txt"
    cfg.write_text("detection.det_threshold = 2\n")
    code = main(["run", "detect", "--slide", str(roi / "slide.png"), "--tissue-mask", str(roi / "tissue.png"),
                 "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "config" in capsys.readouterr().err


def test_runtime_failure_exit_code(roi, tmp_path, capsys):
    # probability maps smaller than the slide: the predictor fails mid-run
    for c in ("tumor", "stroma"):
        save_raster(Raster(np.zeros((100, 100), np.uint8)), tmp_path / f"small.{c}.png")
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(f"predictor.segmentation.source = {tmp_path / 'small'}\n")
    code = main(["run", "segment", "--slide", str(roi / "slide.png"), "--tissue-mask", str(roi / "tissue.png"),
                 "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 3
    assert "segmentation" in capsys.readouterr().err
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["error"]["stage"] == "segmentation"


# ---------------------------------------------------------------- eval


def test_eval_seg_identical_masks(roi, tmp_path):
    for d in ("p", "g"):
        (tmp_path / d).mkdir()
        for name in ("a", "b"):
            shutil.copy(roi / "gt_labels.png", tmp_path / d / f"{name}.png")
    assert main(["eval", "seg", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "g"),
                 "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "metrics_seg.json").read_text())
    assert report["mean_tumor_stroma_dice"] == 1.0 and set(report["per_case"]) == {"a", "b"}
    assert (tmp_path / "o" / "dice.png").exists()


def test_eval_unpaired_lists_orphans(roi, tmp_path, capsys):
    for d, names in (("p", ["a", "b"]), ("g", ["a", "c"])):
        (tmp_path / d).mkdir()
        for name in names:
            shutil.copy(roi / "gt_labels.png", tmp_path / d / f"{name}.png")
    code = main(["eval", "seg", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "g"), "--out", str(tmp_path / "o")])
    assert code == 2
    err = capsys.readouterr().err
    assert "pred:b" in err and "gt:c" in err


def test_eval_det_empty_predictions(roi, tmp_path):
    (tmp_path / "empty.csv").write_text("x_px,y_px,probability\n")
    assert main(["eval", "det", "--pred", str(tmp_path / "empty.csv"), "--gt", str(roi / "gt_points.csv"),
                 "--out", str(tmp_path / "o"), "--no-figures"]) == 0
    report = json.loads((tmp_path / "o" / "metrics_det.json").read_text())
    assert report["f1"] == 0.0 and report["froc"] == 0.0
    assert report["figures"] == []


def test_eval_det_with_areas(roi, tmp_path):
    (tmp_path / "p").mkdir()
    (tmp_path / "g").mkdir()
    shutil.copy(roi / "gt_points.csv", tmp_path / "p" / "case1.csv")
    shutil.copy(roi / "gt_points.csv", tmp_path / "g" / "case1.csv")
    (tmp_path / "areas.csv").write_text("case_id,area_mm2\ncase1,0.81\n")
    assert main(["eval", "det", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "g"),
                 "--areas", str(tmp_path / "areas.csv"), "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "metrics_det.json").read_text())
    assert report["f1"] == 1.0 and report["froc"] == 1.0 and report["flags"] == []


def test_eval_survival_matches_fixture(tmp_path):
    main(["synth", "survival_cohort", "--seed", "2", "--out", str(tmp_path / "s")])
    assert main(["eval", "survival", "--pred", str(tmp_path / "s" / "survival.csv"), "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "metrics_survival.json").read_text())
    expected = json.loads((tmp_path / "s" / "expected.json").read_text())
    assert report["c_index"] == expected["c_index"]
    assert report["n"] == 200 and report["cox_beta"] > 0


def test_eval_tils_pearson(tmp_path):
    (tmp_path / "pred.csv").write_text("case_id,tils_score\na,10\nb,20\nc,35\n")
    (tmp_path / "gt.csv").write_text("case_id,tils_score\na,12\nb,18\nc,40\n")
    (tmp_path / "d.json").write_text(json.dumps({"tils_score": 5}))
    assert main(["eval", "tils", "--pred", str(tmp_path / "pred.csv"), "--gt", str(tmp_path / "gt.csv"),
                 "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "metrics_tils.json").read_text())
    x, y = np.array([10, 20, 35.0]), np.array([12, 18, 40.0])
    assert report["pearson_r"] == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)


def test_eval_requires_gt(tmp_path, capsys):
    assert main(["eval", "seg", "--pred", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
