import json

import numpy as np
import pytest

from fewshot_htr.cli import main
from fewshot_htr.core import GrayImage, load_annotations, load_line_image, load_support_set, save_image
from fewshot_htr.evaluate import threshold_sweep
from fewshot_htr.pseudolabel import LoopConfig

SMALL = ["--symbols", "3:5", "--spacing", "4:20"]
FAST_LOOP = ["--synth-per-iter", "0"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["alphabet", "--out", str(root / "alpha"), "--classes", "4", "--shots", "3",
                 "--seed", "11"]) == 0
    assert main(["synth", "--support", str(root / "alpha"), "--out", str(root / "train"),
                 "--count", "4", "--seed", "3", *SMALL]) == 0
    assert main(["synth", "--support", str(root / "alpha"), "--out", str(root / "test"),
                 "--count", "3", "--seed", "5", *SMALL]) == 0
    return root


def _json(path):
    return json.loads(path.read_text())


class TestSynth:
    def test_zero_count(self, work, tmp_path):
        assert main(["synth", "--support", str(work / "alpha"), "--out", str(tmp_path), "--count", "0"]) == 0
        assert load_annotations(tmp_path / "annotations.json").lines == []

    def test_negative_count(self, work, tmp_path):
        assert main(["synth", "--support", str(work / "alpha"), "--out", str(tmp_path), "--count", "-1"]) == 2

    def test_same_seed_same_bytes(self, work, tmp_path):
        assert main(["synth", "--support", str(work / "alpha"), "--out", str(tmp_path), "--count", "4",
                     "--seed", "3", *SMALL]) == 0
        for name in ["annotations.json", "synth_manifest.json", "lines/0000.png", "lines/0003.png"]:
            assert (tmp_path / name).read_bytes() == (work / "train" / name).read_bytes()

    def test_ranges_recorded(self, work, tmp_path):
        assert main(["synth", "--support", str(work / "alpha"), "--out", str(tmp_path), "--count", "5",
                     "--spacing", "0:30", "--rotation", "-5:5"]) == 0
        man = _json(tmp_path / "synth_manifest.json")
        assert man["config"]["spacing_range"] == [0, 30]
        assert man["config"]["rotation_range"] == [-5.0, 5.0]
        for rec in man["lines"]:
            assert all(-5 <= s["rotation"] <= 5 for s in rec["symbols"])
            assert all(0 <= s["spacing_before"] <= 30 for s in rec["symbols"])

    def test_bad_range(self, work, tmp_path):
        assert main(["synth", "--support", str(work / "alpha"), "--out", str(tmp_path), "--count", "1",
                     "--spacing", "9:3"]) == 2


class TestTranscribe:
    def test_outputs_and_round_trip(self, work, tmp_path):
        assert main(["transcribe", "--support", str(work / "alpha"), "--lines", str(work / "test"),
                     "--out", str(tmp_path)]) == 0
        detail = _json(tmp_path / "transcriptions.json")
        assert {"runlength", "ctc"} <= set(detail[0])
        rows = (tmp_path / "transcriptions.txt").read_text().splitlines()
        assert [r.split("\t")[0] for r in rows] == [d["id"] for d in detail]
        pred = load_annotations(tmp_path / "predictions.json")
        assert [ln.sequence for ln in pred.lines] == [d["runlength"]["sequence"] for d in detail]
        assert main(["eval", "--pred", str(tmp_path / "predictions.json"),
                     "--gt", str(work / "test" / "annotations.json"), "--out", str(tmp_path / "ev")]) == 0
        assert _json(tmp_path / "ev" / "eval_report.json")["corpus_ser"] < 0.5

    def test_blank_line(self, work, tmp_path):
        save_image(GrayImage(np.full((64, 200), 255, np.uint8)), tmp_path / "blank.png")
        assert main(["transcribe", "--support", str(work / "alpha"), "--lines", str(tmp_path / "blank.png"),
                     "--out", str(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "transcriptions.txt").read_text() == "blank.png\t\n"

    def test_ctc_choice(self, work, tmp_path):
        assert main(["transcribe", "--support", str(work / "alpha"), "--lines", str(work / "test"),
                     "--out", str(tmp_path), "--decoder", "ctc"]) == 0
        d = _json(tmp_path / "transcriptions.json")[0]
        assert d["decoder"] == "ctc" and d["text"] == d["ctc"]["text"]

    def test_scores_from_detect(self, work, tmp_path):
        assert main(["detect", "--support", str(work / "alpha"), "--lines", str(work / "test"),
                     "--out", str(tmp_path / "det")]) == 0
        assert main(["transcribe", "--support", str(work / "alpha"), "--lines", str(work / "test"),
                     "--out", str(tmp_path / "tr"), "--scores-from", str(tmp_path / "det" / "detections.csv"),
                     "--norm-height", "64"]) == 0
        assert len(_json(tmp_path / "tr" / "transcriptions.json")) == 3

    def test_malformed_scores(self, work, tmp_path):
        (tmp_path / "bad.csv").write_text("nope\n")
        assert main(["transcribe", "--support", str(work / "alpha"), "--lines", str(work / "test"),
                     "--out", str(tmp_path), "--scores-from", str(tmp_path / "bad.csv")]) == 4


class TestPseudolabel:
    def test_defaults_in_manifest(self, work, tmp_path):
        assert main(["pseudolabel", "--support", str(work / "alpha"), "--corpus", str(work / "train"),
                     "--out", str(tmp_path), "--max-iters", "1", *FAST_LOOP]) == 0
        man = _json(tmp_path / "manifest.json")
        assert man["config"]["loop"]["min_conf"] == 0.4
        assert man["config"]["loop"]["batch_fraction"] == 0.2
        assert len(_json(tmp_path / "history.json")) == 1

    def test_rerun_identical(self, work, tmp_path):
        args = ["pseudolabel", "--support", str(work / "alpha"), "--corpus", str(work / "train"),
                "--max-iters", "3", "--synth-per-iter", "2"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        for name in ["history.json", "annotations.json", "manifest.json"]:
            a = (tmp_path / "a" / name).read_text()
            b = (tmp_path / "b" / name).read_text().replace(str(tmp_path / "b"), str(tmp_path / "a"))
            assert a == b

    def test_eval_of_pseudo_labels(self, work, tmp_path):
        assert main(["pseudolabel", "--support", str(work / "alpha"), "--corpus", str(work / "train"),
                     "--out", str(tmp_path), *FAST_LOOP]) == 0
        assert main(["eval", "--pred", str(tmp_path / "annotations.json"),
                     "--gt", str(work / "train" / "annotations.json"), "--out", str(tmp_path / "ev")]) == 0
        assert _json(tmp_path / "ev" / "eval_report.json")["labeling_accuracy"] >= 0.8

    def test_bad_option(self, work, tmp_path):
        assert main(["pseudolabel", "--support", str(work / "alpha"), "--corpus", str(work / "train"),
                     "--out", str(tmp_path), "--batch-frac", "0"]) == 2


class TestEval:
    def test_self_is_zero(self, work, tmp_path):
        gt = str(work / "test" / "annotations.json")
        assert main(["eval", "--pred", gt, "--gt", gt, "--out", str(tmp_path)]) == 0
        rep = _json(tmp_path / "eval_report.json")
        assert rep["corpus_ser"] == 0.0 and rep["labeling_accuracy"] == 1.0

    def test_malformed(self, work, tmp_path):
        (tmp_path / "bad.json").write_text('{"alphabet": 3}')
        gt = str(work / "test" / "annotations.json")
        assert main(["eval", "--pred", str(tmp_path / "bad.json"), "--gt", gt, "--out", str(tmp_path)]) == 4

    def test_mismatched_lines(self, work, tmp_path):
        assert main(["eval", "--pred", str(work / "train" / "annotations.json"),
                     "--gt", str(work / "test" / "annotations.json"), "--out", str(tmp_path)]) == 4
        doc = _json(work / "test" / "annotations.json")
        doc["lines"][0]["image"] = "lines/elsewhere.png"
        (tmp_path / "other.json").write_text(json.dumps(doc))
        assert main(["eval", "--pred", str(tmp_path / "other.json"),
                     "--gt", str(work / "test" / "annotations.json"), "--out", str(tmp_path / "o")]) == 4

    def test_missing_file(self, tmp_path):
        assert main(["eval", "--pred", str(tmp_path / "nope.json"), "--gt", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path)]) == 3

    def test_bad_config(self, work, tmp_path):
        (tmp_path / "c.json").write_text('{"loop": {"min_conf": "high"}}')
        gt = str(work / "test" / "annotations.json")
        assert main(["eval", "--pred", gt, "--gt", gt, "--out", str(tmp_path), "--config",
                     str(tmp_path / "c.json")]) == 2


def test_sweep_matches_composition(work, tmp_path):
    assert main(["sweep", "--support", str(work / "alpha"), "--corpus", str(work / "train"),
                 "--test", str(work / "test" / "annotations.json"), "--thresholds", "0.4",
                 "--out", str(tmp_path), *FAST_LOOP]) == 0
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert rows[0] == "threshold,ser,labels,iterations" and len(rows) == 2

    support = load_support_set(work / "alpha")
    train = load_annotations(work / "train" / "annotations.json")
    corpus = [(ln.image, load_line_image(train.image_path(ln))) for ln in train.lines]
    test = load_annotations(work / "test" / "annotations.json")
    test_lines = [(load_line_image(test.image_path(ln)), ln.sequence) for ln in test.lines]
    direct = threshold_sweep(corpus, support, [0.4], test_lines, LoopConfig(synth_lines_per_iter=0))
    assert rows[1] == f"0.4,{direct[0].ser:.6f},{direct[0].labels},{direct[0].iterations}"


def test_empty_sweep(work, tmp_path):
    assert main(["sweep", "--support", str(work / "alpha"), "--corpus", str(work / "train"),
                 "--test", str(work / "test" / "annotations.json"), "--thresholds", "",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "sweep.csv").read_text().splitlines() == ["threshold,ser,labels,iterations"]
