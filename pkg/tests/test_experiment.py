import csv
import json

import numpy as np
import pytest

from entadapt.adapt import TrainPlan, evaluate_speaker, train_base
from entadapt.config import AdaptGrid
from entadapt.corpus import CorpusConfig, build_corpus
from entadapt.errors import DataError
from entadapt.experiment import (ABLATION_HEADER, AMOUNT_SWEEP_HEADER, PER_SPEAKER_HEADER, REPORT_FILES,
                                 SUMMARY_HEADER, THERMOMETER_HEADER, ReportParseError, load_report_snapshot,
                                 read_summary, run_grid, write_reports)
from entadapt.model import ModelConfig

MODEL = ModelConfig(d_model=8, n_encoder_layers=2, n_decoder_layers=1, n_heads=2, d_ff=16, d_code=4,
                    injection_layers=(0, 1), lora_layers=(0, 1), max_len=12)

SUMMARY = """speaker_id\tparameter_set\tloss_kind\tamount_utts\tchosen_epoch\twer_unadapted\twer_adapted
ALL\tnone\tnone\t0\t0\t0.3\t0.3
s1\tspeaker_code\tmin_entropy\t5\t4\t0.2\t0.1
s2\tspeaker_code\tmin_entropy\t5\t4\t0.4\t0.45
s1\tspeaker_code\tmin_entropy\t40\t9\t0.2\t0.05
s2\tspeaker_code\tmin_entropy\t40\t9\t0.4\t0.3
"""


@pytest.fixture(scope="module")
def setup():
    corpus = build_corpus(CorpusConfig(n_train_speakers=3, n_test_speakers=2, n_train=6, n_train_dev=2, n_adapt=4,
                                       n_adapt_dev=2, n_test=2))
    params = train_base(corpus, MODEL, TrainPlan(steps=6, batch_size=6, warmup_epochs_codes_frozen=0)).params
    return corpus, params


def _grid(**kw):
    base = dict(parameter_sets=["speaker_code"], loss_kinds=["min_entropy"], amounts=[2], speakers=None,
                plan={"max_epochs": 2})
    base.update(kw)
    return AdaptGrid(**base)


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestGrid:
    def test_one_cell_two_speakers(self, setup, tmp_path):
        corpus, params = setup
        run_grid(corpus, MODEL, params, _grid(), tmp_path)
        reports = sorted((tmp_path / "reports" / "speaker_code__min_entropy__2").glob("*.json"))
        assert [p.stem for p in reports] == ["tst000", "tst001"]
        rows = read_summary(tmp_path / "summary.tsv")
        assert len(rows) == 3 and rows[0].speaker_id == "ALL"
        doc = json.loads(reports[0].read_text())
        assert doc["plan"]["amount_utts"] == 2 and len(doc["per_epoch"]) == 3
        assert set(doc["adapted_tensors"]) == {"speaker_code/tst000"}

    def test_rerun_and_jobs_identical(self, setup, tmp_path):
        corpus, params = setup
        run_grid(corpus, MODEL, params, _grid(), tmp_path / "a", jobs=1)
        run_grid(corpus, MODEL, params, _grid(), tmp_path / "b", jobs=1)
        run_grid(corpus, MODEL, params, _grid(), tmp_path / "c", jobs=2)
        a = (tmp_path / "a" / "summary.tsv").read_bytes()
        assert a == (tmp_path / "b" / "summary.tsv").read_bytes() == (tmp_path / "c" / "summary.tsv").read_bytes()

    def test_report_snapshot_reproduces_wer(self, setup, tmp_path):
        corpus, params = setup
        run_grid(corpus, MODEL, params, _grid(), tmp_path)
        path = tmp_path / "reports" / "speaker_code__min_entropy__2" / "tst001.json"
        speaker, snap = load_report_snapshot(path)
        wer = evaluate_speaker(speaker, MODEL, params, snap, corpus.get(speaker, "test")).wer
        assert wer == json.loads(path.read_text())["wer_adapted"]

    def test_speaker_filter(self, setup, tmp_path):
        corpus, params = setup
        run_grid(corpus, MODEL, params, _grid(speakers=["tst001"]), tmp_path)
        assert [r.speaker_id for r in read_summary(tmp_path / "summary.tsv")] == ["ALL", "tst001"]

    def test_unknown_speaker(self, setup, tmp_path):
        corpus, params = setup
        with pytest.raises(DataError):
            run_grid(corpus, MODEL, params, _grid(speakers=["nobody"]), tmp_path)


class TestSummaryParsing:
    def test_round_trip(self, tmp_path):
        (tmp_path / "s.tsv").write_text(SUMMARY)
        rows = read_summary(tmp_path / "s.tsv")
        assert len(rows) == 5 and rows[2].wer_adapted == 0.45 and rows[3].amount_utts == 40

    @pytest.mark.parametrize("bad_line,lineno", [
        ("s3\tlora\toracle\t5\t1\t0.2", 7),
        ("s3\tlora\toracle\tfive\t1\t0.2\t0.1", 7),
        ("s3\tlora\toracle\t5\t1\tnan\t0.1", 7),
    ])
    def test_error_names_line(self, tmp_path, bad_line, lineno):
        (tmp_path / "s.tsv").write_text(SUMMARY + bad_line + "\n")
        with pytest.raises(ReportParseError, match=f"s.tsv:{lineno}:"):
            read_summary(tmp_path / "s.tsv")

    def test_bad_header(self, tmp_path):
        (tmp_path / "s.tsv").write_text("a\tb\n")
        with pytest.raises(ReportParseError, match=":1:"):
            read_summary(tmp_path / "s.tsv")

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            read_summary(tmp_path / "none.tsv")


class TestReports:
    @pytest.fixture
    def plots(self, tmp_path):
        (tmp_path / "s.tsv").write_text(SUMMARY)
        (tmp_path / "abl.tsv").write_text(SUMMARY)
        write_reports(tmp_path / "s.tsv", tmp_path / "plots", {"layers01": tmp_path / "abl.tsv"})
        return {name: _csv(tmp_path / "plots" / name) for name in REPORT_FILES}

    def test_headers_and_widths(self, plots):
        headers = [THERMOMETER_HEADER, PER_SPEAKER_HEADER, AMOUNT_SWEEP_HEADER, ABLATION_HEADER]
        for name, header in zip(REPORT_FILES, headers):
            assert tuple(plots[name][0]) == header
            assert all(len(r) == len(header) for r in plots[name])

    def test_thermometer(self, plots):
        rows = plots["thermometer.csv"][1:]
        assert rows[0][:3] == ["none", "none", "0"] and float(rows[0][4]) == 0.3
        np.testing.assert_allclose(float(rows[1][5]), (0.3 - 0.275) / 0.3)

    def test_per_speaker_sorted_descending(self, plots):
        rows = plots["per_speaker.csv"][1:]
        gains = [float(r[2]) for r in rows]
        assert gains == sorted(gains, reverse=True)
        assert rows[0][1] == "s1" and rows[0][0] == "1"

    def test_sweep_has_zero_amount(self, plots):
        rows = plots["amount_sweep.csv"][1:]
        assert [int(r[2]) for r in rows] == [0, 5, 40]
        assert float(rows[0][3]) == 0.3

    def test_ablation(self, plots):
        rows = plots["injection_ablation.csv"][1:]
        assert [r[0] for r in rows] == ["layers01", "layers01"]

    def test_no_ablation_header_only(self, tmp_path):
        (tmp_path / "s.tsv").write_text(SUMMARY)
        write_reports(tmp_path / "s.tsv", tmp_path)
        assert len(_csv(tmp_path / "injection_ablation.csv")) == 1
