import json

import pytest

from nodulepipe import cli, hs2, phantom
from nodulepipe import candidate_pipeline as cp


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scans")
    code = run(
        "phantom", "gen", "--out-dir", str(out), "--scans", "3",
        "--seed", "100", "--spheres", "2", "--tubes", "2",
        "--dims", "64", "64", "40", "--noise-sigma", "5.0",
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def model_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "model.bin"
    path.write_bytes(hs2.save_model(hs2.initialize(0)))
    return path


class TestPhantomGen:
    def test_outputs_exist(self, phantom_dir):
        names = {p.name for p in phantom_dir.iterdir()}
        assert {"scan000.mhd", "scan000.raw", "annotations.csv", "tissues.csv",
                "manifest.json"} <= names

    def test_manifest_lists_outputs(self, phantom_dir):
        manifest = json.loads((phantom_dir / "manifest.json").read_text())
        assert manifest["subcommand"] == "phantom gen"
        assert "scan002.mhd" in manifest["outputs"]
        assert manifest["config"]["seed"] == 100
        for name in manifest["outputs"]:  # declared outputs must exist
            assert (phantom_dir / name).exists(), name

    def test_from_spec_file(self, tmp_path):
        spec = phantom.sample_spec(5, dims=(48, 48, 32), scan_id="solo")
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(phantom.spec_to_json(spec))
        assert run("phantom", "gen", "--out-dir", str(tmp_path / "o"),
                   "--spec", str(spec_path)) == 0
        assert (tmp_path / "o" / "solo.mhd").exists()


class TestVolumeInfo:
    def test_prints_summary(self, phantom_dir, capsys):
        assert run("volume", "info", str(phantom_dir / "scan000.mhd")) == 0
        out = capsys.readouterr().out
        assert "64 x 64 x 40" in out

    def test_missing_file_is_io_error(self, tmp_path):
        assert run("volume", "info", str(tmp_path / "nope.mhd")) == 2


class TestCandidateCommands:
    def test_detect_then_filter_then_nms(self, phantom_dir, tmp_path):
        detected = tmp_path / "detected.csv"
        assert run(
            "candidates", "detect", "--volume", str(phantom_dir / "scan000.mhd"),
            "--output", str(detected), "--intensity-threshold", "-400",
        ) == 0
        cands = cp.load_candidates_csv(detected.read_text())
        assert cands and all(c.scan_id == "scan000" for c in cands)

        filtered = tmp_path / "filtered.csv"
        assert run("candidates", "filter", "--input", str(detected),
                   "--output", str(filtered), "--min-score", "0.1") == 0
        kept = cp.load_candidates_csv(filtered.read_text())
        assert all(c.score > 0.1 for c in kept)

        deduped = tmp_path / "dedup.csv"
        assert run("candidates", "nms", "--input", str(filtered),
                   "--volumes", str(phantom_dir), "--output", str(deduped)) == 0
        assert cp.load_candidates_csv(deduped.read_text())

    def test_unknown_flag_is_validation_error(self, capsys):
        assert run("candidates", "filter", "--bogus") == 1
        assert "error" in capsys.readouterr().err


class TestLhiAndHs2Commands:
    def test_extract_train_predict(self, phantom_dir, tmp_path):
        detected = tmp_path / "cands.csv"
        assert run(
            "candidates", "detect", "--volume", str(phantom_dir / "scan000.mhd"),
            "--output", str(detected),
        ) == 0
        patches = tmp_path / "patches"
        assert run(
            "lhi", "extract", "--candidates", str(detected),
            "--volume", str(phantom_dir / "scan000.mhd"),
            "--annotations", str(phantom_dir / "annotations.csv"),
            "--out-dir", str(patches),
        ) == 0
        index = (patches / "index.csv").read_text().splitlines()
        assert index[0] == "candidate_id,file,label"
        assert len(index) > 1
        labels = {line.split(",")[2] for line in index[1:]}
        assert labels <= {"nodule", "tissue"}

        model_out = tmp_path / "trained.bin"
        assert run(
            "hs2", "train", "--patches", str(patches), "--output", str(model_out),
            "--epochs", "2", "--batch-size", "4", "--seed", "5",
        ) == 0
        assert model_out.exists()
        manifest = json.loads((model_out.parent / "manifest.json").read_text())
        assert manifest["config"]["tau"] == 10
        assert manifest["config"]["seed"] == 5
        assert manifest["config"]["patch_extraction"]["delta_threshold"] == 30.0
        assert manifest["inputs"]  # dataset hash recorded

        pred_csv = tmp_path / "pred.csv"
        assert run(
            "hs2", "predict", "--model", str(model_out),
            "--patches", str(patches), "--output", str(pred_csv),
        ) == 0
        lines = pred_csv.read_text().splitlines()
        assert lines[0] == "candidate_id,p_nodule,label"
        assert len(lines) == len(index)

    def test_train_requires_labels(self, phantom_dir, tmp_path):
        detected = tmp_path / "cands.csv"
        run("candidates", "detect", "--volume", str(phantom_dir / "scan000.mhd"),
            "--output", str(detected))
        patches = tmp_path / "patches_nolabel"
        run("lhi", "extract", "--candidates", str(detected),
            "--volume", str(phantom_dir / "scan000.mhd"), "--out-dir", str(patches))
        assert run("hs2", "train", "--patches", str(patches),
                   "--output", str(tmp_path / "m.bin")) == 1


class TestEvalCommands:
    def test_cpm_fixture_row(self, capsys):
        assert run(
            "eval", "cpm", "--levels", "0.659,0.745,0.819,0.865,0.906,0.933,0.946",
            "--claimed", "0.839",
        ) == 0
        out = capsys.readouterr().out
        assert "0.839" in out
        assert "consistent" in out

    def test_cpm_flags_discrepancy(self, capsys):
        assert run(
            "eval", "cpm", "--levels", "0.904,0.914,0.933,0.957,0.971,0.971,0.971",
            "--claimed", "0.952",
        ) == 0
        out = capsys.readouterr().out
        assert "WARNING" in out and "0.9459" in out

    def test_froc_perfect_fixture(self, tmp_path, capsys):
        gts = [cp.GroundTruthNodule(f"s{i}", (float(i), 0.0, 0.0), 10.0) for i in range(4)]
        cands = [cp.NoduleCandidate(g.scan_id, g.center_mm, 5.0, 0.9) for g in gts]
        cand_path = tmp_path / "c.csv"
        gt_path = tmp_path / "a.csv"
        cand_path.write_text(cp.write_candidates_csv(cands))
        gt_path.write_text(cp.write_annotations_csv(gts))
        out_json = tmp_path / "froc.json"
        assert run(
            "eval", "froc", "--candidates", str(cand_path),
            "--annotations", str(gt_path), "--output-json", str(out_json),
            "--output-curve", str(tmp_path / "curve.dat"),
        ) == 0
        assert "CPM: 1.000" in capsys.readouterr().out
        payload = json.loads(out_json.read_text())
        assert payload["cpm"] == 1.0
        assert payload["level_sensitivities"] == [1.0] * 7
        assert (tmp_path / "curve.dat").read_text().startswith("# fps_per_scan sensitivity")

    def test_fp_report(self, tmp_path, capsys):
        gt = [cp.GroundTruthNodule("s", (0.0, 0.0, 0.0), 10.0)]
        tp = cp.NoduleCandidate("s", (0.0, 0.0, 0.0), 5.0, 0.9)
        fps = [cp.NoduleCandidate("s", (100.0 + i, 0.0, 0.0), 5.0, 0.5) for i in range(4)]
        before, after, gtp = tmp_path / "b.csv", tmp_path / "a.csv", tmp_path / "g.csv"
        before.write_text(cp.write_candidates_csv([tp] + fps))
        after.write_text(cp.write_candidates_csv([tp] + fps[:1]))
        gtp.write_text(cp.write_annotations_csv(gt))
        out = tmp_path / "r.json"
        assert run("eval", "fp-report", "--before", str(before), "--after", str(after),
                   "--annotations", str(gtp), "--output", str(out)) == 0
        payload = json.loads(out.read_text())
        assert payload["fp_before"] == 4 and payload["fp_after"] == 1
        assert payload["percent_reduction"] == 75.0
        assert payload["sensitivity_before"] == payload["sensitivity_after"] == 1.0


class TestPipelineRun:
    def test_end_to_end_and_determinism(self, phantom_dir, model_path, tmp_path):
        outs = []
        for name in ("run1", "run2"):
            out_dir = tmp_path / name
            assert run(
                "pipeline", "run", "--volumes", str(phantom_dir),
                "--model", str(model_path), "--out-dir", str(out_dir),
                "--annotations", str(phantom_dir / "annotations.csv"),
                "--seed", "7",
            ) == 0
            outs.append(out_dir)
        expected = {
            "candidates_before.csv", "candidates_after.csv",
            "froc_before.json", "froc_before.csv", "froc_before_curve.dat",
            "froc_after.json", "froc_after.csv", "froc_after_curve.dat",
            "fp_report.json", "manifest.json",
        }
        assert expected <= {p.name for p in outs[0].iterdir()}
        for name in expected - {"manifest.json"}:  # manifest carries a timestamp
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_jobs_flag_matches_serial(self, phantom_dir, model_path, tmp_path):
        serial, parallel = tmp_path / "serial", tmp_path / "parallel"
        for out_dir, jobs in ((serial, "1"), (parallel, "2")):
            assert run(
                "pipeline", "run", "--volumes", str(phantom_dir),
                "--model", str(model_path), "--out-dir", str(out_dir),
                "--jobs", jobs,
            ) == 0
        assert (serial / "candidates_after.csv").read_bytes() == (
            parallel / "candidates_after.csv"
        ).read_bytes()

    def test_candidates_csv_source(self, phantom_dir, model_path, tmp_path):
        detected = tmp_path / "cands.csv"
        run("candidates", "detect", "--volume", str(phantom_dir / "scan001.mhd"),
            "--output", str(detected))
        out_dir = tmp_path / "csvrun"
        assert run(
            "pipeline", "run", "--volumes", str(phantom_dir),
            "--model", str(model_path), "--out-dir", str(out_dir),
            "--candidates", str(detected),
        ) == 0
        before = cp.load_candidates_csv((out_dir / "candidates_before.csv").read_text())
        assert all(c.scan_id == "scan001" for c in before)

    def test_config_file_defaults(self, phantom_dir, model_path, tmp_path):
        config = tmp_path / "conf.json"
        config.write_text(json.dumps({"hs2_threshold": 0.9, "min_score": 0.2}))
        out_dir = tmp_path / "confrun"
        assert run(
            "pipeline", "run", "--volumes", str(phantom_dir),
            "--model", str(model_path), "--out-dir", str(out_dir),
            "--config", str(config),
        ) == 0
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["config"]["hs2_threshold"] == 0.9
        assert manifest["config"]["min_score"] == 0.2

    def test_missing_model_is_io_error(self, phantom_dir, tmp_path):
        assert run(
            "pipeline", "run", "--volumes", str(phantom_dir),
            "--model", str(tmp_path / "ghost.bin"), "--out-dir", str(tmp_path / "x"),
        ) == 2
