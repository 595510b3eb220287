import json

import numpy as np
import pytest

from dcnet.cli import main
from dcnet.volio import read_manifest, read_model, read_volume

FAST_CONFIG = {
    "training": {
        "epochs": 2,
        "batch_size": 64,
        "learning_rate": 1e-3,
        "split_mode": "by_subject",
        "split_ratio": [3, 1],
    },
    "max_dcs_per_subject": 30,
    "folds": 1,
}


@pytest.fixture(scope="module")
def fast_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "fast.json"
    path.write_text(json.dumps(FAST_CONFIG))
    return path


class TestGenPhantom:
    def test_from_spec_file(self, tmp_path):
        from dcnet.phantom import scenario_a

        spec_path = tmp_path / "spec.json"
        spec_path.write_text(scenario_a(subjects_per_class=2, grid=(8, 8, 8)).to_json())
        assert main(["gen-phantom", "--spec", str(spec_path), "--out", str(tmp_path / "coh")]) == 0
        manifest = read_manifest(tmp_path / "coh" / "manifest.json")
        assert len(manifest.subjects) == 4

    def test_spec_xor_scenario(self, tmp_path, capsys):
        assert main(["gen-phantom", "--out", str(tmp_path / "x")]) == 2
        assert "error" in capsys.readouterr().err

    def test_seed_override_changes_output(self, tmp_path):
        from dcnet.phantom import scenario_a

        spec_path = tmp_path / "spec.json"
        spec_path.write_text(scenario_a(subjects_per_class=1, grid=(8, 8, 8)).to_json())
        main(["--seed", "1", "gen-phantom", "--spec", str(spec_path), "--out", str(tmp_path / "c1")])
        main(["--seed", "2", "gen-phantom", "--spec", str(spec_path), "--out", str(tmp_path / "c2")])
        b1 = (tmp_path / "c1" / "cn_000.dcb").read_bytes()
        b2 = (tmp_path / "c2" / "cn_000.dcb").read_bytes()
        assert b1 != b2


class TestPipelineCommands:
    def test_fit_sh_and_metrics(self, micro_cohort, tmp_path):
        entry = micro_cohort.subjects[0]
        vol = str(micro_cohort.volume_path(entry))
        mask = str(micro_cohort.mask_path(entry))
        assert main(["fit-sh", "--in", vol, "--mask", mask, "--nmax", "6", "--out", str(tmp_path)]) == 0
        coeffs = read_volume(tmp_path / "coeffs.dcb")
        assert coeffs.data.shape[-1] == 28
        assert main(["metrics", "--in", vol, "--mask", mask, "--out", str(tmp_path / "m.csv")]) == 0
        lines = (tmp_path / "m.csv").read_text().strip().splitlines()
        assert lines[0] == "x,y,z,md,fa,cl,cp,dv,asd,de,cvd"
        assert len(lines) == 1 + 5 ** 3  # 9^3 grid, margin 2 -> 5^3 ROI voxels

    def test_train_then_predict(self, micro_cohort, fast_config_file, tmp_path, capsys):
        manifest_path = str(micro_cohort.root / "manifest.json")
        model_path = tmp_path / "model.mdl"
        rc = main(["--seed", "3", "train", "--manifest", manifest_path,
                   "--config", str(fast_config_file), "--out", str(model_path)])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.startswith("epoch,mean_loss,train_pa,valid_pa")
        assert model_path.exists() and (tmp_path / "model.mdl.history.csv").exists()
        params, header = read_model(model_path)
        assert header["seed"] == 3

        entry = micro_cohort.subjects[0]
        rc = main(["predict", "--model", str(model_path),
                   "--in", str(micro_cohort.volume_path(entry)),
                   "--mask", str(micro_cohort.mask_path(entry)),
                   "--out", str(tmp_path / "psic.dcb")])
        assert rc == 0
        scores = read_volume(tmp_path / "psic.dcb")
        inner = scores.data[3:6, 3:6, 3:6, 0]  # cube centers need the full neighbourhood
        assert np.all((inner >= 0) & (inner <= 1))

    def test_evaluate_report_shape(self, micro_cohort, fast_config_file, tmp_path):
        rc = main(["--seed", "0", "evaluate", "--manifest", str(micro_cohort.root / "manifest.json"),
                   "--config", str(fast_config_file), "--out", str(tmp_path / "report.csv")])
        assert rc == 0
        lines = (tmp_path / "report.csv").read_text().strip().splitlines()
        assert lines[0] == "roi,kind,MD,FA,CL,CP,DV,ASD,DE,CVD,LR,DNN"
        assert len(lines) == 5
        kinds = [line.split(",")[1] for line in lines[1:]]
        assert kinds == ["auc_subject", "pa_subject_youden", "pa_subject_fixed", "pa_dc_valid"]
        # ten classifier columns populated on the AUC row
        assert all(cell != "" for cell in lines[1].split(",")[2:])

    def test_missing_file_no_partial_outputs(self, tmp_path, capsys):
        out = tmp_path / "never.csv"
        rc = main(["evaluate", "--manifest", str(tmp_path / "absent.json"), "--out", str(out)])
        assert rc == 2
        assert not out.exists()
        assert "not found" in capsys.readouterr().err
