import json
import shutil

import pytest

from restorl import pipeline
from restorl.cli import main
from restorl.config import load_config
from restorl.metrics import RunStore
from restorl.model import Checkpoint, model_digest
from restorl.training import RLTrainer

from conftest import write_config


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_train_rl_without_sft_is_dependency_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml")
    assert run(capsys, "make-data", "--config", cfg, "--output-dir", tmp_path / "r")[0] == 0
    code, _, err = run(capsys, "train-rl", "--config", cfg, "--output-dir", tmp_path / "r")
    assert code == pipeline.EXIT_DEPENDENCY
    assert "sft.ckpt" in err and "train-sft" in err


def test_train_sft_without_data_names_the_stage(tmp_path, capsys):
    code, _, err = run(capsys, "train-sft", "--output-dir", tmp_path / "r")
    assert code == pipeline.EXIT_DEPENDENCY and "make-data" in err


@pytest.mark.parametrize("override", ["rl.nonsense=1", "rl.clip_eps=abc", "rl.clip_eps=1.5", "rl.reward=magic",
                                      "noequals"])
def test_bad_config_is_config_error(tmp_path, capsys, override):
    code, _, err = run(capsys, "make-data", "-o", override, "--output-dir", tmp_path / "r")
    assert code == pipeline.EXIT_CONFIG and "config error" in err


def test_unknown_variant_is_config_error(run_copy, capsys):
    cfg, out = run_copy
    code, _, _ = run(capsys, "ablate", "--config", cfg, "--output-dir", out, "--variants", "bogus")
    assert code == pipeline.EXIT_CONFIG


def test_locked_run_directory(tmp_path, capsys):
    out = tmp_path / "r"
    out.mkdir()
    (out / pipeline.LOCK_NAME).write_text("123")
    code, _, err = run(capsys, "make-data", "--output-dir", out)
    assert code == pipeline.EXIT_RUNTIME and "locked" in err
    assert (out / pipeline.LOCK_NAME).exists()


def test_lock_released_after_failure(tmp_path, capsys):
    out = tmp_path / "r"
    assert run(capsys, "train-sft", "--output-dir", out)[0] == pipeline.EXIT_DEPENDENCY
    assert not (out / pipeline.LOCK_NAME).exists()


def test_external_reward_without_endpoint(run_copy, capsys, monkeypatch):
    from restorl.external import ENDPOINT_ENV

    monkeypatch.delenv(ENDPOINT_ENV, raising=False)
    cfg, out = run_copy
    code, _, err = run(capsys, "train-rl", "--config", cfg, "--output-dir", out, "-o", "rl.reward=external")
    assert code == pipeline.EXIT_DEPENDENCY and ENDPOINT_ENV in err


def test_full_stage_sequence(tmp_path, capsys):
    cfg, out = write_config(tmp_path / "c.yaml"), tmp_path / "r"
    common = ["--config", cfg, "--output-dir", out]
    assert run(capsys, "make-data", *common)[0] == 0
    code, text, _ = run(capsys, "train-sft", *common)
    assert code == 0 and text.startswith("sft\tstep\t20")
    code, text, _ = run(capsys, "train-scorer", *common)
    assert code == 0 and "spearman_vs_severity\t" in text
    code, text, _ = run(capsys, "train-rl", *common)
    assert code == 0 and "iteration\t3" in text.splitlines()
    code, text, _ = run(capsys, "evaluate", *common)
    assert code == 0 and "psnr\t" in text and json.loads((out / "eval.json").read_text())["checkpoint"].endswith("rl.ckpt")
    code, text, _ = run(capsys, "report", *common)
    assert code == 0 and "smoothed_spearman" in text
    assert (out / "report" / "reward_curve.png").exists()

    # self-describing run directory
    info = json.loads((out / "run.json").read_text())
    assert info["code_version"] == pipeline.code_version()
    assert set(info["stages"]) == {"make-data", "train-sft", "train-scorer", "train-rl", "evaluate"}
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["seed"] == 3 and resolved["rl"]["iterations"] == 3
    assert not (out / pipeline.LOCK_NAME).exists()


def test_rerun_from_saved_config_reproduces_log(run_copy, tmp_path, capsys):
    cfg, out = run_copy
    assert run(capsys, "train-rl", "--config", cfg, "--output-dir", out)[0] == 0
    saved = tmp_path / "saved.json"
    saved.write_text((out / "config.json").read_text())
    other = tmp_path / "again"
    shutil.copytree(out, other, ignore=shutil.ignore_patterns("metrics.jsonl", "rl.ckpt", "report"))
    # the saved config points at the original run's paths; only the output directory changes
    assert run(capsys, "train-rl", "--config", saved, "--output-dir", other)[0] == 0
    assert (other / "metrics.jsonl").read_bytes() == (out / "metrics.jsonl").read_bytes()


def test_rl_resume_after_crash_is_byte_identical(run_copy, tmp_path, monkeypatch):
    cfg_path, out = run_copy
    full = tmp_path / "full"
    shutil.copytree(out, full)
    cfg_full = load_config(cfg_path, output_dir=str(full))
    pipeline.cmd_train_rl(cfg_full)

    cfg = load_config(cfg_path, output_dir=str(out))
    real_step = RLTrainer.step

    def crashing(self):
        if self.iteration == 2:
            raise RuntimeError("simulated crash")
        return real_step(self)

    monkeypatch.setattr(RLTrainer, "step", crashing)
    with pytest.raises(RuntimeError):
        pipeline.cmd_train_rl(cfg)
    assert [r.iteration for r in RunStore(out / "metrics.jsonl").records()] == [0, 1, 2]
    assert Checkpoint.load(out / "rl.ckpt").step == 2
    monkeypatch.setattr(RLTrainer, "step", real_step)
    pipeline.cmd_train_rl(cfg, resume=True)
    assert (out / "metrics.jsonl").read_bytes() == (full / "metrics.jsonl").read_bytes()
    assert model_digest(Checkpoint.load(out / "rl.ckpt").model) == model_digest(Checkpoint.load(full / "rl.ckpt").model)


def test_sft_resume_is_exact(run_copy, tmp_path):
    cfg_path, out = run_copy
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        d.mkdir()
    data = ["paths.data_dir=" + str(out / "data")]
    full = load_config(cfg_path, data, output_dir=str(a))
    pipeline.cmd_train_sft(full)
    half = load_config(cfg_path, data + ["sft.steps=10"], output_dir=str(b))
    pipeline.cmd_train_sft(half)
    with pytest.raises(pipeline.DependencyError, match="incomplete"):
        pipeline.load_sft(load_config(cfg_path, data, output_dir=str(b)), pipeline.schedule_for(full))
    pipeline.cmd_train_sft(load_config(cfg_path, data, output_dir=str(b)), resume=True)
    assert model_digest(Checkpoint.load(a / "sft.ckpt").model) == model_digest(Checkpoint.load(b / "sft.ckpt").model)
    assert (a / "sft_metrics.jsonl").read_bytes() == (b / "sft_metrics.jsonl").read_bytes()


def test_ablate_grid_two_by_two(run_copy, capsys):
    cfg, out = run_copy
    code, text, _ = run(capsys, "ablate", "--config", cfg, "--output-dir", out, "-o", "rl.iterations=2",
                        "--grid", "rl.clip_eps=0.1,0.3", "--grid", "rl.mix=0,1")
    assert code == 0
    runs = sorted(p.name for p in (out / "runs").iterdir())
    assert len(runs) == 4 and "rl.clip_eps=0.1__rl.mix=0" in runs
    for r in runs:
        assert (out / "runs" / r / "metrics.jsonl").exists()
        assert json.loads((out / "runs" / r / "config.json").read_text())["rl"]["iterations"] == 2
    lines = (out / "ablation.tsv").read_text().splitlines()
    assert lines[0].startswith("label\tpsnr") and len(lines) == 1 + 1 + 4
    assert text == (out / "ablation.tsv").read_text()
    assert (out / "ablation.txt").exists()


def test_ablate_variant_rows(run_copy, capsys):
    cfg, out = run_copy
    code, _, _ = run(capsys, "ablate", "--config", cfg, "--output-dir", out, "-o", "rl.iterations=2",
                     "--variants", "with_rec,wo_wi")
    assert code == 0
    labels = [r["label"] for r in json.loads((out / "ablation.json").read_text())]
    assert labels == ["baseline", "+Diff.SFT", "+RL", "with Rec.", "w/o w_i"]
    note = json.loads((out / "ablation_instability.json").read_text())
    assert set(note) == {"iqa_reward_diff_var", "reconstruction_reward_diff_var", "reconstruction_rougher"}
    # resume skips completed runs and reproduces the table
    before = (out / "ablation.tsv").read_bytes()
    assert run(capsys, "ablate", "--config", cfg, "--output-dir", out, "-o", "rl.iterations=2",
               "--variants", "with_rec,wo_wi", "--resume")[0] == 0
    assert (out / "ablation.tsv").read_bytes() == before


def test_parse_grid():
    assert pipeline.parse_grid(["a.b=1,2", "c=x"]) == [["a.b=1", "c=x"], ["a.b=2", "c=x"]]
    from restorl.config import ConfigError

    with pytest.raises(ConfigError):
        pipeline.parse_grid(["a.b="])


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "restorl", "report", "--output-dir", str(tmp_path / "e")],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0 and proc.stdout.startswith("empty run")
