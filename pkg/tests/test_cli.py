from pathlib import Path

import pytest
import torch

from dive import config as C
from dive.cli import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, build_parser, main
from dive.data import ingest_manifest
from dive.diffusion import NoiseSchedule, ToyUNet, save_checkpoint
from dive.prompts import PromptEncoder, TokenRegistry
from dive.report import MetricReport
from dive.toy import make_toy_corpus
from helpers import TINY, WORDS

GOLDEN = Path(__file__).parent / "golden" / "help.txt"
SMALL = ["--image-size", "8x4", "--sampler-steps", "2"]


@pytest.fixture
def toy(tmp_path):
    return make_toy_corpus(tmp_path / "toy", 2, 2, 1, (8, 4), seed=0)


@pytest.fixture
def tiny_base(tmp_path):
    torch.manual_seed(0)
    path = tmp_path / "base.pt"
    save_checkpoint(path, ToyUNet(TINY), TokenRegistry(WORDS, dim=TINY.text_dim),
                    PromptEncoder(TINY.text_dim), NoiseSchedule())
    return path


def test_precedence_file_env_flag(tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("# run\nlearning_rate = 0.1\nbatch_size = 3  # small\nseed = 4\n")
    env = C.env_overrides({"DIVE_LEARNING_RATE": "0.2", "DIVE_SEED": "5", "OTHER": "x"})
    cfg = C.layered(C.read_config_file(cfg_file), env, {"seed": "6", "jobs": None})
    assert cfg["learning_rate"] == 0.2 and cfg["batch_size"] == 3 and cfg["seed"] == 6
    assert cfg["jobs"] == C.default("jobs")


def test_config_errors(tmp_path):
    bad = tmp_path / "c.cfg"
    bad.write_text("nonsense = 1\n")
    with pytest.raises(C.ConfigError, match="unknown key"):
        C.read_config_file(bad)
    with pytest.raises(C.ConfigError):
        C.layered(flag_values={"batch_size": "many"})
    assert main(["stats", "--manifest", "m.tsv", "--config", str(bad)]) == EXIT_USAGE


def test_snapshot_reads_back(tmp_path):
    cfg = C.layered(flag_values={"image_size": "16x8", "horizontal_flip": "off"})
    path = C.write_snapshot(cfg, tmp_path, "train", {"vi": "a.tsv"})
    text = path.read_text()
    assert text.startswith("# dive train\n# vi: a.tsv\n")
    assert C.layered(C.read_config_file(path)) == cfg


def test_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["expand", "--vi", "a", "--ext", "b", "--out", "o"]) == EXIT_USAGE
    assert "--checkpoint" in capsys.readouterr().err
    assert main(["train", "--bogus"]) == EXIT_USAGE


def test_help_matches_golden(monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    text = build_parser().format_help()
    assert text == GOLDEN.read_text(encoding="utf-8")
    for key in C.KEY_DOCS:
        assert key in text


def test_stats_and_ingest(toy, tmp_path, capsys):
    assert main(["stats", "--manifest", str(toy.root / "vi.tsv")]) == EXIT_OK
    assert "identities" in capsys.readouterr().out
    out = tmp_path / "ingested"
    assert main(["ingest", "--layout", "manifest", "--root", str(toy.root / "vi.tsv"),
                 "--out", str(out)]) == EXIT_OK
    assert ingest_manifest(out / "manifest.tsv").records == toy.vi.records
    assert (out / "effective-config.txt").exists()


def test_data_errors(tmp_path, capsys):
    bad = tmp_path / "m.tsv"
    bad.write_text("a.png\t1\tthermal\t0\tds\n")
    assert main(["stats", "--manifest", str(bad)]) == EXIT_DATA
    assert "line 1" in capsys.readouterr().err
    assert main(["stats", "--manifest", str(tmp_path / "missing.tsv")]) == EXIT_DATA


def test_numerical_failure_exit_code(toy, tiny_base, tmp_path, monkeypatch):
    import dive.training as T

    def boom(*a, **k):
        return torch.tensor(float("nan"))

    monkeypatch.setattr(T, "training_loss", boom)
    code = main(["train", "--vi", str(toy.root / "vi.tsv"), "--ext",
                 str(toy.root / "external.tsv"), "--base", str(tiny_base), "--out",
                 str(tmp_path / "run"), "--lora-rank", "2", *SMALL])
    assert code == EXIT_NUMERICAL


def test_train_sample_expand_evaluate(toy, tiny_base, tmp_path, capsys):
    vi, ext = str(toy.root / "vi.tsv"), str(toy.root / "external.tsv")
    run = tmp_path / "run"
    args = ["--lora-rank", "2", "--total-steps", "4", "--batch-size", "4",
            "--checkpoint-every", "2", *SMALL]
    assert main(["train", "--vi", vi, "--ext", ext, "--base", str(tiny_base), "--out", str(run),
                 *args]) == EXIT_OK
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == [
        "step-000002.pt", "step-000004.pt"]
    assert len((run / "loss_curve.tsv").read_text().splitlines()) == 4

    resumed = tmp_path / "resumed"
    assert main(["train", "--vi", vi, "--ext", ext, "--base", str(tiny_base), "--out",
                 str(resumed), "--resume", str(run / "checkpoints" / "step-000002.pt"),
                 *args]) == EXIT_OK
    assert (resumed / "loss_curve.tsv").read_text() == (run / "loss_curve.tsv").read_text()

    ck = str(run / "checkpoint.pt")
    assert main(["sample", "--checkpoint", ck, "--identity", "0", "--namespace", "toyext",
                 "--camera", "1", "--view-dataset", "toyvi", "--n", "2", "--out",
                 str(tmp_path / "samples"), *SMALL]) == EXIT_OK
    assert len(list((tmp_path / "samples").glob("*.png"))) == 2
    assert main(["sample", "--checkpoint", ck, "--identity", "9", "--namespace", "toyext",
                 "--camera", "1", "--view-dataset", "toyvi", "--out",
                 str(tmp_path / "s2"), *SMALL]) == EXIT_DATA

    exp = tmp_path / "exp"
    assert main(["expand", "--checkpoint", ck, "--vi", vi, "--ext", ext, "--out", str(exp),
                 "--images-per-view", "2", *SMALL]) == EXIT_OK
    syn = ingest_manifest(exp / "synthetic.tsv")
    assert len(syn) == 2 * 2 * 2 and syn.identity_set == {2, 3}

    assert main(["evaluate", "--query", vi, "--gallery", vi, "--fid-real",
                 str(exp / "synthetic.tsv"), "--out", str(tmp_path / "ev"), *SMALL]) == EXIT_OK
    report = MetricReport.load(tmp_path / "ev" / "report.json")
    assert report.fid is not None and report.counts["queries"] == 8
    assert report.retrieval["evaluated"] == 8
    assert "mAP" in capsys.readouterr().out
