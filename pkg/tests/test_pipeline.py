import json

import pytest

from alignrec import cli, pipeline
from alignrec.errors import ArtifactError
from alignrec.pipeline import PipelineConfig

TINY = {
    "synth": {"n_users": 40, "n_items": 40, "max_len": 8},
    "embed": {"dim": 8, "epochs": 5},
    "tokenize": {"levels": 2, "codes_per_level": 6},
    "corpus": {"nsr": "1:1"},
    "train": {"steps": 10, "batch_size": 4, "warmup_steps": 2, "log_every": 0,
              "model": {"model_dim": 16, "n_layers": 1, "n_heads": 2, "ff_dim": 32,
                        "context_len": 96}},
    "cache": {"k": 10, "beam_width": 12},
}


def tiny_config(out, **extra):
    cfg = PipelineConfig.from_dict({**TINY, "out": str(out), **extra})
    return cfg


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    cfg = tiny_config(tmp_path_factory.mktemp("run"))
    return cfg, pipeline.run_pipeline(cfg)


def test_smoke(tiny_run):
    cfg, result = tiny_run
    assert result.report is not None
    assert result.report.n_users == 40
    for name in pipeline.ARTIFACTS:
        assert name in result.artifacts, name
    body = json.loads(result.artifacts["metrics"].read_text())
    assert {"hr@1", "hr@5", "hr@10", "ndcg@5", "ndcg@10"} <= set(body)


def test_rerun_identical(tiny_run, tmp_path):
    cfg, first = tiny_run
    again = pipeline.run_pipeline(tiny_config(tmp_path))
    assert again.report == first.report
    assert again.report.ranked == first.report.ranked


def test_missing_codebook(tiny_run, tmp_path):
    cfg, result = tiny_run
    import shutil
    out = tmp_path / "copy"
    shutil.copytree(cfg.out, out)
    (out / "codebook.txt").unlink()
    with pytest.raises(ArtifactError, match="missing artifact: codebook"):
        pipeline.run_stage("corpus", tiny_config(out))


def test_stage_standalone(tiny_run, tmp_path):
    cfg, result = tiny_run
    import shutil
    out = tmp_path / "copy"
    shutil.copytree(cfg.out, out)
    (out / "metrics.json").unlink()
    report = pipeline.run_stage("eval", tiny_config(out))
    assert report == result.report
    live = pipeline.run_stage("eval", tiny_config(out, eval={"mode": "live"}))
    assert live.ranked == report.ranked and live.metrics == report.metrics


def test_config_unknown_key():
    with pytest.raises(ValueError, match="unknown config key"):
        PipelineConfig.from_dict({"train": {"stepz": 3}})


def test_config_set_and_seeds():
    cfg = PipelineConfig()
    cfg.set("train.model.n_layers", 3)
    assert cfg.train.model.n_layers == 3
    assert cfg.stage_seed("embed") != cfg.stage_seed("train")
    cfg.tokenize.seed = 7
    assert cfg.stage_seed("tokenize") == 7
    with pytest.raises(ValueError):
        cfg.set("train.bogus", 1)


def test_config_roundtrip(tmp_path):
    cfg = tiny_config(tmp_path)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert PipelineConfig.load(tmp_path / "c.json") == cfg


def test_cli_codes(tiny_run, tmp_path, capsys):
    cfg, _ = tiny_run
    assert cli.main(["lookup", "user0001", "--out", cfg.out]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 10 and lines[0].startswith("1\t")
    assert cli.main(["lookup", "nobody", "--out", cfg.out]) == 2
    assert cli.main(["corpus", "--out", str(tmp_path / "empty")]) == 2
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["train", "--set", "train.nope=1"]) == 1
    assert cli.main([]) == 1


def test_cli_flags_override_config(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({**TINY, "seed": 4, "out": "elsewhere"}))
    args = cli.build_parser().parse_args(["synth", "--config", str(tmp_path / "c.json"),
                                          "--seed", "9", "--out", str(tmp_path / "o"),
                                          "--set", "synth.n_items=12"])
    cfg = cli.load_config(args)
    assert cfg.seed == 9 and cfg.out == str(tmp_path / "o") and cfg.synth.n_items == 12


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_nan_exit(tiny_run, tmp_path, capsys):
    cfg, _ = tiny_run
    import shutil
    out = tmp_path / "copy"
    shutil.copytree(cfg.out, out)
    (tmp_path / "c.json").write_text(json.dumps({**TINY, "out": str(out)}))
    code = cli.main(["train", "--config", str(tmp_path / "c.json"),
                     "--set", "train.learning_rate=1e308", "--set", "train.grad_clip=null",
                     "--set", "train.warmup_steps=0", "--set", "train.steps=4"])
    assert code == 3
    assert "step" in capsys.readouterr().err
