import dataclasses
import json

import numpy as np
import pandas as pd
import pytest
import yaml

from bioage import experiment
from bioage.cli import main
from bioage.evaluation import GapTable
from bioage.experiment import (
    ExperimentConfig,
    RunManifest,
    emit_report,
    run_experiment,
)

SMALL = {"n_subjects": 1200}


def _cfg(tmp_path, **kw):
    base = dict(generator=SMALL, populations=["normal"], feature_sets=["base"], models=["kdm"], sexes=["male"],
                seeds=[0], out=str(tmp_path / "res"))
    base.update(kw)
    return ExperimentConfig(**base)


def test_every_result_field_changes_the_hash(tmp_path):
    ref = _cfg(tmp_path)
    changes = {
        "generator": {"n_subjects": 1300}, "cohort": "somewhere", "cohort_seed": 3, "populations": ["whole"],
        "feature_sets": ["morbidity_related"], "models": ["cac"], "sexes": ["female"], "seeds": [1],
        "weights": dataclasses.replace(ref.weights, mort=2.0), "train": dataclasses.replace(ref.train, seed=9),
        "dnn": dataclasses.replace(ref.dnn, max_epochs=3), "kdm": {"variant": "with_ca"},
        "cac": {"bin_width_years": 10.0, "k_neighbors": 3, "eps": 1e-6}, "split_ratios": (0.6, 0.2, 0.2),
        "deterministic": False,
    }
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    assert set(changes) | set(ExperimentConfig.UNHASHED) == names
    for key, value in changes.items():
        assert dataclasses.replace(ref, **{key: value}).hash() != ref.hash(), key
    assert dataclasses.replace(ref, out="elsewhere", workers=2).hash() == ref.hash()


def test_config_yaml_roundtrip_and_rejections(tmp_path):
    cfg = _cfg(tmp_path)
    cfg.save(tmp_path / "c.yaml")
    assert ExperimentConfig.load(tmp_path / "c.yaml") == cfg
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError, match="unknown models"):
        _cfg(tmp_path, models=["gbm"])
    with pytest.raises(ValueError):
        _cfg(tmp_path, seeds=[1, 1])


def test_flags_override_file_over_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"models": ["cac"], "populations": ["whole"],
                                                     "train": {"max_epochs": 7}}))
    from bioage.cli import _config, build_parser

    args = build_parser().parse_args(["report", "--config", str(tmp_path / "c.yaml"), "--model", "kdm"])
    cfg = _config(args)
    assert cfg.models == ["kdm"]  # flag
    assert cfg.populations == ["whole"] and cfg.train.max_epochs == 7  # file
    assert cfg.train.batch_size == experiment.DESK_TRAIN.batch_size  # default
    assert cfg.feature_sets == ExperimentConfig().feature_sets


@pytest.fixture(scope="module")
def kdm_grid(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("grid")
    cfg = _cfg(tmp, sexes=["male", "female"], seeds=[0, 1, 2])
    return cfg, run_experiment(cfg)


def test_grid_runs_every_cell_and_seed(kdm_grid):
    cfg, manifest = kdm_grid
    assert len(manifest.runs) == 6 and not manifest.failures
    assert {r.key for r in manifest.runs} == {f"{s}_normal_base_kdm/seed{k}" for s in ("male", "female")
                                               for k in (0, 1, 2)}
    assert RunManifest.load(cfg.out).to_dict() == manifest.to_dict()


def test_identical_configs_give_identical_tables(kdm_grid, tmp_path):
    cfg, manifest = kdm_grid
    again = run_experiment(dataclasses.replace(cfg, out=str(tmp_path / "again")))
    for a, b in zip(manifest.runs, again.runs):
        for art in ("gap_table", "mortality", "estimates"):
            assert open(a.artifacts[art]).read() == open(b.artifacts[art]).read(), (a.key, art)


def test_report_tables_are_seed_averages(kdm_grid, tmp_path):
    _, manifest = kdm_grid
    out = emit_report(manifest, tmp_path / "rep", plots=False)
    runs = [r for r in manifest.runs if r.sex == "male"]
    per_seed = [GapTable.from_csv(r.artifacts["gap_table"]).cells for r in runs]
    report = pd.read_csv(out / "tables" / "gap_male_normal_base_kdm.csv").set_index("group")
    for group, state in (("overall", "healthy"), ("overall", "unhealthy"), ("dm", "normal"), ("dm", "pre")):
        vals = [c[(c["group"] == group) & (c["state"] == state)]["mean"].iloc[0] for c in per_seed]
        assert report.loc[group, state] == pytest.approx(np.nanmean(vals), abs=2e-6, nan_ok=True)
    mort = pd.read_csv(out / "tables" / "mortality_male_normal_base_kdm.csv")
    seeds = pd.concat([pd.read_csv(r.artifacts["mortality"]) for r in runs])
    expected = seeds.groupby("mode", sort=False)["slope"].mean()
    np.testing.assert_allclose(mort.set_index("mode").loc[expected.index, "slope"], expected, atol=2e-6)


def test_report_is_byte_identical_on_reemission(kdm_grid, tmp_path):
    _, manifest = kdm_grid
    a = emit_report(manifest, tmp_path / "a", plots=False)
    b = emit_report(manifest, tmp_path / "b", plots=False)
    files = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    assert len(files) == 2 * 2 + 2 * 2  # gap, mortality, survival, binned for two cells
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_empty_and_single_cell_reports(tmp_path):
    empty = RunManifest("h", {}, str(tmp_path / "e"))
    out = emit_report(empty, plots=False)
    assert [p.name for p in out.rglob("*") if p.is_file()] == ["manifest.json"]


def test_single_cell_report_with_plots(tmp_path):
    cfg = _cfg(tmp_path, models=["cac"])
    manifest = run_experiment(cfg)
    out = emit_report(manifest)
    tables = sorted(p.name for p in (out / "tables").iterdir())
    assert tables == ["gap_male_normal_base_cac.csv", "mortality_male_normal_base_cac.csv"]
    assert {p.suffix for p in (out / "plots").iterdir()} == {".png"}


def test_failed_cell_is_recorded_and_others_survive(tmp_path, monkeypatch):
    real = experiment.fit_estimator

    def broken(model, *args, **kwargs):
        if model == "cac":
            raise RuntimeError("boom")
        return real(model, *args, **kwargs)

    monkeypatch.setattr(experiment, "fit_estimator", broken)
    manifest = run_experiment(_cfg(tmp_path, models=["kdm", "cac"]))
    assert [r.model for r in manifest.failures] == ["cac"]
    assert "boom" in manifest.failures[0].error
    out = emit_report(manifest, plots=False)
    assert (out / "tables" / "gap_male_normal_base_kdm.csv").exists()
    assert not (out / "tables" / "gap_male_normal_base_cac.csv").exists()


def test_resume_skips_completed_runs(tmp_path, monkeypatch):
    cfg = _cfg(tmp_path)
    first = run_experiment(cfg)

    def refuse(*args, **kwargs):
        raise RuntimeError("refit")

    monkeypatch.setattr(experiment, "fit_estimator", refuse)
    again = run_experiment(cfg)
    assert [r.status for r in again.runs] == ["ok"]
    assert again.runs[0].artifacts == first.runs[0].artifacts
    # a changed config is not resumed
    changed = run_experiment(dataclasses.replace(cfg, cohort_seed=5))
    assert "refit" in changed.failures[0].error


def test_cli_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"generator": SMALL, "seeds": [0]}))
    cohort = tmp_path / "cohort"
    assert main(["generate", "--config", str(cfg), "--seed", "3", "--out", str(cohort)]) == 0
    assert "1200 subjects" in capsys.readouterr().out

    assert main(["analyze", "--cohort", str(cohort), "--population", "whole", "--out", str(tmp_path / "an")]) == 0
    report = pd.read_csv(tmp_path / "an" / "correlation_whole.csv")
    assert len(report) > 0

    common = ["--cohort", str(cohort), "--sex", "female", "--population", "normal", "--features", "base"]
    assert main(["train", *common, "--model", "kdm", "--out", str(tmp_path / "tr")]) == 0
    ckpt = tmp_path / "tr" / "female_normal_base_kdm_seed0.pt"
    assert ckpt.exists()
    with pytest.raises(SystemExit, match="exactly one"):
        main(["train", "--cohort", str(cohort), "--out", str(tmp_path / "x")])

    capsys.readouterr()
    assert main(["evaluate", *common, "--checkpoint", str(ckpt), "--out", str(tmp_path / "ev")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n_test"] > 0 and 0 < summary["slope"] < 2
    assert (tmp_path / "ev" / "gap_table.csv").exists()

    run_out = tmp_path / "run"
    assert main(["run", *common, "--model", "cac", "--config", str(cfg), "--out", str(run_out), "--no-plots"]) == 0
    assert (run_out / "tables" / "gap_female_normal_base_cac.csv").exists()
    (run_out / "tables" / "gap_female_normal_base_cac.csv").unlink()
    assert main(["report", "--out", str(run_out), "--no-plots"]) == 0
    assert (run_out / "tables" / "gap_female_normal_base_cac.csv").exists()
