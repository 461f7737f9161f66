import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from mortgam import cli
from test_ingest import make_hmd_text


def write_tables(tmp_path, years, seed=0):
    """Synthetic HMD deaths/exposures files with a plausible age profile."""
    rng = np.random.default_rng(seed)
    exposure = 2e4

    def rate(age):
        if age == 0:
            return 0.004
        return max(3e-4, 2e-5 * np.exp(0.085 * age))

    deaths_cache = {}

    def deaths(year, age):
        key = (year, age)
        if key not in deaths_cache:
            lam = exposure * rate(age) * np.exp(-0.01 * (year - years[0]))
            d = float(rng.poisson(lam))
            deaths_cache[key] = (d, d + 1.0, 2 * d + 1.0)
        return deaths_cache[key]

    deaths_path = tmp_path / "deaths.txt"
    exposures_path = tmp_path / "exposures.txt"
    deaths_path.write_text(make_hmd_text(years, fill=deaths))
    exposures_path.write_text(make_hmd_text(
        years, fill=lambda y, a: (exposure, exposure, 2 * exposure),
        title="Testland, Exposure to risk (period 1x1)"))
    return deaths_path, exposures_path


def write_config(tmp_path, **extra):
    years = list(range(2000, 2010))
    deaths, exposures = write_tables(tmp_path, years)
    config = {
        "deaths": str(deaths),
        "exposures": str(exposures),
        "fit_years": [2000, 2009],
        "age_max": 40,
        "menu": [30],
        "horizon": 5,
        "n_chains": 2,
        "n_iterations": 400,
        "warmup_fraction": 0.5,
        "thin": 1,
        "n_stacked_draws": 400,
        "seed": 7,
        "out": str(tmp_path / "out"),
    }
    config.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


class TestLoadConfig:
    def test_defaults_applied(self, tmp_path):
        path = write_config(tmp_path)
        config = cli.load_config(path)
        assert config.sex_mode == "single"
        assert config.target_acceptance == 0.8
        assert config.stack_mode == "stratified"

    def test_paper_protocol_defaults(self, tmp_path):
        # a config that does not override the sampling protocol gets the
        # 4 x 8000, half warm-up, thin 4 defaults and the 80-95 menu
        path = write_config(tmp_path)
        raw = json.loads(path.read_text())
        for key in ("menu", "n_chains", "n_iterations",
                    "warmup_fraction", "thin"):
            raw.pop(key)
        path.write_text(json.dumps(raw))
        config = cli.load_config(path)
        assert config.menu == list(range(80, 96))
        cfg = config.chain_config
        assert (cfg.n_chains, cfg.n_iterations, cfg.thin) == (4, 8000, 4)
        assert cfg.n_kept == 4000

    def test_unknown_key_lists_valid_ones(self, tmp_path):
        path = write_config(tmp_path)
        raw = json.loads(path.read_text())
        raw["chains"] = 4
        path.write_text(json.dumps(raw))
        with pytest.raises(ValueError) as err:
            cli.load_config(path)
        assert "chains" in str(err.value)
        assert "n_chains" in str(err.value)

    def test_holdback_invariants(self, tmp_path):
        path = write_config(tmp_path, holdback_from=2000)
        with pytest.raises(ValueError):
            cli.load_config(path)
        path = write_config(tmp_path, holdback_from=2050)
        with pytest.raises(ValueError):
            cli.load_config(path)

    def test_empty_menu_rejected(self, tmp_path):
        path = write_config(tmp_path, menu=[])
        with pytest.raises(ValueError):
            cli.load_config(path)

    def test_missing_paths_rejected(self, tmp_path):
        path = write_config(tmp_path)
        raw = json.loads(path.read_text())
        del raw["exposures"]
        path.write_text(json.dumps(raw))
        with pytest.raises(ValueError, match="exposures"):
            cli.load_config(path)

    def test_round_trip(self, tmp_path):
        path = write_config(tmp_path)
        a = cli.load_config(path)
        b = cli.load_config(path)
        assert a.values == b.values

    def test_overrides(self, tmp_path):
        path = write_config(tmp_path)
        config = cli.load_config(path, {"seed": 99, "menu": [25, 30]})
        assert config.seed == 99
        assert config.menu == [25, 30]


class TestIngestStage:
    def test_artifacts_and_audit(self, tmp_path):
        config = cli.load_config(write_config(tmp_path))
        cli.stage_ingest(config)
        out = Path(config.out)
        assert (out / "dataset_female.npz").exists()
        assert (out / "dataset_audit.csv").exists()
        ds = cli._load_dataset(config, "female")
        assert ds.ages[-1] == 40
        np.testing.assert_array_equal(ds.years,
                                      np.arange(2000, 2010))

    def test_manifest_records_stage(self, tmp_path):
        config = cli.load_config(write_config(tmp_path))
        cli.stage_ingest(config)
        manifest = json.loads(
            (Path(config.out) / "manifest.json").read_text())
        assert "ingest" in manifest["stages"]


@pytest.mark.slow
class TestPipelineEndToEnd:
    def test_full_run_artifacts_resume_and_determinism(self, tmp_path):
        config_path = write_config(tmp_path, holdback_from=2008,
                                   menu=[25, 30])
        runner = CliRunner()
        result = runner.invoke(cli.main,
                               ["run", "--config", str(config_path)])
        assert result.exit_code == 0, result.output
        out = Path(json.loads(config_path.read_text())["out"])

        # artifact set
        for name in ("manifest.json", "dataset_audit.csv",
                     "draws_x25.npz", "draws_x30.npz",
                     "diagnostics_x25.json", "loo_x25.json",
                     "weights.json", "weights.csv", "fan_logm_female.csv",
                     "fan_e0_female.csv", "coverage.csv"):
            assert (out / name).exists(), name

        weights = json.loads((out / "weights.json").read_text())
        total = sum(weights["weights"].values())
        assert total == pytest.approx(1.0, abs=1e-8)

        # fan file carries the documented levels
        fan_text = (out / "fan_logm_female.csv").read_text()
        for level in (2, 10, 90):
            assert f"lo{level}" in fan_text and f"hi{level}" in fan_text

        draws_before = (out / "draws_x25.npz").stat().st_mtime_ns
        fan_before = (out / "fan_logm_female.csv").read_bytes()

        # resumability: drop only the forecast stage outputs
        for f in out.glob("fan_*.csv"):
            f.unlink()
        for f in out.glob("stacked_logm_*.npz"):
            f.unlink()
        result = runner.invoke(cli.main, ["run", "--config",
                                          str(config_path), "--resume"])
        assert result.exit_code == 0, result.output
        assert (out / "draws_x25.npz").stat().st_mtime_ns == draws_before
        assert (out / "fan_logm_female.csv").read_bytes() == fan_before

    def test_single_model_menu_weight_is_one(self, tmp_path):
        config_path = write_config(tmp_path, menu=[30])
        config = cli.load_config(config_path)
        cli.run_pipeline(config)
        weights = json.loads(
            (Path(config.out) / "weights.json").read_text())
        assert weights["weights"] == {"30": 1.0}
        assert (Path(config.out) / "coverage.csv").exists() is False


class TestCliErrors:
    def test_bad_config_gives_stage_tagged_error(self, tmp_path):
        config_path = write_config(tmp_path, menu=[])
        runner = CliRunner()
        result = runner.invoke(cli.main,
                               ["ingest", "--config", str(config_path)])
        assert result.exit_code != 0
        assert "[ingest]" in result.output

    def test_menu_flag_parsing(self, tmp_path):
        config_path = write_config(tmp_path)
        config = cli._resolve(str(config_path), None, None, "25,30",
                              None, None)
        assert config.menu == [25, 30]
