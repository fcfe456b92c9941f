# -*- coding: utf-8 -*-
# file: test_settings_manager.py

import json

import pytest

from extarm.errors import ConfigError
from extarm.settings_manager import (OPTIONAL_BLOCKS, RESOLVED_CONFIG_FILE, apply_overrides, check_required,
                                     config_hash, load_settings, resolve_settings, save_settings,
                                     validate_settings)


def _write(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(payload if isinstance(payload, str) else json.dumps(payload), encoding="utf-8")
    return path


class TestValidation:

    def test_empty_config_resolves_to_defaults(self):
        settings = resolve_settings({})
        assert settings["seed"] == 0
        assert settings["crossfit"] == {"outer_folds": 5, "inner_folds": 3}
        for block in OPTIONAL_BLOCKS:
            assert settings[block] is None

    def test_optional_block_filled_from_defaults(self):
        settings = resolve_settings({"power": {"tau": 0.3}})
        assert settings["power"]["tau"] == 0.3
        assert settings["power"]["alpha"] == 0.05

    def test_nested_merge_keeps_siblings(self):
        settings = resolve_settings({"inference": {"bootstrap": {"enabled": True}}})
        assert settings["inference"]["bootstrap"]["replicates"] == 1000
        assert settings["inference"]["variance"] == "formula"

    def test_every_problem_is_reported(self):
        with pytest.raises(ConfigError) as info:
            validate_settings({"seed": "abc", "inference": {"bootstrp": {}}, "colour": 1})
        pointers = " ".join(info.value.pointers)
        assert "/seed (expected integer" in pointers
        assert "/inference/bootstrp (unknown key)" in pointers
        assert "/colour (unknown key)" in pointers

    def test_boolean_is_not_a_number(self):
        with pytest.raises(ConfigError):
            validate_settings({"inference": {"caliper_sd": True}})

    def test_integer_accepted_for_float(self):
        validate_settings({"inference": {"caliper_sd": 1}})

    def test_null_default_keys_are_typed(self):
        with pytest.raises(ConfigError) as info:
            resolve_settings({"power": {"tau": "big", "n1": 10.5, "smds": 0.25},
                              "dgp": {"mean_shift": "0.3"}, "inference": {"expected_tau": [1.0]}})
        pointers = " ".join(info.value.pointers)
        assert "/power/tau (expected number, got str)" in pointers
        assert "/power/n1 (expected integer" in pointers
        assert "/power/smds (expected array" in pointers
        assert "/dgp/mean_shift (expected array" in pointers
        assert "/inference/expected_tau (expected number" in pointers

    def test_infinite_pool_spelling(self):
        assert resolve_settings({"power": {"n0": "inf"}})["power"]["n0"] == "inf"
        with pytest.raises(ConfigError) as info:
            resolve_settings({"power": {"n0": "many"}})
        assert info.value.pointers == ["/power/n0 (expected number or \"inf\", got str)"]

    def test_null_default_keys_accept_values(self):
        settings = resolve_settings({"input": {"pooled_csv": "x.csv"}, "power": {"tau": 1, "gamma": 0.5},
                                     "inference": {"bootstrap": {"subsample_size": 40}}})
        assert settings["power"]["tau"] == 1

    def test_not_an_object(self):
        with pytest.raises(ConfigError):
            validate_settings([1, 2])


class TestLoadSave:

    def test_relative_inputs_resolve_against_config(self, tmp_path):
        path = _write(tmp_path, {"input": {"pooled_csv": "data/pooled.csv"}})
        settings = load_settings(path)
        assert settings["input"]["pooled_csv"] == str(tmp_path / "data" / "pooled.csv")
        assert settings["input"]["longitudinal_csv"] is None

    def test_invalid_json(self, tmp_path):
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_settings(_write(tmp_path, "{\"seed\": 1,}"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_settings(tmp_path / "absent.json")

    def test_saved_config_reloads(self, tmp_path):
        settings = resolve_settings({"seed": 4, "dgp": {"d": 2}})
        target = save_settings(settings, tmp_path / "out")
        assert target.name == RESOLVED_CONFIG_FILE
        assert json.loads(target.read_text(encoding="utf-8")) == settings


class TestOverrides:

    def test_command_line_wins(self):
        settings = apply_overrides(resolve_settings({"seed": 1}), seed=9, threads=-1)
        assert (settings["seed"], settings["threads"]) == (9, -1)

    def test_original_untouched(self):
        base = resolve_settings({})
        apply_overrides(base, seed=3)
        assert base["seed"] == 0

    @pytest.mark.parametrize("seed", [-1, 2 ** 64])
    def test_seed_range(self, seed):
        with pytest.raises(ConfigError) as info:
            apply_overrides(resolve_settings({}), seed=seed)
        assert info.value.pointers == ["/seed"]

    def test_zero_threads(self):
        with pytest.raises(ConfigError):
            apply_overrides(resolve_settings({}), threads=0)


class TestRequiredBlocks:

    def test_estimate_needs_input(self):
        with pytest.raises(ConfigError) as info:
            check_required(resolve_settings({"outcome": {}}), "estimate")
        assert "/input/pooled_csv" in info.value.pointers

    def test_outcome_estimators_need_outcome_block(self):
        settings = resolve_settings({"input": {"pooled_csv": "x.csv"}, "estimators": ["IPW", "AIPW"]})
        with pytest.raises(ConfigError) as info:
            check_required(settings, "estimate")
        assert info.value.pointers == ["/outcome"]

    def test_weighting_only_needs_no_outcome_block(self):
        settings = resolve_settings({"input": {"pooled_csv": "x.csv"}, "estimators": ["PSM", "IPW"]})
        check_required(settings, "estimate")

    def test_design_without_gamma_source(self):
        settings = resolve_settings({"power": {"tau": 0.3, "n0": 200, "kappa_sq": 1.0}})
        with pytest.raises(ConfigError, match="gamma_smd"):
            check_required(settings, "design")

    def test_design_missing_fields(self):
        with pytest.raises(ConfigError) as info:
            check_required(resolve_settings({"power": {"gamma": 0.5}}), "design")
        assert info.value.pointers == ["/power/tau", "/power/n0", "/power/kappa_sq"]

    def test_design_with_smds(self):
        settings = resolve_settings({"power": {"tau": 0.3, "n0": "inf", "sigma0_sq": 1.0, "smds": [0.2]}})
        check_required(settings, "design")

    def test_simulation_blocks(self):
        with pytest.raises(ConfigError) as info:
            check_required(resolve_settings({}), "sweep")
        assert info.value.pointers == ["/dgp", "/sweep"]
        check_required(resolve_settings({"dgp": {}}), "simulate")

    def test_unknown_command(self):
        with pytest.raises(ConfigError):
            check_required(resolve_settings({}), "plot")


class TestConfigHash:

    def test_stable_and_sensitive(self):
        a = resolve_settings({"seed": 1})
        assert config_hash(a) == config_hash(resolve_settings({"seed": 1}))
        assert config_hash(a) != config_hash(resolve_settings({"seed": 2}))
        assert len(config_hash(a)) == 64
# file: test_settings_manager.py
