import pytest

from cassi_tools.config import (
    DROP_PATH_TABLE,
    FrameworkKind,
    RunConfig,
    apply_overrides,
    config_echo_path,
    config_from_dict,
    drop_path_rates,
    dump_config,
    load_config,
)
from cassi_tools.errors import ConfigError


def test_defaults_validate():
    config = load_config(None)
    assert config.seed == 42
    assert config.train.lr == 4e-4
    assert (config.train.beta1, config.train.beta2, config.train.eps) == (0.9, 0.999, 1e-8)
    assert config.model.blocks == (1, 1, 3)
    assert config.model.kernel_size == 7


@pytest.mark.parametrize("name, kind", [("hqs", FrameworkKind.HQS), ("ADMM", FrameworkKind.ADMM),
                                        ("r2admm", FrameworkKind.R2ADMM), ("plain", FrameworkKind.PLAIN)])
def test_framework_parse(name, kind):
    assert FrameworkKind.parse(name) is kind


def test_unknown_framework_lists_valid_values():
    with pytest.raises(ConfigError, match="hqs, admm, r2admm, gap, plain"):
        FrameworkKind.parse("fista")


@pytest.mark.parametrize("stages", sorted(DROP_PATH_TABLE))
def test_drop_path_table_rows(stages):
    assert drop_path_rates(stages) == DROP_PATH_TABLE[stages]


def test_drop_path_unlisted_count_uses_lower_row():
    assert drop_path_rates(4) == DROP_PATH_TABLE[3]
    assert drop_path_rates(0) == DROP_PATH_TABLE[1]


def test_yaml_round_trip(tmp_path):
    config = config_from_dict({"seed": 7, "solver": {"framework": "hqs", "stages": 3},
                               "model": {"blocks": [1, 2, 1]}, "train": {"drop_path": [0.1, 0.2]}})
    path = dump_config(config, tmp_path / "run.yaml")
    loaded = load_config(path)
    assert loaded == config
    assert loaded.model.blocks == (1, 2, 1)
    assert loaded.train.drop_path == (0.1, 0.2)


def test_unknown_key_lists_valid_keys():
    with pytest.raises(ConfigError, match="valid keys: .*stages"):
        config_from_dict({"solver": {"stage": 3}})


@pytest.mark.parametrize("raw", [
    {"train": {"lr": -1.0}},
    {"train": {"crop": 30}},
    {"train": {"beta1": 1.0}},
    {"model": {"kernel_size": 4}},
    {"model": {"ffn_variant": "wide"}},
    {"model": {"blocks": [1, 1]}},
    {"solver": {"denoiser": "bm3d"}},
    {"solver": {"alpha": 0.0}},
    {"simulate": {"noise_bits": 0}},
])
def test_invalid_values(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_zero_learning_rate_allowed():
    assert config_from_dict({"train": {"lr": 0.0}}).train.lr == 0.0


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.yaml")


def test_invalid_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("solver: [unclosed\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(path)


def test_flags_override_file_values():
    config = config_from_dict({"solver": {"stages": 3, "tau": 2.0}})
    merged = apply_overrides(config, "solver", stages=5, tau=None)
    assert merged.solver.stages == 5
    assert merged.solver.tau == 2.0
    assert config.solver.stages == 3


def test_top_level_override():
    assert apply_overrides(RunConfig(), seed=9, data_dir=None).seed == 9


def test_override_is_validated():
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), "solver", framework="nope")


def test_echo_path():
    assert config_echo_path("runs/best.hsc").name == "best.hsc.yaml"
