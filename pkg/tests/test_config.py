import numpy as np
import pytest

from app.core.config import CONFIG_DIR_ENV_VAR, SEED_ENV_VAR, get_settings, reload_settings
from app.core.exceptions import (
    BracketNotFoundError,
    InvalidConfigurationError,
    NotInRegionError,
    NumericalError,
    PreconditionError,
    RankDeficiencyError,
    SelektorError,
)
from app.core.logger import _module_filter, get_module_logger, init_logger, logger
from app.core.rng import base_seed, derive_rng, spawn_seed
from app.schemas.sampling import ChainConfig


def test_test_env_overrides_base():
    settings = get_settings()
    assert settings.env == "test"
    assert settings.log.level == "WARNING"
    assert settings.sampler.burn_in == 1000
    assert settings.umpu.samples_per_reference == 2000


def test_seed_env_var_overrides_config(monkeypatch):
    default = base_seed()
    monkeypatch.setenv(SEED_ENV_VAR, "777")
    reload_settings("test")
    assert base_seed() == 777
    monkeypatch.delenv(SEED_ENV_VAR)
    reload_settings("test")
    assert base_seed() == default


def test_derive_rng_reproducible():
    a = derive_rng(3, 1, seed=42).standard_normal(5)
    b = derive_rng(3, 1, seed=42).standard_normal(5)
    c = derive_rng(3, 2, seed=42).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_spawn_seed_in_range():
    rng = derive_rng(0, seed=1)
    seeds = {spawn_seed(rng) for _ in range(20)}
    assert len(seeds) == 20
    assert all(0 <= s < 2**63 for s in seeds)


def test_chain_config_from_settings():
    config = ChainConfig.from_settings(seed=9, n_samples=50)
    assert config.seed == 9
    assert config.n_samples == 50
    assert config.burn_in == get_settings().sampler.burn_in
    assert config.total_steps == config.burn_in + config.thin * 50
    assert ChainConfig.from_settings().seed == base_seed()


def test_exit_codes():
    assert SelektorError("x").exit_code == 1
    assert InvalidConfigurationError("x").exit_code == 2
    assert NotInRegionError("x").exit_code == 2
    assert BracketNotFoundError("x").exit_code == 3


def test_error_families_are_builtin_subclasses():
    with pytest.raises(ValueError):
        raise InvalidConfigurationError("bad alpha")
    with pytest.raises(ArithmeticError):
        raise BracketNotFoundError("no root")
    assert issubclass(PreconditionError, SelektorError)
    assert issubclass(NumericalError, SelektorError)


def test_rank_deficiency_carries_columns():
    err = RankDeficiencyError("collinear", columns=(1, 4))
    assert err.columns == (1, 4)
    assert isinstance(err, PreconditionError)


def test_error_log_carries_module_and_replicate(tmp_path):
    init_logger(str(tmp_path))
    get_module_logger("harness").bind(replicate=12).error("lasso did not converge")
    get_module_logger("cli").warning("not an error")
    text = (tmp_path / "error.log").read_text(encoding="utf-8")
    logger.remove()
    assert "harness#12 | lasso did not converge" in text
    assert "not an error" not in text


def test_numeric_warnings_route_to_umpu_log():
    umpu = _module_filter("umpu")
    lasso = _module_filter("lasso")
    assert umpu({"extra": {"module": "umpu"}})
    assert umpu({"extra": {"source": "[py.warnings]"}})
    assert not lasso({"extra": {"source": "[py.warnings]"}})
    assert not lasso({"extra": {"module": "umpu"}})


def test_config_dir_override(tmp_path, monkeypatch):
    (tmp_path / "base.config.yml").write_text("seed: 5\nsampler:\n  thin: 3\n")
    (tmp_path / "test.config.yml").write_text("sampler:\n  burn_in: 7\n")
    monkeypatch.setenv(CONFIG_DIR_ENV_VAR, str(tmp_path))
    settings = reload_settings("test")
    assert (settings.seed, settings.sampler.thin, settings.sampler.burn_in) == (5, 3, 7)
    assert settings.sampler.n_samples == 2000


def test_unknown_config_key_is_rejected(tmp_path, monkeypatch):
    (tmp_path / "base.config.yml").write_text("sead: 5\n")
    monkeypatch.setenv(CONFIG_DIR_ENV_VAR, str(tmp_path))
    with pytest.raises(InvalidConfigurationError):
        reload_settings("test")


def test_bad_seed_env_var(monkeypatch):
    monkeypatch.setenv(SEED_ENV_VAR, "twelve")
    with pytest.raises(InvalidConfigurationError):
        reload_settings("test")
