import json

import numpy as np
import pytest

from accelflow.core.errors import ConfigError, UsageError
from accelflow.core.targets import GaussianInitial, derive_seeds
from accelflow.services.config_loader import (
    RESOLVED_CONFIG_FILE,
    RESOLVED_METADATA_FILE,
    config_digest,
    load_config,
    parse_config_text,
    parse_override,
    render_config,
    write_resolved,
)
from accelflow.services.sampler_factory import (
    build_initial,
    build_sampler,
    build_target,
    initial_ensemble,
    method_config,
    parse_phi0,
)


@pytest.fixture
def config_file(tmp_path):
    """Write a flat config file and return its path."""
    def write(text):
        path = tmp_path / "experiment.cfg"
        path.write_text(text, encoding="utf-8")
        return path
    return write


class TestPresets:
    @pytest.mark.unit
    def test_gaussian_preset(self, tmp_path):
        """Test the single-Gaussian preset values."""
        cfg = load_config(preset="gaussian_fig1", output_dir=tmp_path)
        assert cfg.N == 100
        assert cfg.seeds == [0]
        assert (cfg.schedule.p, cfg.schedule.C, cfg.schedule.t0) == (2.0, 0.625, 1.0)
        assert (cfg.target.mean, cfg.target.cov) == ([-5.0], [0.25])
        assert (cfg.init.mean, cfg.init.cov) == ([2.0], [4.0])
        assert cfg.interaction.kind == "gaussian"
        assert (cfg.dynamics.dt, cfg.dynamics.K) == (0.1, 400)
        assert cfg.metrics.kl == "gaussian_fit"
        assert cfg.dynamics.x_update == "halfstep"
        assert cfg.output_dir == tmp_path

    @pytest.mark.unit
    def test_mixture_preset(self, tmp_path):
        """Test the mixture preset values."""
        cfg = load_config(preset="mixture_fig2", output_dir=tmp_path)
        assert cfg.target.kind == "mixture"
        assert (cfg.target.m, cfg.target.sigma2) == (2.0, 0.8)
        assert (cfg.interaction.kind, cfg.interaction.epsilon) == ("dm", 0.01)
        assert cfg.metrics.kl == "kde"
        assert cfg.metrics.kde_rule == "component"
        assert cfg.metrics.lyapunov is False
        assert cfg.dynamics.x_update == "halfstep"

    @pytest.mark.unit
    def test_comparison_preset_derives_seeds(self, tmp_path):
        """Test that the comparison preset expands its master seed into run seeds."""
        cfg = load_config(preset="comparison_fig3", output_dir=tmp_path)
        assert cfg.master_seed == 0
        assert cfg.seeds == derive_seeds(0, 100)
        assert cfg.dynamics.K == 1000
        assert cfg.comparison.n_grid == [250, 500, 1000, 2000]
        assert cfg.dynamics.x_update == "halfstep"

    @pytest.mark.unit
    def test_unknown_preset(self):
        with pytest.raises(ConfigError) as excinfo:
            load_config(preset="figure_9")
        assert excinfo.value.key_path == "preset"


class TestValidation:
    @pytest.mark.unit
    def test_negative_scale_names_key(self, tmp_path):
        """Test that schedule.C = -1 is rejected with its key path."""
        with pytest.raises(ConfigError) as excinfo:
            load_config(preset="gaussian_fig1", overrides=["schedule.C=-1"], output_dir=tmp_path)
        assert excinfo.value.key_path == "schedule.C"
        assert str(excinfo.value).startswith("schedule.C: ")

    @pytest.mark.unit
    def test_unknown_key(self, config_file, tmp_path):
        path = config_file("preset = gaussian_fig1\nschedule.q = 3\n")
        with pytest.raises(ConfigError, match="schedule.q: unknown key"):
            load_config(path, output_dir=tmp_path)

    @pytest.mark.unit
    def test_unreadable_file(self, tmp_path):
        missing = tmp_path / "missing.cfg"
        with pytest.raises(ConfigError) as excinfo:
            load_config(missing)
        assert excinfo.value.key_path == str(missing)

    @pytest.mark.unit
    def test_malformed_line(self, config_file):
        path = config_file("# comment\nN = 10\nthis is not a setting\n")
        with pytest.raises(ConfigError) as excinfo:
            load_config(path)
        assert excinfo.value.key_path == f"{path}:3"

    @pytest.mark.unit
    def test_kernel_interaction_needs_epsilon(self, tmp_path):
        with pytest.raises(ConfigError, match="interaction"):
            load_config(preset="gaussian_fig1", overrides=["interaction.kind=dm"], output_dir=tmp_path)

    @pytest.mark.unit
    @pytest.mark.parametrize("override, key_path", [
        ("init.mean=1,2", "init.mean"),
        ("target.cov=1,2,3", "target.cov"),
        ("init.phi0=linear:1,2,3", "init.phi0"),
        ("N=0", "N"),
        ("dynamics.K=0", "dynamics.K"),
        ("dynamics.dt=0", "dynamics.dt"),
        ("seeds=-1", "seeds"),
    ])
    def test_invariant_violations(self, tmp_path, override, key_path):
        with pytest.raises(ConfigError) as excinfo:
            load_config(preset="gaussian_fig1", overrides=[override], output_dir=tmp_path)
        assert excinfo.value.key_path == key_path

    @pytest.mark.unit
    def test_gaussian_fit_needs_gaussian_target(self, tmp_path):
        with pytest.raises(ConfigError) as excinfo:
            load_config(preset="mixture_fig2", overrides=["metrics.kl=gaussian_fit"], output_dir=tmp_path)
        assert excinfo.value.key_path == "metrics.kl"

    @pytest.mark.unit
    def test_first_order_needs_interaction(self, tmp_path):
        with pytest.raises(ConfigError) as excinfo:
            load_config(preset="gaussian_fig1",
                        overrides=["dynamics.kind=first_order_det", "interaction.kind=none"], output_dir=tmp_path)
        assert excinfo.value.key_path == "interaction.kind"

    @pytest.mark.unit
    def test_damped_flow_needs_interaction(self, tmp_path):
        with pytest.raises(ConfigError) as excinfo:
            load_config(preset="gaussian_fig1",
                        overrides=["dynamics.kind=damped_flow", "interaction.kind=none"], output_dir=tmp_path)
        assert excinfo.value.key_path == "interaction.kind"


class TestLayering:
    @pytest.mark.unit
    def test_file_then_overrides_then_flags(self, config_file, tmp_path):
        path = config_file("preset = gaussian_fig1\nN = 50\ndynamics.K = 30  # short\n")
        cfg = load_config(path, overrides=["N=70"], seeds=[4, 5], output_dir=tmp_path)
        assert cfg.preset == "gaussian_fig1"
        assert cfg.N == 70
        assert cfg.dynamics.K == 30
        assert cfg.seeds == [4, 5]

    @pytest.mark.unit
    def test_explicit_seeds_replace_master_seed(self, tmp_path):
        cfg = load_config(preset="comparison_fig3", seeds=[3], output_dir=tmp_path)
        assert cfg.seeds == [3]
        assert cfg.master_seed is None and cfg.runs is None

    @pytest.mark.unit
    def test_master_seed_replaces_preset_seeds(self, tmp_path):
        cfg = load_config(preset="gaussian_fig1", master_seed=7, runs=3, output_dir=tmp_path)
        assert cfg.seeds == derive_seeds(7, 3)
        assert (cfg.master_seed, cfg.runs) == (7, 3)

    @pytest.mark.unit
    def test_parse_text(self):
        assert parse_config_text("a.b = 1\n\n  # only a comment\nc=x # trailing\n") == {"a.b": "1", "c": "x"}

    @pytest.mark.unit
    def test_parse_override(self):
        assert parse_override(" dynamics.dt = 0.05 ") == {"dynamics.dt": "0.05"}
        with pytest.raises(ConfigError):
            parse_override("dynamics.dt")


class TestResolvedConfig:
    @pytest.mark.unit
    def test_round_trip(self, tmp_path):
        """Test that loading the written resolved config reproduces the configuration."""
        cfg = load_config(preset="mixture_fig2", overrides=["dynamics.dt=0.05", "interaction.epsilon=0.003"],
                          master_seed=11, runs=4, output_dir=tmp_path)
        text_path, json_path = write_resolved(cfg)
        assert text_path.name == RESOLVED_CONFIG_FILE
        assert json_path.name == RESOLVED_METADATA_FILE
        reloaded = load_config(text_path)
        assert reloaded == cfg
        assert render_config(reloaded) == text_path.read_text(encoding="utf-8")

    @pytest.mark.unit
    def test_metadata_sidecar(self, tmp_path):
        cfg = load_config(preset="gaussian_fig1", output_dir=tmp_path)
        _, json_path = write_resolved(cfg)
        metadata = json.loads(json_path.read_text(encoding="utf-8"))
        assert metadata["config_digest"] == config_digest(cfg)
        assert metadata["seeds"] == [0]
        assert metadata["config"]["schedule.C"] == "0.625"
        assert metadata["implementation_choices"]["kl_estimator"] == "Gaussian fit"
        assert metadata["implementation_choices"]["position_drift"].startswith("halfstep")

    @pytest.mark.unit
    def test_digest_tracks_content(self, tmp_path):
        a = load_config(preset="gaussian_fig1", output_dir=tmp_path)
        b = load_config(preset="gaussian_fig1", output_dir=tmp_path)
        c = load_config(preset="gaussian_fig1", overrides=["dynamics.dt=0.2"], output_dir=tmp_path)
        assert config_digest(a) == config_digest(b)
        assert config_digest(a) != config_digest(c)
        assert len(config_digest(a)) == 12


class TestSamplerFactory:
    @pytest.mark.unit
    def test_full_covariance_entries(self, tmp_path):
        cfg = load_config(overrides=["target.mean=0,1", "target.cov=2,0.5,0.5,1", "init.mean=0,0",
                                     "init.cov=1,1", "metrics.kl=gaussian_fit"], output_dir=tmp_path)
        target = build_target(cfg)
        assert target.dim == 2
        assert target.covariance[0, 1] == 0.5
        assert build_initial(cfg).covariance[1, 1] == 1.0

    @pytest.mark.unit
    def test_phi0_broadcast(self):
        initial = GaussianInitial(np.zeros(3), np.eye(3), parse_phi0("linear:0.5:-1", 3))
        np.testing.assert_array_equal(initial.initial_momentum(np.ones((2, 3))), np.full((2, 3), 0.5))
        with pytest.raises(UsageError):
            parse_phi0("cubic:1", 1)

    @pytest.mark.unit
    def test_method_configs_share_initial_positions(self, tmp_path):
        cfg = load_config(preset="comparison_fig3", seeds=[5], output_dir=tmp_path)
        ensembles = {m: initial_ensemble(method_config(cfg, m), 5) for m in cfg.comparison.methods}
        reference = ensembles["accelerated_dm"].positions
        for method, ens in ensembles.items():
            assert (ens.positions == reference).all(), method
        assert ensembles["accelerated_dm"].time == 1.0
        assert ensembles["mcmc"].time == 0.0
        assert not ensembles["hmcmc"].momenta.any()

    @pytest.mark.unit
    @pytest.mark.parametrize("method, name", [
        ("accelerated_dm", "accelerated_dm"),
        ("accelerated_de", "accelerated_de"),
        ("mcmc", "mcmc"),
        ("hmcmc", "hmcmc"),
    ])
    def test_method_samplers(self, tmp_path, method, name):
        cfg = method_config(load_config(preset="comparison_fig3", seeds=[0], output_dir=tmp_path), method)
        assert build_sampler(cfg, build_target(cfg), 0).name == name

    @pytest.mark.unit
    def test_damped_flow_sampler(self, tmp_path):
        cfg = load_config(preset="gaussian_fig1", overrides=["dynamics.kind=damped_flow", "dynamics.v0_scale=0.5"],
                          output_dir=tmp_path)
        sampler = build_sampler(cfg, build_target(cfg), 0)
        assert sampler.name == "damped_flow"
        assert sampler.cfg.gamma_friction == 2.0
        start = initial_ensemble(cfg, 0)
        assert start.time == 0.0
        assert start.momenta.std() == pytest.approx(0.5, rel=0.3)
