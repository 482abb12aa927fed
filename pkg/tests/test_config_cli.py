"""Config schema, admissibility rules, presets, CLI verbs and artifacts."""

import hashlib
import json

import numpy as np
import pytest

from bschsim.cli import main
from bschsim.config import (ConfigError, build_run, constant_initial,
                            load_preset, parse_config, preset_text,
                            random_initial)
from bschsim.fem import assemble, build_disk_mesh
from bschsim.forms import field_mass
from bschsim.params import INFINITE, DomainGeometry, SystemParams
from bschsim.stepping import load_state, save_state


def problems_of(text):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    return err.value.problems


class TestSchema:
    def test_minimal_config_fills_defaults(self):
        cfg = parse_config("")
        assert cfg.label == "run"
        assert cfg.radius == 1.0 and cfg.level == 4
        assert cfg.k_coupling == 1.0 and cfg.l_coupling == 1.0
        assert cfg.mass_mean == 0.0
        assert cfg.theta == 1.0 and cfg.theta_c == 2.0
        assert cfg.scheme.dt == 1.0 / 64.0
        assert cfg.scheme.potential_mode == "direct-log"
        assert cfg.t_end == 1.0
        assert cfg.velocity is None
        assert cfg.initial.kind == "noise"
        assert cfg.pullback is None and cfg.equilibrium is None

    def test_infinity_sentinel_strings(self):
        cfg = parse_config("[params]\nk_coupling = 'infinity'\n"
                           "l_coupling = 'infinity'\nmass_mean = [0.1, 0.2]\n")
        assert cfg.k_coupling is INFINITE
        assert cfg.l_coupling is INFINITE
        assert cfg.mass_mean == (0.1, 0.2)

    def test_unknown_keys_rejected_with_paths(self):
        problems = problems_of("[params]\ngamma = 2.0\n[nonsense]\nx = 1\n")
        assert any(p.startswith("params.gamma:") for p in problems)
        assert any(p.startswith("nonsense:") for p in problems)

    def test_multiple_problems_collected(self):
        problems = problems_of(
            "[geometry]\nradius = -1.0\n[scheme]\ndt = 'soon'\n")
        assert len(problems) >= 2
        assert any(p.startswith("geometry.radius:") for p in problems)
        assert any(p.startswith("scheme.dt:") for p in problems)

    def test_type_and_range_errors(self):
        assert any("positive" in p
                   for p in problems_of("[scheme]\ndt = 0.0\n"))
        assert any("unknown kind" in p
                   for p in problems_of("[potential]\nkind = 'obstacle'\n"))
        assert any("t_end" in p for p in problems_of(
            "[scheme]\nt_start = 2.0\nt_end = 1.0\n"))
        assert any("path" in p for p in problems_of(
            "[initial]\nkind = 'checkpoint'\n"))
        assert any("clamp" in p for p in problems_of(
            "[initial]\nclamp = 1.5\n"))
        assert any("envelope" in p for p in problems_of(
            "[velocity]\nbulk = 'rotation'\n[velocity.envelope]\n"
            "kind = 'sawtooth'\n"))

    def test_not_toml_at_all(self):
        assert any("TOML" in p for p in problems_of("= xx\n=="))

    def test_mass_mode_mismatch(self):
        assert any("pair" in p for p in problems_of(
            "[params]\nl_coupling = 'infinity'\nmass_mean = 0.1\n"))
        assert any("single" in p for p in problems_of(
            "[params]\nmass_mean = [0.1, 0.2]\n"))

    def test_digest_tracks_text(self):
        text = "[geometry]\nlevel = 2\n"
        cfg = parse_config(text)
        assert cfg.digest == hashlib.sha256(text.encode()).hexdigest()
        assert parse_config(text + "\n").digest != cfg.digest


class TestAdmissibilityRules:
    def test_combined_mean_out_of_range_names_d1(self):
        # beta * mean = 1.2, the documented violation example
        problems = problems_of("[params]\nbeta = 2.0\nmass_mean = 0.6\n")
        assert len(problems) == 1
        assert "rule D1" in problems[0]
        assert problems[0].startswith("params.mass_mean:")

    def test_plain_mean_out_of_range_names_d1(self):
        problems = problems_of("[params]\nmass_mean = -1.0\n")
        assert any("rule D1" in p for p in problems)

    def test_split_mean_out_of_range_names_d1(self):
        problems = problems_of(
            "[params]\nl_coupling = 'infinity'\nmass_mean = [0.2, 1.4]\n")
        assert any("rule D1" in p and "surface" in p for p in problems)

    def test_degenerate_coupling_names_a2(self):
        # alpha*beta*pi r^2 + 2 pi r = 0 at r = 1 iff alpha*beta = -2
        problems = problems_of("[params]\nalpha = -1.0\nbeta = 2.0\n")
        assert any("rule A2" in p for p in problems)

    def test_persistent_stirring_names_d5(self):
        text = ("[velocity]\nbulk = 'rotation'\n"
                "[velocity.envelope]\nkind = 'constant'\n"
                "[experiment.equilibrium]\n")
        problems = problems_of(text)
        assert any("rule D5" in p for p in problems)

    def test_decaying_stirring_passes_d5(self):
        text = ("[velocity]\nbulk = 'rotation'\n"
                "[velocity.envelope]\nkind = 'exponential'\nrate = 2.0\n"
                "[experiment.equilibrium]\n")
        cfg = parse_config(text)
        assert cfg.equilibrium is not None


class TestPresets:
    @pytest.mark.parametrize("name", ["spinodal", "pullback", "mixing"])
    def test_packaged_presets_parse(self, name):
        cfg = load_preset(name)
        assert cfg.label == name

    def test_spinodal_preset_contract(self):
        cfg = load_preset("spinodal")
        assert cfg.mass_mean == 0.0
        assert cfg.theta == 1.0 and cfg.theta_c == 2.0
        env = cfg.velocity.envelope
        assert env.kind == "decay_after"
        assert env.rate == 2.0 and env.t_dec == 1.0
        assert cfg.equilibrium is not None

    def test_pullback_preset_contract(self):
        cfg = load_preset("pullback")
        assert cfg.pullback.offsets == (-4.0, -8.0, -16.0, -32.0)
        assert cfg.pullback.n_fields == 5

    def test_unknown_preset_lists_available(self):
        with pytest.raises(ConfigError, match="spinodal"):
            preset_text("does-not-exist")


@pytest.fixture(scope="module")
def small_ops():
    return assemble(build_disk_mesh(level=2))


class TestInitialData:
    def test_random_initial_deterministic(self, small_ops):
        params = SystemParams(k_coupling=1.0, l_coupling=1.0, alpha=1.0,
                              beta=1.0, mass_target=0.1)
        one = random_initial(small_ops, params, seed=9)
        two = random_initial(small_ops, params, seed=9)
        other = random_initial(small_ops, params, seed=10)
        assert np.array_equal(one.stacked(), two.stacked())
        assert not np.array_equal(one.stacked(), other.stacked())
        assert field_mass(small_ops, params, one) == pytest.approx(0.1,
                                                                   abs=1e-12)

    def test_random_initial_identified_trace(self, small_ops):
        params = SystemParams(k_coupling=0.0, l_coupling=1.0, alpha=0.6,
                              beta=1.0, mass_target=0.0)
        field = random_initial(small_ops, params, seed=4)
        cycle = small_ops.mesh.boundary_cycle
        assert np.allclose(field.bulk[cycle], 0.6 * field.surface,
                           atol=1e-14)

    def test_random_initial_interior(self, small_ops):
        params = SystemParams(k_coupling=1.0, l_coupling=1.0, alpha=1.0,
                              beta=1.0, mass_target=0.1)
        field = random_initial(small_ops, params, seed=3, amplitude=0.5)
        assert np.max(np.abs(field.bulk)) < 1.0
        assert np.max(np.abs(field.surface)) < 1.0

    def test_random_initial_rejects_crowded_noise(self, small_ops):
        # mean close to the wall plus wide noise cannot stay interior
        params = SystemParams(k_coupling=1.0, l_coupling=1.0, alpha=1.0,
                              beta=1.0, mass_target=0.97 * 4 * np.pi)
        with pytest.raises(ConfigError, match="amplitude"):
            random_initial(small_ops, params, seed=0, amplitude=0.8,
                           clamp=0.9)

    def test_constant_initial_hits_mass(self, small_ops):
        geometry = DomainGeometry(float(np.sum(small_ops.lumped_bulk)),
                                  float(np.sum(small_ops.lumped_surface)))
        params = SystemParams(k_coupling=1.0, l_coupling=1.0, alpha=0.7,
                              beta=0.8, mass_target=0.2)
        field = constant_initial(small_ops, params, geometry)
        assert field_mass(small_ops, params, field) == pytest.approx(0.2)

    def test_constant_initial_identified_regime(self, small_ops):
        geometry = DomainGeometry(float(np.sum(small_ops.lumped_bulk)),
                                  float(np.sum(small_ops.lumped_surface)))
        params = SystemParams(k_coupling=0.0, l_coupling=1.0, alpha=0.6,
                              beta=0.8, mass_target=0.2)
        field = constant_initial(small_ops, params, geometry)
        assert field_mass(small_ops, params, field) == pytest.approx(0.2)
        assert np.allclose(field.bulk, 0.6 * field.surface[0])

    def test_constant_initial_split_mismatch_rejected(self, small_ops):
        geometry = DomainGeometry(float(np.sum(small_ops.lumped_bulk)),
                                  float(np.sum(small_ops.lumped_surface)))
        params = SystemParams(k_coupling=0.0, l_coupling=INFINITE, alpha=0.6,
                              beta=0.8, mass_target=(0.5, 0.1))
        with pytest.raises(ConfigError, match="constant"):
            constant_initial(small_ops, params, geometry)


class TestBuildRun:
    def test_build_produces_consistent_context(self):
        cfg = parse_config("[geometry]\nlevel = 2\n[params]\nmass_mean = 0.1\n")
        ctx = build_run(cfg, seed=5, threads=2)
        assert ctx.ops.n_bulk == ctx.mesh.n_vertices
        assert ctx.threads == 2
        # the stored target reproduces the configured mean discretely
        mean = ctx.params.mean_target(ctx.geometry)
        assert mean == pytest.approx(0.1, abs=1e-14)
        assert len(ctx.mesh_digest) == 64

    def test_checkpoint_initial_roundtrip(self, tmp_path):
        cfg = parse_config("[geometry]\nlevel = 2\n")
        ctx = build_run(cfg, seed=5)
        record_state = ctx.initial
        from bschsim.stepping import SimState
        from bschsim.fem import BulkSurfaceField
        state = SimState(time=0.0, step_index=0, phase=record_state,
                         chemical=BulkSurfaceField(
                             np.zeros(ctx.ops.n_bulk),
                             np.zeros(ctx.ops.n_surface)))
        path = tmp_path / "start.npz"
        save_state(state, path)
        cfg2 = parse_config("[geometry]\nlevel = 2\n[initial]\n"
                            f"kind = 'checkpoint'\npath = '{path}'\n")
        ctx2 = build_run(cfg2, seed=99)
        assert np.array_equal(ctx2.initial.stacked(), record_state.stacked())

    def test_checkpoint_mesh_mismatch_rejected(self, tmp_path):
        cfg = parse_config("[geometry]\nlevel = 1\n")
        ctx = build_run(cfg, seed=5)
        from bschsim.stepping import SimState
        from bschsim.fem import BulkSurfaceField
        state = SimState(time=0.0, step_index=0, phase=ctx.initial,
                         chemical=BulkSurfaceField(
                             np.zeros(ctx.ops.n_bulk),
                             np.zeros(ctx.ops.n_surface)))
        path = tmp_path / "tiny.npz"
        save_state(state, path)
        cfg2 = parse_config("[geometry]\nlevel = 2\n[initial]\n"
                            f"kind = 'checkpoint'\npath = '{path}'\n")
        with pytest.raises(ConfigError, match="mesh"):
            build_run(cfg2, seed=0)


SMALL_RUN = """
label = "cli-small"

[geometry]
level = 2

[params]
mass_mean = 0.05

[scheme]
dt = 0.03125
t_end = 0.5

[velocity]
bulk = "rotation"
amplitude = 0.3
surface = "trace"

[velocity.envelope]
kind = "decay_after"
rate = 2.0

[initial]
kind = "noise"
amplitude = 0.2

[experiment.pullback]
offsets = [-0.25, -0.5]
n_fields = 2

[experiment.equilibrium]
fit_window_fraction = 1.0
"""


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.toml"
    path.write_text(SMALL_RUN, encoding="utf-8")
    return path


class TestCliVerbs:
    def test_simulate_writes_artifacts(self, small_config, tmp_path):
        out = tmp_path / "sim"
        assert main(["simulate", "--config", str(small_config),
                     "--out", str(out), "--seed", "3"]) == 0
        for name in ("timeseries.csv", "summary.json", "state.npz",
                     "manifest.json", "config.toml"):
            assert (out / name).is_file()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_steps"] == 16
        assert summary["mass_drift_abs"] <= 1e-10
        assert summary["interior"] is True
        manifest = json.loads((out / "manifest.json").read_text())
        text = (out / "config.toml").read_text()
        assert manifest["config_sha256"] == \
            hashlib.sha256(text.encode()).hexdigest()
        assert manifest["seed"] == 3
        assert manifest["columns"][0] == "t"
        header = (out / "timeseries.csv").read_text().splitlines()[0]
        assert header.split(",") == manifest["columns"]

    def test_simulate_rerun_is_byte_identical(self, small_config, tmp_path):
        argv = ["simulate", "--config", str(small_config), "--seed", "7"]
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(argv + ["--out", str(out1)]) == 0
        assert main(argv + ["--out", str(out2)]) == 0
        for name in ("timeseries.csv", "summary.json", "manifest.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_simulate_seed_changes_series(self, small_config, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        base = ["simulate", "--config", str(small_config)]
        assert main(base + ["--out", str(out1), "--seed", "1"]) == 0
        assert main(base + ["--out", str(out2), "--seed", "2"]) == 0
        assert (out1 / "timeseries.csv").read_bytes() \
            != (out2 / "timeseries.csv").read_bytes()

    def test_state_checkpoint_carries_final_time(self, small_config, tmp_path):
        out = tmp_path / "sim"
        assert main(["simulate", "--config", str(small_config),
                     "--out", str(out), "--seed", "3"]) == 0
        state = load_state(out / "state.npz")
        assert state.time == pytest.approx(0.5)

    def test_stationary_verb(self, small_config, tmp_path):
        out = tmp_path / "sta"
        assert main(["stationary", "--config", str(small_config),
                     "--out", str(out), "--seed", "1"]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["converged"] is True
        assert summary["residual_norm"] <= 1e-10
        assert summary["separation_width"] > 0.0
        state = load_state(out / "state.npz")
        assert np.max(np.abs(state.phase.bulk)) < 1.0

    def test_pullback_verb(self, small_config, tmp_path):
        out = tmp_path / "pb"
        assert main(["pullback", "--config", str(small_config),
                     "--out", str(out), "--seed", "1", "--threads", "2"]) == 0
        table = np.genfromtxt(out / "pullback.csv", delimiter=",",
                              names=True)
        assert np.array_equal(np.asarray(table["offset"]), [-0.25, -0.5])
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_runs"] == 4

    def test_equilibrium_verb(self, small_config, tmp_path):
        out = tmp_path / "eq"
        assert main(["equilibrium", "--config", str(small_config),
                     "--out", str(out), "--seed", "1"]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["verdicts"]["stationary_residual"] is True
        assert (out / "timeseries.csv").is_file()
        assert (out / "state.npz").is_file()

    def test_mesh_export_verb(self, small_config, tmp_path):
        out = tmp_path / "mesh"
        assert main(["mesh-export", "--config", str(small_config),
                     "--out", str(out)]) == 0
        lines = (out / "mesh.txt").read_text().splitlines()
        assert lines[0].startswith("# vtk DataFile")
        points = int(next(l for l in lines if l.startswith("POINTS"))
                     .split()[1])
        ops = assemble(build_disk_mesh(level=2))
        assert points == ops.n_bulk

    def test_certify_passes(self, tmp_path, capsys):
        out = tmp_path / "cert"
        assert main(["certify", "--out", str(out)]) == 0
        printed = capsys.readouterr().out
        assert "PASS" in printed and "FAIL" not in printed
        report = json.loads((out / "certify.json").read_text())
        assert report["passed"] is True
        assert all(r["passed"] for r in report["results"])

    def test_preset_reference_resolves(self, tmp_path):
        out = tmp_path / "mesh"
        assert main(["mesh-export", "--config", "preset:mixing",
                     "--out", str(out)]) == 0
        assert (out / "mesh.txt").is_file()


class TestCliFailureModes:
    def test_missing_out_is_usage_error(self, small_config, capsys):
        assert main(["simulate", "--config", str(small_config)]) == 2
        assert "--out" in capsys.readouterr().err

    def test_bad_seed_and_threads(self, small_config, tmp_path, capsys):
        out = str(tmp_path / "x")
        assert main(["simulate", "--config", str(small_config),
                     "--out", out, "--seed", "-1"]) == 2
        assert main(["simulate", "--config", str(small_config),
                     "--out", out, "--threads", "0"]) == 2

    def test_config_problems_reported(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("[params]\nbeta = 2.0\nmass_mean = 0.6\n")
        assert main(["simulate", "--config", str(bad),
                     "--out", str(tmp_path / "o")]) == 2
        err = capsys.readouterr().err
        assert "rule D1" in err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["simulate", "--config", str(tmp_path / "nope.toml"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_missing_experiment_section(self, tmp_path, capsys):
        plain = tmp_path / "plain.toml"
        plain.write_text("[geometry]\nlevel = 1\n")
        assert main(["pullback", "--config", str(plain),
                     "--out", str(tmp_path / "o")]) == 2
        assert "experiment.pullback" in capsys.readouterr().err

    def test_unknown_preset(self, tmp_path, capsys):
        assert main(["simulate", "--config", "preset:zzz",
                     "--out", str(tmp_path / "o")]) == 2
        assert "available" in capsys.readouterr().err

    def test_numerical_failure_writes_error_json(self, tmp_path, capsys):
        # wild stirring at a coarse resolution drives the state into the
        # wall within a few steps
        violent = tmp_path / "violent.toml"
        violent.write_text("""
[geometry]
level = 1
[scheme]
dt = 0.25
t_end = 4.0
[velocity]
bulk = "rotation"
amplitude = 200.0
surface = "trace"
[initial]
amplitude = 0.5
""")
        out = tmp_path / "boom"
        with pytest.warns(RuntimeWarning):
            code = main(["simulate", "--config", str(violent),
                         "--out", str(out), "--seed", "0"])
        assert code == 1
        record = json.loads((out / "error.json").read_text())
        assert record["verb"] == "simulate"
        assert record["error"]
        assert "failure" in capsys.readouterr().err
