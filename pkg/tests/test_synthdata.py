import numpy as np
import pytest
from scipy import stats

from nirmtraj import synthdata as sd

GEN = sd.GenerationConfig()


def small_specs(n=200):
    return [
        sd.EnvironmentSpec(0, spurious_correlation=0.9, noise_scale=0.5, sample_count=n),
        sd.EnvironmentSpec(1, spurious_correlation=0.8, noise_scale=0.5, sample_count=n),
        sd.EnvironmentSpec(2, spurious_correlation=0.1, noise_scale=0.5, sample_count=n, role="test"),
    ]


# --- gt_trajectory ---

def test_straight_line_limit():
    # zero curvature at constant 10 m/s passes through (10, 0) at t=1
    s = sd._arc_lengths(10.0, 10.0, 0.0, np.array([1.0]))
    np.testing.assert_allclose(sd._arc_positions(0.0, s)[0, 0], [10.0, 0.0], atol=1e-12)
    m = sd.ManeuverSpec(curvature=0.0, initial_speed=10.0, target_speed=10.0, accel=0.0)
    traj = sd.gt_trajectory(m, GEN)
    np.testing.assert_allclose(traj.points[:, 0], 10.0 * traj.times, rtol=1e-12)
    np.testing.assert_array_equal(traj.points[:, 1], 0.0)


def test_arc_analytic_values():
    # kappa=0.1 at constant 10 m/s: s(1) = 10, so (sin(1)/0.1, (1-cos(1))/0.1)
    m = sd.ManeuverSpec(curvature=0.1, initial_speed=10.0, target_speed=10.0, accel=0.0)
    gen = sd.GenerationConfig(n_points=3, horizon=3.0)
    traj = sd.gt_trajectory(m, gen)
    np.testing.assert_allclose(traj.points[0], [8.41470984807897, 4.59697694131860], rtol=1e-10)


def test_curvature_sign_mirrors_lateral():
    gen = sd.GenerationConfig()
    pos = sd.gt_trajectory(sd.ManeuverSpec(0.08, 6.0, 8.0, 1.0), gen)
    negv = sd.gt_trajectory(sd.ManeuverSpec(-0.08, 6.0, 8.0, 1.0), gen)
    np.testing.assert_allclose(pos.points[:, 0], negv.points[:, 0], rtol=1e-12)
    np.testing.assert_allclose(pos.points[:, 1], -negv.points[:, 1], rtol=1e-12)


def test_continuity_at_zero_curvature():
    # continuity of the arc in kappa at 0, checked on a moderate-speed maneuver
    # (the lateral gap grows like kappa * s^2 / 2, so it is tightest at low s)
    line = sd.gt_trajectory(sd.ManeuverSpec(0.0, 3.0, 3.0, 0.0), GEN)
    arc = sd.gt_trajectory(sd.ManeuverSpec(1e-8, 3.0, 3.0, 0.0), GEN)
    assert np.abs(arc.points - line.points).max() < 1e-6


def test_trajectories_start_near_origin_and_monotone():
    rng = np.random.default_rng(0)
    for _ in range(50):
        kappa = rng.uniform(-GEN.kappa_sample, GEN.kappa_sample)
        v0 = rng.uniform(1, 9)
        tgt = rng.uniform(1, 9)
        m = sd.ManeuverSpec(kappa, v0, tgt, (tgt - v0) / GEN.ramp_time)
        traj = sd.gt_trajectory(m, GEN)
        # first grid point stays within the reachable radius; arc length never decreases
        assert np.linalg.norm(traj.points[0]) <= max(v0, tgt) * traj.times[0] + 1e-9
        s = sd._arc_lengths(v0, tgt, m.accel, traj.times)[0]
        assert np.all(np.diff(s) >= 0)


def test_deceleration_profile_integrates_correctly():
    # decelerate 8 -> 4 at -2 m/s^2: ramp ends at t=2 with s = 8*2 - 0.5*2*4 = 12,
    # then 4 m/s for the last second: total 16 m
    s = sd._arc_lengths(8.0, 4.0, -2.0, np.array([1.0, 2.0, 3.0]))[0]
    np.testing.assert_allclose(s, [7.0, 12.0, 16.0])


def test_maneuver_validation():
    with pytest.raises(ValueError, match="curvature"):
        sd.gt_trajectory(sd.ManeuverSpec(0.5, 5.0, 5.0, 0.0), GEN)
    with pytest.raises(ValueError, match="initial_speed"):
        sd.gt_trajectory(sd.ManeuverSpec(0.1, -1.0, 5.0, 0.0), GEN)


def test_environment_spec_validation():
    with pytest.raises(ValueError, match="spurious_correlation"):
        sd.EnvironmentSpec(0, 1.5, 0.1, 10)
    with pytest.raises(ValueError, match="sample_count"):
        sd.EnvironmentSpec(0, 0.5, 0.1, 0)
    with pytest.raises(ValueError, match="role"):
        sd.EnvironmentSpec(0, 0.5, 0.1, 10, role="validation")


# --- make_dataset / load_dataset ---

def test_dataset_deterministic(tmp_path):
    specs = small_specs(50)
    m1 = sd.make_dataset(specs, seed=7, out_dir=tmp_path / "a")
    m2 = sd.make_dataset(specs, seed=7, out_dir=tmp_path / "b")
    assert m1.checksums == m2.checksums
    for name in m1.files.values():
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_text() == (tmp_path / "b" / "manifest.json").read_text()


def test_dataset_round_trip(tmp_path):
    specs = small_specs(40)
    sd.make_dataset(specs, seed=3, out_dir=tmp_path)
    batches = sd.load_dataset(tmp_path / "manifest.json")
    assert [b.environment_id for b in batches] == [0, 1, 2]
    assert all(b.n_samples == 40 for b in batches)
    # regenerate one environment in memory and compare exactly
    gen = sd.GenerationConfig()
    emb_rng = sd._embedding_rng(3)
    emb = (*sd._embedding(emb_rng, gen.invariant_dim), *sd._embedding(emb_rng, gen.spurious_dim))
    rows = sd._generate_environment(specs[0], 3, gen, emb)
    np.testing.assert_array_equal(batches[0].observations, rows[:, :gen.obs_dim])
    np.testing.assert_array_equal(batches[0].truth_points.reshape(40, -1), rows[:, gen.obs_dim:])


def test_corrupted_file_rejected(tmp_path):
    sd.make_dataset(small_specs(20), seed=1, out_dir=tmp_path)
    target = tmp_path / "env_1.bin"
    blob = bytearray(target.read_bytes())
    blob[13] ^= 0xFF
    target.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="env_1.bin"):
        sd.load_dataset(tmp_path / "manifest.json")


def test_truncated_file_rejected(tmp_path):
    sd.make_dataset(small_specs(20), seed=1, out_dir=tmp_path)
    target = tmp_path / "env_0.bin"
    blob = target.read_bytes()[:-16]
    target.write_bytes(blob)
    with pytest.raises(ValueError, match="env_0.bin"):
        sd.load_dataset(tmp_path / "manifest.json")


def test_splits(tmp_path):
    specs = small_specs(40)
    sd.make_dataset(specs, seed=5, out_dir=tmp_path)
    train = sd.load_dataset(tmp_path / "manifest.json", split="train")
    heldout = sd.load_dataset(tmp_path / "manifest.json", split="heldout")
    ood = sd.load_dataset(tmp_path / "manifest.json", split="ood")
    assert [b.environment_id for b in train] == [0, 1]
    assert [b.environment_id for b in ood] == [2]
    assert train[0].n_samples == 30 and heldout[0].n_samples == 10
    full = sd.load_dataset(tmp_path / "manifest.json")
    np.testing.assert_array_equal(
        np.vstack([train[0].observations, heldout[0].observations]), full[0].observations)


def test_fully_predictive_shortcut_at_p_one(tmp_path):
    # p=1: spurious features are a deterministic function of (curvature, target)
    spec = [sd.EnvironmentSpec(0, 1.0, 0.5, 60)]
    sd.make_dataset(spec, seed=11, out_dir=tmp_path)
    batch = sd.load_dataset(tmp_path / "manifest.json")[0]
    gen = sd.GenerationConfig()
    emb_rng = sd._embedding_rng(11)
    sd._embedding(emb_rng, gen.invariant_dim)
    a_sp, b_sp = sd._embedding(emb_rng, gen.spurious_dim)
    sp = batch.observations[:, gen.invariant_dim:gen.invariant_dim + gen.spurious_dim]
    # invert the embedding (least squares) and re-render the trajectories
    x = np.linalg.lstsq(a_sp, (sp - b_sp).T, rcond=None)[0].T
    kappa = x[:, 0] * gen.kappa_max
    target = x[:, 1] * gen.v_max
    v0 = batch.speeds
    s = sd._arc_lengths(v0, target, (target - v0) / gen.ramp_time, sd.grid_times(gen))
    pts = sd._arc_positions(kappa, s)
    np.testing.assert_allclose(pts, batch.truth_points, atol=1e-8)


def test_independence_at_p_zero(tmp_path):
    # p=0: spurious features carry no information about the trajectory
    spec = [sd.EnvironmentSpec(0, 0.0, 0.5, 2000)]
    sd.make_dataset(spec, seed=13, out_dir=tmp_path)
    batch = sd.load_dataset(tmp_path / "manifest.json")[0]
    gen = sd.GenerationConfig()
    sp = batch.observations[:, gen.invariant_dim]
    lat = batch.truth_points[:, -1, 1]
    table = np.histogram2d(sp, lat, bins=4)[0]
    _, p_value, _, _ = stats.chi2_contingency(table)
    assert p_value > 0.01


def test_shortcut_regression_degrades_out_of_distribution(tmp_path):
    # least squares from spurious features alone: low risk where p is high,
    # provably degraded risk in the p=0.1 environment
    sd.make_dataset(small_specs(1000), seed=17, out_dir=tmp_path)
    batches = sd.load_dataset(tmp_path / "manifest.json")
    gen = sd.GenerationConfig()
    lo, hi = gen.invariant_dim, gen.invariant_dim + gen.spurious_dim

    def design(b):
        return np.concatenate([b.observations[:, lo:hi], b.speeds[:, None],
                               np.ones((b.n_samples, 1))], axis=1)

    X_tr = np.vstack([design(b) for b in batches[:2]])
    Y_tr = np.vstack([b.truth_points.reshape(b.n_samples, -1) for b in batches[:2]])
    coef = np.linalg.lstsq(X_tr, Y_tr, rcond=None)[0]

    def mse(b):
        return float(np.mean((design(b) @ coef - b.truth_points.reshape(b.n_samples, -1)) ** 2))

    in_domain = np.mean([mse(b) for b in batches[:2]])
    ood = mse(batches[2])
    assert ood > 2.0 * in_domain


def test_observation_vector_layout():
    obs = sd.Observation(np.arange(3.0), np.arange(2.0), 4.5, 1)
    np.testing.assert_array_equal(obs.vector(), [0, 1, 2, 0, 1, 4.5])
