import numpy as np
import pytest

from graspsmith.errors import InsufficientSamples, NormalsRequired
from graspsmith.geometry import ContactRecord, ContactSet, PointCloud
from graspsmith.hand import GraspPose, default_hand
from graspsmith.quality import (DiversityStats, WrenchSet, build_wrench_set,
                                diversity, q1_metric, sphere_directions,
                                stability_proxy)


def sphere_cloud(radius=0.05, n=400, seed=0, extra_points=()):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = radius * d
    nrm = d
    for p in extra_points:
        p = np.asarray(p, dtype=float)
        pts = np.vstack([pts, p])
        nrm = np.vstack([nrm, p / np.linalg.norm(p)])
    return PointCloud(pts, nrm)


def contacts_at(model, points):
    return ContactSet.from_records(
        [ContactRecord(link, np.asarray(p, dtype=float), 0.0)
         for link, p in points], model)


# --- wrench construction ----------------------------------------------------


def test_frictionless_contact_gives_single_wrench():
    model = default_hand()
    cloud = sphere_cloud(extra_points=[[0.05, 0, 0]])
    contacts = contacts_at(model, [("thdistal", [0.05, 0, 0])])
    ws = build_wrench_set(contacts, cloud, mu=0.0)
    assert len(ws) == 1


def test_radial_contact_has_zero_torque():
    model = default_hand()
    r = 0.05
    cloud = sphere_cloud(radius=r, extra_points=[[r, 0, 0]])
    contacts = contacts_at(model, [("thdistal", [r, 0, 0])])
    ws = build_wrench_set(contacts, cloud, mu=0.0)
    force, torque = ws.wrenches[0, :3], ws.wrenches[0, 3:]
    # centroid of a uniform sphere sample is near the origin; the radial
    # inward force points back through it
    assert np.abs(force - np.array([-1.0, 0, 0])).max() < 0.02
    assert np.linalg.norm(torque) < 0.02


def test_pyramid_edges_have_exact_friction_ratio():
    model = default_hand()
    cloud = sphere_cloud(extra_points=[[0.05, 0, 0]])
    contacts = contacts_at(model, [("thdistal", [0.05, 0, 0])])
    mu = 0.5
    ws = build_wrench_set(contacts, cloud, mu=mu, pyramid_edges=8)
    assert len(ws) == 8
    n_in = -cloud.normals[-1]
    for w in ws.wrenches:
        f = w[:3]
        normal_part = float(f @ n_in)
        tangential = np.linalg.norm(f - normal_part * n_in)
        assert abs(tangential / normal_part - mu) < 1e-9


def test_wrench_set_requires_normals_when_estimation_disabled():
    model = default_hand()
    cloud = PointCloud([[0.05, 0, 0], [0, 0.05, 0], [-0.05, 0, 0]])
    contacts = contacts_at(model, [("thdistal", [0.05, 0, 0])])
    with pytest.raises(NormalsRequired):
        build_wrench_set(contacts, cloud, allow_estimated_normals=False)
    ws = build_wrench_set(contacts, cloud)  # centroid-based estimate
    assert ws.normals_estimated


# --- Q1 ----------------------------------------------------------------------


def test_q1_single_contact_is_exactly_zero():
    model = default_hand()
    for mu in (0.0, 0.5):
        cloud = sphere_cloud(extra_points=[[0.05, 0, 0]])
        contacts = contacts_at(model, [("thdistal", [0.05, 0, 0])])
        ws = build_wrench_set(contacts, cloud, mu=mu)
        assert q1_metric(ws, 1024) == 0.0


def test_q1_antipodal_sphere_contacts_positive():
    model = default_hand()
    r = 0.05
    cloud = sphere_cloud(radius=r,
                         extra_points=[[r, 0, 0], [-r, 0, 0]])
    contacts = contacts_at(model, [("thdistal", [r, 0, 0]),
                                   ("ffdistal", [-r, 0, 0])])
    ws = build_wrench_set(contacts, cloud, mu=0.5)
    assert q1_metric(ws, 4096) > 0.0


def test_q1_empty_wrench_set_warns_and_returns_zero():
    ws = WrenchSet(np.empty((0, 6)), 0.5, 8, 1.0)
    with pytest.warns(UserWarning):
        assert q1_metric(ws, 1024) == 0.0


def _random_closure_wrenches(seed, n_contacts=3):
    """Random contacts on a sphere, resampled until the configuration is
    robustly force-closed (so the refinement comparison is well posed)."""
    model = default_hand()
    rng = np.random.default_rng(seed)
    links = ["thdistal", "ffdistal", "mfdistal", "rfdistal", "lfdistal"]
    for _ in range(50):
        d = rng.normal(size=(n_contacts, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = 0.05 * d
        cloud = sphere_cloud(seed=seed, extra_points=list(pts))
        contacts = contacts_at(
            model, list(zip(links[:n_contacts], pts)))
        ws = build_wrench_set(contacts, cloud, mu=0.5)
        if q1_metric(ws, 4096) > 1e-3:
            return ws
    raise AssertionError("no force-closed configuration found")


def test_q1_three_contact_cases_match_refinement_oracle():
    for seed in range(5):
        ws = _random_closure_wrenches(seed)
        coarse = q1_metric(ws, 4096)
        fine = q1_metric(ws, 40960)  # 10x directions
        assert fine > 0
        assert coarse >= fine - 1e-12  # support sampling shrinks downward
        assert (coarse - fine) / fine < 0.05


def test_q1_rotation_invariance():
    model = default_hand()
    rng = np.random.default_rng(7)
    for seed in range(4):
        ws = _random_closure_wrenches(seed + 100)
        base = q1_metric(ws, 4096)
        # rotating the whole configuration rotates forces and torques
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        rot = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z),
             2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z),
             2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x),
             1 - 2 * (x * x + y * y)]])
        rotated = np.hstack([ws.wrenches[:, :3] @ rot.T,
                             ws.wrenches[:, 3:] @ rot.T])
        ws_rot = WrenchSet(rotated, ws.mu, ws.pyramid_edges,
                           ws.torque_scale)
        got = q1_metric(ws_rot, 4096)
        assert abs(got - base) / base < 0.02


def test_q1_monotone_when_contact_added():
    model = default_hand()
    rng = np.random.default_rng(9)
    for seed in range(4):
        d = rng.normal(size=(4, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = 0.05 * d
        cloud = sphere_cloud(seed=seed, extra_points=list(pts))
        links = ["thdistal", "ffdistal", "mfdistal", "rfdistal"]
        small = contacts_at(model, list(zip(links[:3], pts[:3])))
        large = contacts_at(model, list(zip(links, pts)))
        # same torque scale so the wrench sets nest; the raw fixed grid
        # (refine=False) is exactly monotone under hull growth
        scale = 1.0 / 0.05
        ws_small = build_wrench_set(small, cloud, mu=0.5,
                                    torque_scale=scale)
        ws_large = build_wrench_set(large, cloud, mu=0.5,
                                    torque_scale=scale)
        assert q1_metric(ws_large, 2048, refine=False) >= \
            q1_metric(ws_small, 2048, refine=False) - 1e-12


def test_sphere_directions_deterministic_and_unit():
    a = sphere_directions(512)
    b = sphere_directions(512)
    assert np.array_equal(a, b)
    assert np.abs(np.linalg.norm(a, axis=1) - 1.0).max() < 1e-12


# --- diversity ---------------------------------------------------------------


def _pose(t, r, q):
    return GraspPose(t, r, q)


def test_diversity_identical_grasps_zero():
    q = np.zeros(22)
    g = _pose([0.1, 0, 0], [0, 0, 0], q)
    stats = diversity([g, g, g])
    assert stats.delta_t == pytest.approx(0.0, abs=1e-12)
    assert stats.delta_r == pytest.approx(0.0, abs=1e-12)
    assert stats.delta_q == pytest.approx(0.0, abs=1e-12)


def test_diversity_translation_aggregation_convention():
    q = np.zeros(22)
    a = _pose([0.01, 0, 0], np.zeros(3), q)
    b = _pose([-0.01, 0, 0], np.zeros(3), q)
    stats = diversity([a, b])
    # per-dim population stds are (1 cm, 0, 0); group mean = 1/3 cm
    assert stats.delta_t == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert stats.delta_r == 0.0
    assert stats.delta_q == 0.0


def test_diversity_matches_manual_recomputation():
    rng = np.random.default_rng(11)
    grasps = [_pose(rng.normal(size=3), rng.normal(size=3),
                    rng.normal(size=22)) for _ in range(40)]
    stats = diversity(grasps)
    mat = np.array([g.as_vector() for g in grasps])
    stds = mat.std(axis=0, ddof=0)
    assert stats.delta_t == pytest.approx(stds[:3].mean() * 100, abs=1e-9)
    assert stats.delta_r == pytest.approx(
        np.degrees(stds[3:6]).mean(), abs=1e-9)
    assert stats.delta_q == pytest.approx(
        np.degrees(stds[6:]).mean(), abs=1e-9)


def test_diversity_permutation_invariant():
    rng = np.random.default_rng(12)
    grasps = [_pose(rng.normal(size=3), rng.normal(size=3),
                    rng.normal(size=22)) for _ in range(10)]
    a = diversity(grasps)
    b = diversity(list(reversed(grasps)))
    assert a == b


def test_diversity_requires_two_samples():
    with pytest.raises(InsufficientSamples):
        diversity([_pose(np.zeros(3), np.zeros(3), np.zeros(22))])


# --- stability proxy ---------------------------------------------------------


def test_proxy_zero_q1_never_stable():
    assert stability_proxy(0.0, 0.0) is False
    assert stability_proxy(0.0, 1.0) is False


def test_proxy_defaults():
    assert stability_proxy(0.1, 0.0) is True
    assert stability_proxy(0.1, 0.004) is True
    assert stability_proxy(0.1, 0.006) is False


def test_proxy_rejects_negative_thresholds():
    with pytest.raises(ValueError):
        stability_proxy(0.1, 0.0, q1_min=-1.0)
