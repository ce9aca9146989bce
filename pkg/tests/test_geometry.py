import numpy as np
import pytest

from graspsmith.errors import EmptyInput
from graspsmith.geometry import (PointCloud, capsule_signed_distances,
                                 chamfer_distance, contact_map,
                                 contact_map_difference, extract_contacts,
                                 load_xyz, nearest_neighbor_index,
                                 penetration_depth, save_xyz)
from graspsmith.hand import (GraspPose, default_hand, forward_kinematics,
                             link_surface_points)


def random_grasp_scene(seed, n_points=300):
    """A hand pose near a small random cloud, for contact/penetration
    oracle comparisons."""
    rng = np.random.default_rng(seed)
    model = default_hand()
    cloud = PointCloud(rng.uniform(-0.05, 0.05, (n_points, 3))
                       + np.array([0.0, 0.08, 0.10]))
    limits = model.joint_limits()
    pose = GraspPose(rng.uniform(-0.02, 0.02, 3),
                     rng.uniform(-0.3, 0.3, 3),
                     rng.uniform(limits[:, 0], limits[:, 1]))
    return model, pose, cloud


# --- nearest neighbors -------------------------------------------------------


def test_nn_query_of_member_point_is_itself():
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(100, 3)))
    tree = nearest_neighbor_index(cloud)
    d, i = tree.query(cloud.points[17])
    assert d == 0.0 and i == 17


def test_nn_single_point_cloud():
    cloud = PointCloud([[1.0, 2.0, 3.0]])
    tree = nearest_neighbor_index(cloud)
    d, i = tree.query([0.0, 0.0, 0.0])
    assert i == 0


def test_nn_matches_linear_scan():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(5000, 3))
    tree = nearest_neighbor_index(PointCloud(pts))
    queries = rng.normal(size=(1000, 3))
    d, idx = tree.query(queries)
    # O(N) linear-scan oracle
    for q, dq, iq in zip(queries, d, idx):
        all_d = np.linalg.norm(pts - q, axis=1)
        j = int(np.argmin(all_d))
        assert abs(all_d[j] - dq) < 1e-12
        assert all_d[iq] <= all_d[j] + 1e-12


# --- chamfer -----------------------------------------------------------------


def test_chamfer_identity_is_zero():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(200, 3))
    assert chamfer_distance(pts, pts) == 0.0


def test_chamfer_symmetric_sum_convention():
    # single points 1 m apart: 1.0 + 1.0 under the symmetric sum
    assert chamfer_distance([[0, 0, 0]], [[0, 0, 1]]) == pytest.approx(2.0)


def test_chamfer_matches_double_loop_oracle():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(500, 3))
    b = rng.normal(size=(500, 3)) + 0.5
    got = chamfer_distance(a, b)
    d_ab = np.array([np.linalg.norm(b - p, axis=1).min() for p in a])
    d_ba = np.array([np.linalg.norm(a - p, axis=1).min() for p in b])
    oracle = d_ab.mean() + d_ba.mean()
    assert abs(got - oracle) <= 1e-12


def test_chamfer_symmetry():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(80, 3))
    b = rng.normal(size=(120, 3))
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a),
                                                   abs=1e-15)


def test_chamfer_rejects_empty():
    with pytest.raises(EmptyInput):
        chamfer_distance(np.empty((0, 3)), [[0, 0, 0]])


# --- contacts ----------------------------------------------------------------


def exhaustive_contacts(model, pose, cloud, threshold):
    """All-(point, link)-pairs oracle."""
    poses = forward_kinematics(model, pose)
    out = {}
    for i, link in enumerate(model.links):
        rot, trans = poses.rotations[i], poses.translations[i]
        a = rot @ link.capsule.a + trans
        b = rot @ link.capsule.b + trans
        best_d, best_j = np.inf, None
        for j, p in enumerate(cloud.points):
            ab = b - a
            denom = ab @ ab
            t = 0.0 if denom < 1e-24 else float(
                np.clip((p - a) @ ab / denom, 0, 1))
            d = np.linalg.norm(p - (a + t * ab)) - link.capsule.radius
            if d < best_d:
                best_d, best_j = d, j
        if best_d <= threshold:
            out[link.name] = (best_j, best_d)
    return out


def test_contacts_empty_when_far():
    model, pose, cloud = random_grasp_scene(5)
    far = GraspPose(pose.translation + np.array([0, 0, 5.0]),
                    pose.rotation, pose.joint_angles)
    assert len(extract_contacts(model, far, cloud)) == 0


def test_contact_on_exact_surface_point():
    model = default_hand()
    pose = GraspPose(np.zeros(3), np.zeros(3), np.zeros(model.dof))
    poses = forward_kinematics(model, pose)
    i = model.link_index("ffdistal")
    link = model.links[i]
    mid = 0.5 * (link.capsule.a + link.capsule.b)
    # offset radially from the capsule axis to land exactly on the surface
    surface_local = mid + np.array([link.capsule.radius, 0.0, 0.0])
    surface = poses.rotations[i] @ surface_local + poses.translations[i]
    cloud = PointCloud(np.vstack([surface, [[1, 1, 1]], [[2, 2, 2]]]))
    contacts = extract_contacts(model, pose, cloud)
    rec = {r.link: r for r in contacts}["ffdistal"]
    assert abs(rec.signed_distance) < 1e-12
    assert np.array_equal(rec.position, surface)


def test_contacts_match_exhaustive_oracle():
    for seed in range(6):
        model, pose, cloud = random_grasp_scene(seed, n_points=250)
        threshold = 0.01
        got = extract_contacts(model, pose, cloud, threshold)
        oracle = exhaustive_contacts(model, pose, cloud, threshold)
        assert {r.link for r in got} == set(oracle)
        for r in got:
            j, d = oracle[r.link]
            assert abs(r.signed_distance - d) <= 1e-12
            assert np.abs(r.position - cloud.points[j]).max() <= 1e-12


def test_contacts_invariant_under_point_permutation():
    model, pose, cloud = random_grasp_scene(7, n_points=200)
    rng = np.random.default_rng(8)
    perm = rng.permutation(len(cloud))
    shuffled = PointCloud(cloud.points[perm])
    a = extract_contacts(model, pose, cloud, 0.02)
    b = extract_contacts(model, pose, shuffled, 0.02)
    assert a.links == b.links
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.position, rb.position)


def test_contacts_sorted_canonically():
    model, pose, cloud = random_grasp_scene(9, n_points=400)
    contacts = extract_contacts(model, pose, cloud, 0.05)
    order = {n: i for i, n in enumerate(model.canonical_link_order)}
    ranks = [order[r.link] for r in contacts]
    assert ranks == sorted(ranks)


# --- penetration -------------------------------------------------------------


def test_penetration_zero_when_far():
    model, pose, cloud = random_grasp_scene(10)
    far = GraspPose(pose.translation + np.array([5, 0, 0]),
                    pose.rotation, pose.joint_angles)
    assert penetration_depth(model, far, cloud) == 0.0


def test_penetration_point_on_capsule_axis():
    model = default_hand()
    pose = GraspPose(np.zeros(3), np.zeros(3), np.zeros(model.dof))
    poses = forward_kinematics(model, pose)
    i = model.link_index("mfdistal")
    link = model.links[i]
    mid_local = 0.5 * (link.capsule.a + link.capsule.b)
    mid = poses.rotations[i] @ mid_local + poses.translations[i]
    cloud = PointCloud(np.vstack([mid, [[1, 1, 1]]]))
    assert penetration_depth(model, pose, cloud) == pytest.approx(
        link.capsule.radius, abs=1e-12)


def test_penetration_matches_oracle():
    for seed in range(6):
        model, pose, cloud = random_grasp_scene(seed + 20, n_points=250)
        poses = forward_kinematics(model, pose)
        sd = capsule_signed_distances(model, poses, cloud.points)
        oracle = max(0.0, -sd.min())
        assert abs(penetration_depth(model, pose, cloud)
                   - oracle) <= 1e-12


def test_penetration_monotone_in_cloud_growth():
    model, pose, cloud = random_grasp_scene(30, n_points=150)
    rng = np.random.default_rng(31)
    extra = rng.uniform(-0.05, 0.05, (150, 3)) + np.array([0, 0.08, 0.10])
    bigger = PointCloud(np.vstack([cloud.points, extra]))
    assert penetration_depth(model, pose, bigger) >= \
        penetration_depth(model, pose, cloud)


# --- contact maps ------------------------------------------------------------


def test_contact_map_is_one_at_coincident_point():
    cloud = PointCloud([[0, 0, 0], [1, 0, 0]])
    values = contact_map(cloud, np.array([[0.0, 0.0, 0.0]]))
    assert values[0] == pytest.approx(1.0)
    assert np.all(values > 0) and np.all(values <= 1)


def test_contact_map_difference_zero_for_identical_hands():
    model, pose, cloud = random_grasp_scene(40)
    pts = link_surface_points(model, forward_kinematics(model, pose), 16)
    m1 = contact_map(cloud, pts)
    m2 = contact_map(cloud, pts)
    assert contact_map_difference(m1, m2) == 0.0


def test_contact_map_matches_linear_scan():
    rng = np.random.default_rng(41)
    cloud = PointCloud(rng.normal(size=(300, 3)))
    hand_pts = rng.normal(size=(120, 3))
    got = contact_map(cloud, hand_pts, tau=0.005)
    d = np.array([np.linalg.norm(hand_pts - p, axis=1).min()
                  for p in cloud.points])
    assert np.abs(got - np.exp(-d / 0.005)).max() <= 1e-12


# --- xyz I/O -----------------------------------------------------------------


def test_xyz_round_trip_exact(tmp_path):
    rng = np.random.default_rng(42)
    cloud = PointCloud(rng.normal(size=(50, 3)))
    path = str(tmp_path / "c.xyz")
    save_xyz(cloud, path)
    loaded = load_xyz(path)
    assert np.array_equal(loaded.points, cloud.points)


def test_xyz_round_trip_with_normals(tmp_path):
    rng = np.random.default_rng(43)
    n = rng.normal(size=(30, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    cloud = PointCloud(rng.normal(size=(30, 3)), n)
    path = str(tmp_path / "cn.xyz")
    save_xyz(cloud, path)
    loaded = load_xyz(path)
    assert np.array_equal(loaded.normals, cloud.normals)


def test_xyz_rejects_non_finite(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("0 0 0\n1 nan 2\n")
    with pytest.raises(ValueError):
        load_xyz(str(path))


def test_xyz_rejects_wrong_column_count(tmp_path):
    path = tmp_path / "bad2.xyz"
    path.write_text("0 0\n")
    with pytest.raises(ValueError):
        load_xyz(str(path))
