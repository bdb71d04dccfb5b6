import math

import numpy as np
import pytest

from isoshape.errors import (
    ContractError,
    DegenerateInputError,
    MeshParseError,
    ParameterError,
)
from isoshape.geometry import (
    PointCloud,
    TriangleMesh,
    bounding_box,
    distortion_stats,
    generate_synthetic,
    normalize,
    parse_off,
    read_csv_cloud,
    read_xyz,
    sample_surface,
    write_csv_cloud,
    write_off,
    write_ply,
    write_xyz,
)
from isoshape.numkit import Rng, gaussian_matrix, qr_haar

MINIMAL_OFF = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"


def random_cloud(rng, n=32, scale=3.0):
    return PointCloud(rng.normal(size=(n, 3), std=scale))


class TestPointCloud:
    def test_points_are_immutable(self):
        cloud = PointCloud(np.zeros((4, 3)))
        with pytest.raises(ValueError):
            cloud.points[0, 0] = 1.0

    def test_rejects_nonfinite(self):
        with pytest.raises(ContractError):
            PointCloud(np.array([[0.0, 0.0, np.inf]] * 4))

    def test_rejects_bad_shape(self):
        with pytest.raises(Exception):
            PointCloud(np.zeros((4, 2)))


class TestNormalize:
    def test_already_normalized(self):
        cloud = PointCloud(np.array([[1.0, 0, 0], [-1.0, 0, 0]]))
        out = normalize(cloud, "unit_sphere")
        assert np.allclose(out.points, cloud.points, atol=1e-15)

    def test_translate_then_scale(self):
        cloud = PointCloud(np.array([[2.0, 2, 2], [4.0, 2, 2]]))
        out = normalize(cloud, "unit_sphere")
        assert np.allclose(out.points, [[-1, 0, 0], [1, 0, 0]], atol=1e-15)

    def test_idempotent(self):
        rng = Rng(31)
        for _ in range(20):
            cloud = random_cloud(rng)
            once = normalize(cloud)
            twice = normalize(once)
            assert np.max(np.abs(twice.points - once.points)) < 1e-12

    def test_unit_sphere_postconditions(self):
        rng = Rng(32)
        out = normalize(random_cloud(rng), "unit_sphere")
        assert np.max(np.abs(np.mean(out.points, axis=0))) < 1e-12
        assert abs(np.max(np.linalg.norm(out.points, axis=1)) - 1.0) < 1e-12

    def test_unit_cube_postconditions(self):
        rng = Rng(33)
        out = normalize(random_cloud(rng), "unit_cube")
        extents = out.points.max(axis=0) - out.points.min(axis=0)
        assert abs(np.max(extents) - 1.0) < 1e-12

    def test_centroid_stable_under_orthogonal_map(self):
        rng = Rng(34)
        for _ in range(10):
            cloud = normalize(random_cloud(rng))
            q, _ = qr_haar(gaussian_matrix(3, 3, 0.0, 1.0, rng))
            mapped = normalize(cloud.with_points(cloud.points @ q.T), "unit_sphere")
            assert np.max(np.abs(np.mean(mapped.points, axis=0))) < 1e-10

    def test_coincident_points_rejected(self):
        with pytest.raises(DegenerateInputError):
            normalize(PointCloud(np.ones((5, 3))))

    def test_label_preserved(self):
        out = normalize(PointCloud(np.array([[0.0, 0, 0], [2.0, 0, 0]]), label="box"))
        assert out.label == "box"


class TestOffFormat:
    def test_minimal_file(self):
        mesh = parse_off(MINIMAL_OFF)
        assert len(mesh.vertices) == 3
        assert len(mesh.faces) == 1

    def test_fused_header(self):
        fused = MINIMAL_OFF.replace("OFF\n3 1 0", "OFF3 1 0")
        mesh = parse_off(fused)
        assert np.array_equal(mesh.vertices, parse_off(MINIMAL_OFF).vertices)
        assert np.array_equal(mesh.faces, parse_off(MINIMAL_OFF).faces)

    def test_fan_triangulation(self):
        text = "OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n"
        mesh = parse_off(text)
        assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]

    def test_accepts_bytes_and_comments(self):
        mesh = parse_off(("# comment\n" + MINIMAL_OFF).encode())
        assert len(mesh.faces) == 1

    def test_missing_header(self):
        with pytest.raises(MeshParseError):
            parse_off("3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")

    def test_index_out_of_range_reports_line(self):
        bad = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 9\n"
        with pytest.raises(MeshParseError) as err:
            parse_off(bad)
        assert err.value.line == 6

    def test_truncated_file(self):
        with pytest.raises(MeshParseError):
            parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n")

    def test_zero_area_faces_dropped(self):
        text = "OFF\n3 2 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n3 0 0 1\n"
        assert len(parse_off(text).faces) == 1

    def test_round_trip_exact(self):
        rng = Rng(41)
        verts = rng.normal(size=(10, 3)) * 1e-3
        faces = np.array([[0, 1, 2], [3, 4, 5], [6, 7, 8]])
        mesh = TriangleMesh(verts, faces)
        back = parse_off(write_off(mesh))
        assert np.array_equal(back.vertices, mesh.vertices)
        assert np.array_equal(back.faces, mesh.faces)


class TestSampleSurface:
    def unit_square(self):
        verts = np.array([[0.0, 0, 0], [1.0, 0, 0], [1.0, 1, 0], [0.0, 1, 0]])
        return TriangleMesh(verts, np.array([[0, 1, 2], [0, 2, 3]]))

    def test_area_weighting_on_unit_square(self):
        pts = sample_surface(self.unit_square(), 10**5, Rng(50)).points
        frac = np.mean(pts[:, 0] + pts[:, 1] < 1.0)
        assert abs(frac - 0.5) < 0.01

    def test_points_lie_on_face_plane(self):
        verts = np.array([[0.0, 0, 1], [1.0, 0, 1], [0.0, 1, 1]])
        mesh = TriangleMesh(verts, np.array([[0, 1, 2]]))
        pts = sample_surface(mesh, 3, Rng(51)).points
        assert np.max(np.abs(pts[:, 2] - 1.0)) < 1e-12

    def test_tiny_face_rarely_sampled(self):
        s = math.sqrt(1e-6)  # area ratio 1e6 between the two triangles
        verts = np.array(
            [[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [5.0, 0, 0], [5.0 + s, 0, 0], [5.0, s, 0]]
        )
        mesh = TriangleMesh(verts, np.array([[0, 1, 2], [3, 4, 5]]))
        pts = sample_surface(mesh, 10**4, Rng(52)).points
        on_large = np.mean(pts[:, 0] < 4.0)
        assert on_large >= 0.999

    def test_determinism_and_seed_sensitivity(self):
        mesh = self.unit_square()
        a = sample_surface(mesh, 100, Rng(1)).points
        b = sample_surface(mesh, 100, Rng(1)).points
        c = sample_surface(mesh, 100, Rng(2)).points
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_degenerate_mesh_rejected(self):
        verts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        mesh = TriangleMesh(verts, np.array([[0, 1, 2]]))
        with pytest.raises(DegenerateInputError):
            sample_surface(mesh, 10, Rng(1))


class TestGenerateSynthetic:
    def test_sphere_norms(self):
        cloud = generate_synthetic("sphere", {"radius": 1.0}, 10**4, Rng(60))
        norms = np.linalg.norm(cloud.points, axis=1)
        assert np.max(np.abs(norms - 1.0)) < 1e-12
        assert cloud.label == "sphere"

    def test_torus_implicit_equation(self):
        cloud = generate_synthetic(
            "torus", {"big_radius": 1.0, "small_radius": 0.25}, 2000, Rng(61)
        )
        x, y, z = cloud.points.T
        residual = (np.sqrt(x**2 + y**2) - 1.0) ** 2 + z**2
        assert np.max(np.abs(residual - 0.0625)) < 1e-10

    def test_box_face_fractions(self):
        cloud = generate_synthetic("box", {"sx": 1.0, "sy": 2.0, "sz": 4.0}, 10**4, Rng(62))
        pts = cloud.points
        areas = {"x": 2.0 * 4.0, "y": 1.0 * 4.0, "z": 1.0 * 2.0}
        total = 2 * sum(areas.values())
        for axis, name in enumerate("xyz"):
            half = [1.0, 2.0, 4.0][axis] / 2.0
            frac = np.mean(np.abs(np.abs(pts[:, axis]) - half) < 1e-12)
            assert abs(frac - 2 * areas[name] / total) < 0.02

    def test_cylinder_on_surface(self):
        cloud = generate_synthetic("cylinder", {"radius": 0.5, "height": 2.0}, 5000, Rng(63))
        x, y, z = cloud.points.T
        rho = np.sqrt(x**2 + y**2)
        on_side = np.abs(rho - 0.5) < 1e-12
        on_cap = np.abs(np.abs(z) - 1.0) < 1e-12
        assert np.all(on_side | on_cap)
        assert np.all(rho <= 0.5 + 1e-12)
        assert np.all(np.abs(z) <= 1.0 + 1e-12)

    def test_bad_parameters(self):
        with pytest.raises(ParameterError):
            generate_synthetic("sphere", {"radius": -1.0}, 100, Rng(1))
        with pytest.raises(ParameterError):
            generate_synthetic("pyramid", None, 100, Rng(1))
        with pytest.raises(ParameterError):
            generate_synthetic("sphere", None, 3, Rng(1))


class TestDistortionStats:
    def test_identity(self):
        cloud = random_cloud(Rng(70))
        assert distortion_stats(cloud, cloud) == (1.0, 1.0, 0.0)

    def test_orthogonal_map_is_isometry(self):
        rng = Rng(71)
        cloud = random_cloud(rng)
        q, _ = qr_haar(gaussian_matrix(3, 3, 0.0, 1.0, rng))
        lo, hi, mean_log = distortion_stats(cloud, cloud.with_points(cloud.points @ q.T))
        assert abs(lo - 1.0) < 1e-10 and abs(hi - 1.0) < 1e-10 and mean_log < 1e-10

    def test_uniform_scaling(self):
        cloud = random_cloud(Rng(72))
        lo, hi, mean_log = distortion_stats(cloud, cloud.with_points(2.0 * cloud.points))
        assert lo == 2.0 and hi == 2.0
        assert abs(mean_log - math.log(2.0)) < 1e-14

    def test_mismatched_counts(self):
        with pytest.raises(ContractError):
            distortion_stats(random_cloud(Rng(1), n=8), random_cloud(Rng(2), n=9))


class TestCloudIO:
    def test_xyz_round_trip_exact(self):
        cloud = random_cloud(Rng(80), n=16)
        back = read_xyz(write_xyz(cloud))
        assert np.array_equal(back.points, cloud.points)

    def test_xyz_comments_skipped(self):
        cloud = read_xyz("# header\n0 0 0\n1 2 3 # trailing\n")
        assert len(cloud) == 2

    def test_csv_round_trip_with_label(self):
        cloud = PointCloud(Rng(81).normal(size=(8, 3)), label="torus")
        back = read_csv_cloud(write_csv_cloud(cloud))
        assert np.array_equal(back.points, cloud.points)
        assert back.label == "torus"

    def test_csv_mixed_labels_rejected(self):
        text = "x,y,z,label\n0,0,0,a\n1,1,1,b\n"
        with pytest.raises(MeshParseError):
            read_csv_cloud(text)

    def test_ply_bytes(self):
        cloud = PointCloud(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
        blob = write_ply(cloud)
        header, _, body = blob.partition(b"end_header\n")
        assert b"binary_little_endian" in header
        assert b"element vertex 2" in header
        vals = np.frombuffer(body, dtype="<f8").reshape(2, 3)
        assert np.array_equal(vals, cloud.points)

    def test_bounding_box_inflation(self):
        cloud = PointCloud(np.array([[0.0, 0, 0], [2.0, 4.0, 8.0]]))
        lo, hi = bounding_box(cloud, inflate=0.1)
        assert np.allclose(lo, [-0.2, -0.4, -0.8])
        assert np.allclose(hi, [2.2, 4.4, 8.8])
