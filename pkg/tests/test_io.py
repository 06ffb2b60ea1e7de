import json
import warnings

import numpy as np
import pytest

from splatalign import (
    Camera,
    GaussianMixture,
    Quaternion,
    SceneManifest,
    Sim3Params,
    Submap,
    generate_synthetic_scene,
    normalize_weights,
    read_manifest,
    read_splat_ply,
    read_trajectory,
    write_manifest,
    write_splat_ply,
    write_trajectory,
)
from splatalign.errors import ParseError, SchemaError, UnsupportedLayoutError
from splatalign.io import parse_splat_ply

from helpers import random_mixture


def splat_mixture(rng, n=20):
    """Mixture whose covariances follow the splat storage model (with floor)."""
    from splatalign import covariance_from_splat_params

    means = rng.normal(size=(n, 3))
    covs = np.empty((n, 3, 3))
    for i in range(n):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        covs[i] = covariance_from_splat_params(rng.uniform(-3.0, 0.0, size=3), Quaternion.from_array(q))
    covs += 1e-6 * np.eye(3)
    opac = rng.uniform(0.1, 0.95, size=n)
    colors = rng.uniform(0.05, 0.95, size=(n, 3))
    return normalize_weights(GaussianMixture(means, covs, np.full(n, 1.0 / n), opac, colors))


class TestPlyRoundTrip:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        mix = splat_mixture(rng)
        path = tmp_path / "splat.ply"
        write_splat_ply(mix, path)
        back = read_splat_ply(path)
        assert back.count == mix.count
        np.testing.assert_allclose(back.means, mix.means, rtol=1e-6, atol=1e-6)
        scale = np.abs(mix.covariances).max()
        np.testing.assert_allclose(back.covariances, mix.covariances, atol=1e-6 * scale)
        np.testing.assert_allclose(back.opacities, mix.opacities, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(back.colors, mix.colors, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(back.weights, mix.weights, rtol=1e-5, atol=1e-7)

    def test_sigmoid_zero_logit(self, tmp_path):
        header = (
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            + "".join(
                f"property float {n}\n"
                for n in ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                          "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")
            )
            + "end_header\n"
        )
        row = "0 0 0 0 0 0 0 -1 -1 -1 1 0 0 0\n"
        p = tmp_path / "one.ply"
        p.write_text(header + row)
        mix = read_splat_ply(p)
        assert abs(mix.opacities[0] - 0.5) <= 1e-12

    def test_missing_rotation_properties(self, tmp_path):
        header = (
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            + "".join(
                f"property float {n}\n"
                for n in ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                          "scale_0", "scale_1", "scale_2")
            )
            + "end_header\n0 0 0 0 0 0 0 -1 -1 -1\n"
        )
        p = tmp_path / "norot.ply"
        p.write_text(header)
        with pytest.raises(UnsupportedLayoutError) as err:
            read_splat_ply(p)
        assert "rot_0" in str(err.value)

    def test_f_rest_skipped_with_warning(self, tmp_path):
        names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "f_rest_0", "opacity",
                 "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
        header = (
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            + "".join(f"property float {n}\n" for n in names)
            + "end_header\n0 0 0 0 0 0 9 0 -1 -1 -1 1 0 0 0\n"
        )
        p = tmp_path / "rest.ply"
        p.write_text(header)
        with pytest.warns(UserWarning, match="higher-order SH"):
            mix = read_splat_ply(p)
        assert mix.count == 1

    def test_nan_records_dropped_with_count(self, tmp_path):
        names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                 "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
        header = (
            "ply\nformat ascii 1.0\nelement vertex 2\n"
            + "".join(f"property float {n}\n" for n in names)
            + "end_header\n0 0 0 0 0 0 0 -1 -1 -1 1 0 0 0\nnan 0 0 0 0 0 0 -1 -1 -1 1 0 0 0\n"
        )
        p = tmp_path / "nan.ply"
        p.write_text(header)
        with pytest.warns(UserWarning, match="dropped 1 records"):
            mix = read_splat_ply(p)
        assert mix.count == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            read_splat_ply(tmp_path / "absent.ply")

    def test_non_pd_covariance_rejected_on_write(self, tmp_path):
        mix = splat_mixture(np.random.default_rng(1), n=3)
        bad = mix.replace(covariances=np.stack([np.diag([1.0, 1.0, 0.0])] * 3))
        with pytest.raises(ValueError, match="positive definite"):
            write_splat_ply(bad, tmp_path / "bad.ply")

    def test_empty_mixture_unrepresentable(self):
        with pytest.raises(Exception):
            GaussianMixture(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros(0), np.zeros(0), np.zeros((0, 3)))


class TestFuzz:
    def test_mutated_files_return_structured_errors(self, tmp_path):
        rng = np.random.default_rng(2)
        mix = splat_mixture(rng, n=6)
        base_path = tmp_path / "base.ply"
        write_splat_ply(mix, base_path)
        base = bytearray(base_path.read_bytes())

        crashes = 0
        for trial in range(2000):
            blob = bytearray(base)
            op = trial % 4
            if op == 0 and len(blob) > 4:
                cut = int(rng.integers(1, len(blob)))
                blob = blob[:cut]
            elif op == 1:
                for _ in range(int(rng.integers(1, 30))):
                    blob[int(rng.integers(0, len(blob)))] = int(rng.integers(0, 256))
            elif op == 2:
                pos = int(rng.integers(0, len(blob)))
                blob[pos:pos] = bytes(rng.integers(0, 256, size=int(rng.integers(1, 50))))
            else:
                head = blob[: int(rng.integers(0, 200))]
                blob = head + bytes(rng.integers(0, 256, size=int(rng.integers(0, 100))))
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    parse_splat_ply(bytes(blob), source=f"fuzz_{trial}")
            except ParseError:
                pass
            except Exception:  # noqa: BLE001
                crashes += 1
        assert crashes == 0

    def test_mutated_files_on_disk(self, tmp_path):
        rng = np.random.default_rng(3)
        mix = splat_mixture(rng, n=4)
        base_path = tmp_path / "base.ply"
        write_splat_ply(mix, base_path)
        base = bytearray(base_path.read_bytes())
        for trial in range(50):
            blob = bytearray(base)
            for _ in range(5):
                blob[int(rng.integers(0, len(blob)))] = int(rng.integers(0, 256))
            p = tmp_path / f"m{trial}.ply"
            p.write_bytes(bytes(blob))
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    read_splat_ply(p)
            except ParseError:
                pass


class TestManifest:
    def make_manifest(self, tmp_path, with_gt=True, n_submaps=2):
        rng = np.random.default_rng(4)
        submaps = []
        poses = []
        for i in range(n_submaps):
            mix = splat_mixture(rng, n=8)
            cam = Camera.look_at(np.array([0.0, 0.0, -3.0]), np.zeros(3), width=32, height=32)
            submaps.append(Submap(mix, (cam,), name=f"s{i}"))
            poses.append(Sim3Params.identity())
        manifest = SceneManifest(tuple(submaps), tuple(poses) if with_gt else None, 2.0)
        return write_manifest(manifest, tmp_path / "scene")

    def test_write_read_round_trip(self, tmp_path):
        path = self.make_manifest(tmp_path)
        manifest = read_manifest(path)
        assert len(manifest.submaps) == 2
        assert manifest.ground_truth_poses is not None
        assert manifest.submaps[0].cameras[0].width == 32
        assert manifest.scene_extent == 2.0

    def test_unknown_field_warns_not_errors(self, tmp_path):
        path = self.make_manifest(tmp_path, with_gt=False)
        doc = json.loads(path.read_text())
        doc["experimental_flag"] = True
        path.write_text(json.dumps(doc))
        with pytest.warns(UserWarning, match="experimental_flag"):
            manifest = read_manifest(path)
        assert len(manifest.submaps) == 2

    def test_schema_error_carries_pointer(self, tmp_path):
        path = self.make_manifest(tmp_path, with_gt=False)
        doc = json.loads(path.read_text())
        del doc["submaps"][1]["ply"]
        path.write_text(json.dumps(doc))
        with pytest.raises(SchemaError) as err:
            read_manifest(path)
        assert err.value.pointer == "/submaps/1/ply"

    def test_bad_version(self, tmp_path):
        path = self.make_manifest(tmp_path, with_gt=False)
        doc = json.loads(path.read_text())
        doc["schema_version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(SchemaError):
            read_manifest(path)

    def test_synthetic_scene_round_trip(self, tmp_path):
        manifest = generate_synthetic_scene(7, n_components=40, n_submaps=2, overlap_fraction=0.6)
        path = write_manifest(manifest, tmp_path / "synth")
        back = read_manifest(path)
        assert len(back.submaps) == 2
        orig = manifest.submaps[0].mixture
        re = back.submaps[0].mixture
        np.testing.assert_allclose(re.means, orig.means, atol=1e-5)


class TestTrajectory:
    def test_round_trip(self, tmp_path):
        rows = [
            (0, np.array([0.0, 0.0, 0.0]), Quaternion.identity()),
            (1, np.array([1.0, 2.0, 3.0]), Quaternion.identity()),
        ]
        p = tmp_path / "traj.txt"
        write_trajectory(rows, p)
        pts = read_trajectory(p)
        np.testing.assert_allclose(pts, [[0, 0, 0], [1, 2, 3]], atol=1e-9)

    def test_skips_failed_rows(self, tmp_path):
        rows = [(0, np.zeros(3), Quaternion.identity()), (1, None, None)]
        p = tmp_path / "traj.txt"
        write_trajectory(rows, p)
        assert read_trajectory(p).shape == (1, 3)

    def test_malformed(self, tmp_path):
        p = tmp_path / "traj.txt"
        p.write_text("0 1 2\n")
        with pytest.raises(ParseError):
            read_trajectory(p)
        p.write_text("")
        with pytest.raises(ParseError):
            read_trajectory(p)
