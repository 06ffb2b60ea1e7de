"""File formats: 3DGS PLY splats, scene manifests, trajectories, reports.

The PLY reader accepts the de-facto splat layout (positions, f_dc color
coefficients, opacity logit, log scales, quaternion) in binary little-endian
or ASCII form. Activations are applied on read: sigmoid opacity, degree-0 SH
color, covariance assembled from scales/rotation plus the 1e-6 I floor. The
writer applies the inverses, so read(write(m)) reproduces a mixture up to
float32 storage precision. Any malformed input surfaces as ParseError.
"""
from __future__ import annotations

import json
import math
import struct
import warnings
from pathlib import Path

import numpy as np

from .core import Camera, GaussianMixture, Quaternion, Sim3Params, normalize_weights
from .errors import ParseError, SchemaError, UnsupportedLayoutError
from .pipeline import PipelineReport, SceneManifest, Submap

SH_C0 = 0.28209479177387814
COVARIANCE_FLOOR = 1e-6

REQUIRED_PROPERTIES = (
    "x",
    "y",
    "z",
    "f_dc_0",
    "f_dc_1",
    "f_dc_2",
    "opacity",
    "scale_0",
    "scale_1",
    "scale_2",
    "rot_0",
    "rot_1",
    "rot_2",
    "rot_3",
)

_PLY_TYPES = {
    "float": ("<f4", 4),
    "float32": ("<f4", 4),
    "double": ("<f8", 8),
    "float64": ("<f8", 8),
    "uchar": ("<u1", 1),
    "uint8": ("<u1", 1),
    "char": ("<i1", 1),
    "int8": ("<i1", 1),
    "short": ("<i2", 2),
    "int16": ("<i2", 2),
    "ushort": ("<u2", 2),
    "uint16": ("<u2", 2),
    "int": ("<i4", 4),
    "int32": ("<i4", 4),
    "uint": ("<u4", 4),
    "uint32": ("<u4", 4),
}


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def read_splat_ply(path) -> GaussianMixture:
    """Load a 3DGS PLY file as a weight-normalized Gaussian mixture."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    return parse_splat_ply(blob, source=str(path))


def parse_splat_ply(blob: bytes, source: str = "<bytes>") -> GaussianMixture:
    """Parse PLY bytes; malformed input raises ParseError (never crashes)."""
    try:
        return _parse_splat_ply(blob, source)
    except (ParseError, UnsupportedLayoutError):
        raise
    except Exception as exc:  # noqa: BLE001 - fuzz contract: structured errors only
        raise ParseError(f"{source}: malformed PLY ({type(exc).__name__}: {exc})") from exc


def _parse_splat_ply(blob: bytes, source: str) -> GaussianMixture:
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise ParseError(f"{source}: not a PLY file (missing header)")
    header_lines = blob[:end].decode("ascii", errors="strict").splitlines()
    body = blob[end + len(b"end_header\n"):]

    fmt = None
    count = None
    props: list[tuple[str, str, int]] = []
    in_vertex = False
    for lineno, line in enumerate(header_lines, start=1):
        parts = line.strip().split()
        if not parts:
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("binary_little_endian", "ascii"):
                raise ParseError(f"{source}:{lineno}: unsupported format {' '.join(parts[1:2])!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise ParseError(f"{source}:{lineno}: malformed element line")
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
                if count < 0:
                    raise ParseError(f"{source}:{lineno}: negative vertex count")
        elif parts[0] == "property" and in_vertex:
            if len(parts) != 3:
                raise ParseError(f"{source}:{lineno}: malformed property line")
            if parts[1] == "list":
                raise ParseError(f"{source}:{lineno}: list properties unsupported for splats")
            if parts[1] not in _PLY_TYPES:
                raise ParseError(f"{source}:{lineno}: unknown property type {parts[1]!r}")
            dtype, size = _PLY_TYPES[parts[1]]
            props.append((parts[2], dtype, size))
    if fmt is None or count is None:
        raise ParseError(f"{source}: header misses format or vertex element")
    if count == 0:
        raise ParseError(f"{source}: empty splat file (0 vertices)")

    names = [p[0] for p in props]
    missing = [p for p in REQUIRED_PROPERTIES if p not in names]
    if missing:
        raise UnsupportedLayoutError(missing)
    extras = [n for n in names if n.startswith("f_rest_")]
    if extras:
        warnings.warn(
            f"{source}: skipping {len(extras)} higher-order SH properties", stacklevel=3
        )

    if fmt == "binary_little_endian":
        record = np.dtype([(n, d) for n, d, _ in props])
        expected = record.itemsize * count
        if len(body) < expected:
            raise ParseError(
                f"{source}: truncated body, expected {expected} bytes, got {len(body)}"
            )
        table = np.frombuffer(body[:expected], dtype=record)
        cols = {n: table[n].astype(np.float64) for n in REQUIRED_PROPERTIES}
    else:
        text = body.decode("ascii", errors="strict")
        rows = text.split()
        width = len(props)
        if len(rows) < width * count:
            raise ParseError(
                f"{source}: ascii body has {len(rows)} values, expected {width * count}"
            )
        arr = np.array(rows[: width * count], dtype=np.float64).reshape(count, width)
        cols = {n: arr[:, i] for i, (n, _, _) in enumerate(props) if n in REQUIRED_PROPERTIES}

    stacked = np.stack([cols[n] for n in REQUIRED_PROPERTIES], axis=1)
    finite = np.isfinite(stacked).all(axis=1)
    dropped = int(count - finite.sum())
    if dropped:
        warnings.warn(f"{source}: dropped {dropped} records with NaN/Inf values", stacklevel=3)
    if not finite.any():
        raise ParseError(f"{source}: no finite records left after filtering")
    cols = {n: c[finite] for n, c in cols.items()}
    n = int(finite.sum())

    means = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    opacity = _sigmoid(cols["opacity"])
    colors = np.clip(0.5 + SH_C0 * np.stack([cols["f_dc_0"], cols["f_dc_1"], cols["f_dc_2"]], axis=1), 0.0, 1.0)
    log_scale = np.stack([cols["scale_0"], cols["scale_1"], cols["scale_2"]], axis=1)
    quat = np.stack([cols["rot_0"], cols["rot_1"], cols["rot_2"], cols["rot_3"]], axis=1)
    norms = np.linalg.norm(quat, axis=1)
    if np.any(norms < 1e-12):
        bad = int(np.flatnonzero(norms < 1e-12)[0])
        raise ParseError(f"{source}: record {bad} has a zero-norm rotation")
    quat = quat / norms[:, None]

    w, x, y, z = quat.T
    R = np.empty((n, 3, 3))
    R[:, 0, 0] = 1 - 2 * y * y - 2 * z * z
    R[:, 0, 1] = 2 * x * y - 2 * w * z
    R[:, 0, 2] = 2 * x * z + 2 * w * y
    R[:, 1, 0] = 2 * x * y + 2 * w * z
    R[:, 1, 1] = 1 - 2 * x * x - 2 * z * z
    R[:, 1, 2] = 2 * y * z - 2 * w * x
    R[:, 2, 0] = 2 * x * z - 2 * w * y
    R[:, 2, 1] = 2 * y * z + 2 * w * x
    R[:, 2, 2] = 1 - 2 * x * x - 2 * y * y
    scale_sq = np.exp(2.0 * np.clip(log_scale, -40.0, 40.0))
    covs = np.einsum("kab,kb,kcb->kac", R, scale_sq, R) + COVARIANCE_FLOOR * np.eye(3)

    mixture = GaussianMixture(means, covs, np.full(n, 1.0 / n), opacity, colors)
    return normalize_weights(mixture)


def write_splat_ply(mixture: GaussianMixture, path) -> None:
    """Write a mixture as binary little-endian 3DGS PLY.

    Covariances are decomposed back into log scales and a rotation; the 1e-6
    floor added at ingestion is removed first so the round trip is stable.
    Raises ValueError when a covariance is not positive definite.
    """
    n = mixture.count
    evals, evecs = np.linalg.eigh(mixture.covariances)
    if np.any(evals <= 0):
        bad = int(np.argmin(evals.min(axis=1)))
        raise ValueError(f"component {bad} covariance is not positive definite")
    evals = np.maximum(evals - COVARIANCE_FLOOR, 1e-12)
    log_scale = 0.5 * np.log(evals)

    quats = np.empty((n, 4))
    for i in range(n):
        V = evecs[i]
        # deterministic gauge: flip columns so the largest-|entry| is positive
        for c in range(3):
            j = int(np.argmax(np.abs(V[:, c])))
            if V[j, c] < 0:
                V[:, c] = -V[:, c]
        if np.linalg.det(V) < 0:
            V[:, 2] = -V[:, 2]
        q = Quaternion.from_rotation_matrix(V)
        quats[i] = [q.w, q.x, q.y, q.z]

    opacity = np.clip(mixture.opacities, 1e-6, 1.0 - 1e-6)
    logits = np.log(opacity / (1.0 - opacity))
    f_dc = (np.clip(mixture.colors, 0.0, 1.0) - 0.5) / SH_C0

    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    table = np.zeros(n, dtype=[(nm, "<f4") for nm in names])
    table["x"], table["y"], table["z"] = mixture.means.T.astype(np.float32)
    for c in range(3):
        table[f"f_dc_{c}"] = f_dc[:, c]
        table[f"scale_{c}"] = log_scale[:, c]
    table["opacity"] = logits
    for c in range(4):
        table[f"rot_{c}"] = quats[:, c]

    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        + "".join(f"property float {nm}\n" for nm in names)
        + "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(table.tobytes())


def _camera_to_json(cam: Camera) -> dict:
    return {
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "rotation": cam.rotation.tolist(),
        "translation": cam.translation.tolist(),
    }


def _camera_from_json(obj, pointer: str) -> Camera:
    required = ("fx", "fy", "cx", "cy", "width", "height", "rotation", "translation")
    if not isinstance(obj, dict):
        raise SchemaError(pointer, "camera must be an object")
    for key in required:
        if key not in obj:
            raise SchemaError(f"{pointer}/{key}", "missing camera field")
    try:
        return Camera(
            float(obj["fx"]),
            float(obj["fy"]),
            float(obj["cx"]),
            float(obj["cy"]),
            int(obj["width"]),
            int(obj["height"]),
            np.asarray(obj["rotation"], dtype=np.float64),
            np.asarray(obj["translation"], dtype=np.float64),
        )
    except (TypeError, ValueError) as exc:
        raise SchemaError(pointer, f"invalid camera: {exc}") from exc


def _pose_to_json(pose: Sim3Params) -> dict:
    q = pose.q
    return {"q": [q.w, q.x, q.y, q.z], "t": pose.t.tolist(), "log_s": pose.log_s}


def _pose_from_json(obj, pointer: str) -> Sim3Params:
    if not isinstance(obj, dict) or not {"q", "t"} <= set(obj):
        raise SchemaError(pointer, "pose needs q and t fields")
    try:
        return Sim3Params(
            Quaternion.from_array(np.asarray(obj["q"], dtype=np.float64)).normalized(),
            np.asarray(obj["t"], dtype=np.float64),
            float(obj.get("log_s", 0.0)),
        )
    except (TypeError, ValueError) as exc:
        raise SchemaError(pointer, f"invalid pose: {exc}") from exc


_MANIFEST_KNOWN = {"schema_version", "scene_extent", "submaps", "ground_truth_poses"}
_SUBMAP_KNOWN = {"ply", "cameras", "name"}


def read_manifest(path) -> SceneManifest:
    """Load a scene manifest; PLY paths resolve relative to the file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise SchemaError("/", "manifest must be a JSON object")
    version = data.get("schema_version")
    if version != 1:
        raise SchemaError("/schema_version", f"unsupported schema version {version!r}")
    for key in data:
        if key not in _MANIFEST_KNOWN:
            warnings.warn(f"{path}: ignoring unknown manifest field {key!r}", stacklevel=2)
    submaps_json = data.get("submaps")
    if not isinstance(submaps_json, list) or not submaps_json:
        raise SchemaError("/submaps", "must be a non-empty array")

    submaps = []
    for i, entry in enumerate(submaps_json):
        pointer = f"/submaps/{i}"
        if not isinstance(entry, dict):
            raise SchemaError(pointer, "submap must be an object")
        for key in entry:
            if key not in _SUBMAP_KNOWN:
                warnings.warn(f"{path}: ignoring unknown submap field {key!r}", stacklevel=2)
        if "ply" not in entry:
            raise SchemaError(f"{pointer}/ply", "missing PLY path")
        ply_path = Path(entry["ply"])
        if not ply_path.is_absolute():
            ply_path = path.parent / ply_path
        mixture = read_splat_ply(ply_path)
        cameras = tuple(
            _camera_from_json(cam, f"{pointer}/cameras/{j}")
            for j, cam in enumerate(entry.get("cameras", []))
        )
        submaps.append(Submap(mixture, cameras, name=str(entry.get("name", f"submap_{i}"))))

    gt = None
    if data.get("ground_truth_poses") is not None:
        gt_json = data["ground_truth_poses"]
        if not isinstance(gt_json, list) or len(gt_json) != len(submaps):
            raise SchemaError("/ground_truth_poses", "must match the number of submaps")
        gt = tuple(_pose_from_json(p, f"/ground_truth_poses/{i}") for i, p in enumerate(gt_json))

    extent = float(data.get("scene_extent", 0.0))
    if extent <= 0.0:
        extent = max(s.mixture.extent() for s in submaps)
    return SceneManifest(tuple(submaps), gt, extent)


def write_manifest(manifest: SceneManifest, out_dir) -> Path:
    """Write submap PLYs plus manifest.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sub in enumerate(manifest.submaps):
        name = sub.name or f"submap_{i}"
        ply_name = f"{name}.ply"
        write_splat_ply(sub.mixture, out / ply_name)
        entries.append(
            {"ply": ply_name, "name": name, "cameras": [_camera_to_json(c) for c in sub.cameras]}
        )
    doc = {
        "schema_version": 1,
        "scene_extent": manifest.scene_extent,
        "submaps": entries,
    }
    if manifest.ground_truth_poses is not None:
        doc["ground_truth_poses"] = [_pose_to_json(p) for p in manifest.ground_truth_poses]
    target = out / "manifest.json"
    with open(target, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    return target


def write_trajectory(rows, path) -> None:
    """TUM-style text: ``timestamp tx ty tz qx qy qz qw`` per pose."""
    with open(path, "w", encoding="ascii") as fh:
        for idx, pos, orient in rows:
            if pos is None:
                continue
            q = orient if orient is not None else Quaternion.identity()
            fh.write(
                f"{float(idx):.6f} {pos[0]:.9f} {pos[1]:.9f} {pos[2]:.9f} "
                f"{q.x:.9f} {q.y:.9f} {q.z:.9f} {q.w:.9f}\n"
            )


def read_trajectory(path) -> np.ndarray:
    """Positions (N, 3) from a TUM-style trajectory file."""
    rows = []
    try:
        with open(path, "r", encoding="ascii") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) < 4:
                    raise ParseError(f"{path}:{lineno}: expected at least 4 columns")
                try:
                    rows.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad number: {exc}") from exc
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ParseError(f"{path}: no poses found")
    return np.asarray(rows, dtype=np.float64)


def write_report(report: PipelineReport, out_dir) -> None:
    """Emit report.json, trajectory text files and the loss-curve CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2)
        fh.write("\n")
    write_trajectory(report.trajectory, out / "trajectory_est.txt")
    if report.trajectory_gt is not None:
        write_trajectory(report.trajectory_gt, out / "trajectory_gt.txt")
    with open(out / "losses.csv", "w", encoding="ascii") as fh:
        fh.write("submap,step,mw2,photo,depth,total\n")
        for o in report.outcomes:
            if o.result is None:
                continue
            for step, mw2, photo, depth, total in o.result.loss_history:
                fh.write(f"{o.index},{step},{mw2:.10g},{photo:.10g},{depth:.10g},{total:.10g}\n")
