"""Incremental multi-submap registration, merging, pruning and evaluation."""
from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    Camera,
    GaussianMixture,
    Quaternion,
    Sim3Params,
    normalize_weights,
    sim3_apply_mixture,
    sim3_invert,
)
from .errors import EmptyMaskError, LengthMismatchError, SplatAlignError
from .errors import EmptyIntersectionWarning
from .registration import (
    MW2_ONLY,
    JointLossWeights,
    OptimizerConfig,
    RegistrationResult,
    optimize_sim3,
    spread_scale_ratio,
)
from .render import depth_loss, photometric_loss, render
from .sinkhorn import SinkhornConfig, mw2_distance


@dataclass(frozen=True)
class Submap:
    mixture: GaussianMixture
    cameras: tuple = ()
    name: str = ""


@dataclass(frozen=True)
class SceneManifest:
    submaps: tuple
    ground_truth_poses: tuple | None = None
    scene_extent: float = 0.0

    def __post_init__(self):
        if len(self.submaps) < 1:
            raise ValueError("manifest needs at least one submap")
        if self.ground_truth_poses is not None and len(self.ground_truth_poses) != len(self.submaps):
            raise LengthMismatchError("ground truth poses must match submap count")


@dataclass
class SubmapOutcome:
    index: int
    result: RegistrationResult | None
    mw2_before: float
    mw2_after: float
    error: str = ""

    @property
    def failed(self) -> bool:
        return self.result is None


@dataclass
class PipelineReport:
    outcomes: list
    trajectory: list  # (index, position (3,), orientation Quaternion) per submap
    trajectory_gt: list | None
    ate_rmse: float | None
    map_size_before_prune: int
    map_size_after_prune: int
    final_map: GaussianMixture | None = field(default=None, repr=False)

    def to_json_dict(self) -> dict:
        return {
            "ate_rmse": self.ate_rmse,
            "map_size_before_prune": self.map_size_before_prune,
            "map_size_after_prune": self.map_size_after_prune,
            "submaps": [
                {
                    "index": o.index,
                    "failed": o.failed,
                    "error": o.error,
                    "mw2_before": o.mw2_before,
                    "mw2_after": o.mw2_after,
                    "theta": None if o.failed else o.result.to_json_dict()["theta"],
                    "steps_used": None if o.failed else o.result.steps_used,
                }
                for o in self.outcomes
            ],
        }


@dataclass(frozen=True)
class PipelineConfig:
    weights: JointLossWeights = field(default_factory=JointLossWeights)
    optimizer: OptimizerConfig = OptimizerConfig()
    sinkhorn: SinkhornConfig = SinkhornConfig()
    # epsilon ladder of the small-motion candidate (trajectory-continuity
    # prior); None picks it from the nearest-neighbor cost scale at the init
    local_ladder: tuple | None = None
    polish_max_steps: int = 30
    polish_epsilon: float = 0.002
    opacity_floor: float = 0.005
    dedup_radius: float | None = None  # default: half the median NN distance of the main map
    prune_each_merge: bool = True


def register_pair(
    main: GaussianMixture,
    sub: GaussianMixture,
    cameras=(),
    cfg: PipelineConfig = PipelineConfig(),
) -> RegistrationResult:
    """Coarse-to-fine registration of ``sub`` onto ``main``.

    Stage 0 estimates an initial scale (rendered mean-depth ratio when a
    camera is available, RMS spread ratio otherwise) and builds two pose
    candidates: centroid-matched (global search over the full annealing
    ladder, robust to large motion at full overlap) and identity translation
    (small-motion prior over the local ladder, robust to partial overlap
    where centroid matching is biased by unshared mass). Transport-only
    descent refines each; rendered photometric+depth error arbitrates when
    cameras exist, the final transport cost otherwise. With rendering
    weights active, the winner gets a joint-loss polish stage.
    """
    main = normalize_weights(main)
    sub = normalize_weights(sub)
    cameras = list(cameras)

    s_init = None
    if cameras:
        try:
            main_cam = _auto_camera(main, cameras[0])
            depth_main = _mean_valid_depth(main, main_cam)
            depth_sub = _mean_valid_depth(sub, cameras[0])
            if depth_main is not None and depth_sub is not None:
                s_init = depth_main / depth_sub
        except EmptyMaskError:
            s_init = None
    if s_init is None or not (s_init > 0 and math.isfinite(s_init)):
        s_init = spread_scale_ratio(main, sub)

    opt = cfg.optimizer
    t_centroid = main.means.mean(axis=0) - s_init * sub.means.mean(axis=0)
    ident_init = Sim3Params(Quaternion.identity(), np.zeros(3), math.log(s_init))
    local_ladder = cfg.local_ladder or _nn_scale_ladder(main, sub, ident_init)
    # the local candidate refines inside a narrow basin: damp its steps so
    # the first momentum kick cannot jump across it
    local_opt = _damped(_with_ladder(opt, local_ladder))
    candidates = [
        (Sim3Params(Quaternion.identity(), t_centroid, math.log(s_init)), _with_ladder(opt, opt.epsilon_ladder)),
        (ident_init, local_opt),
    ]
    runs = [optimize_sim3(main, sub, init, [], MW2_ONLY, copt) for init, copt in candidates]

    if cameras:
        targets = [render(sub, cam) for cam in cameras]
        scores = [_render_score(main, sub, r.theta, cameras, targets) for r in runs]
    else:
        scores = [r.final_losses["total"] for r in runs]
    best = int(np.argmin(scores))
    result = runs[best]

    if cameras:
        # transport drags scale on partial overlap; rendered depth ratios on
        # the joint mask re-anchor it about the overlap before polishing
        corrected = _depth_anchor_scale(main, sub, result.theta, cameras[0], targets[0])
        if corrected is not None:
            settle = _damped(_with_ladder(opt, (local_ladder[-1],)))
            settle = _replace_steps(settle, max(10, cfg.polish_max_steps))
            resettled = optimize_sim3(main, sub, corrected, [], MW2_ONLY, settle)
            if _render_score(main, sub, resettled.theta, cameras, targets) < scores[best]:
                result = resettled

    if cfg.weights.uses_rendering and cameras:
        polish_opt = _damped(_with_ladder(opt, (cfg.polish_epsilon,)))
        polish_opt = _replace_steps(polish_opt, cfg.polish_max_steps)
        polish = optimize_sim3(main, sub, result.theta, cameras, cfg.weights, polish_opt)
        polish.mw2_history = result.mw2_history + polish.mw2_history
        polish.loss_history = result.loss_history + [
            (s + result.steps_used, a, b, c, d) for (s, a, b, c, d) in polish.loss_history
        ]
        polish.steps_used += result.steps_used
        result = polish
    return result


def _depth_anchor_scale(main, sub, theta: Sim3Params, cam: Camera, target) -> Sim3Params | None:
    """Scale correction from the rendered depth ratio on the joint mask.

    Renders the main map pulled into the sub frame, compares mean valid
    depths where both maps cover, and rescales about the overlap centroid so
    the aligned region stays put. Returns None when the masks do not overlap
    or the correction is negligible.
    """
    moved = sim3_apply_mixture(sim3_invert(theta), main)
    ra = render(moved, cam)
    both = ra.valid_mask & target.valid_mask
    if both.sum() < max(1, int(0.005 * cam.width * cam.height)):
        return None
    ratio = float(ra.depth[both].mean() / max(target.depth[both].mean(), 1e-12))
    if not (ratio > 0 and math.isfinite(ratio)) or abs(math.log(ratio)) < 1e-3:
        return None
    k = ratio  # s under-estimated inflates pulled-back main depths by s_true/s
    s = theta.s
    R = theta.rotation()
    # overlap centroid in sub frame, from the covered target pixels
    centroid = sub.means[_covered_components(sub, cam, both)].mean(axis=0)
    t_new = theta.t + (s - k * s) * (R @ centroid)
    return Sim3Params(theta.q, t_new, theta.log_s + math.log(k))


def _covered_components(mixture: GaussianMixture, cam: Camera, mask) -> np.ndarray:
    """Indices of components whose projected centers land on the mask."""
    pts = mixture.means @ cam.rotation.T + cam.translation
    z = np.maximum(pts[:, 2], 1e-6)
    u = np.clip((cam.fx * pts[:, 0] / z + cam.cx).astype(int), 0, cam.width - 1)
    v = np.clip((cam.fy * pts[:, 1] / z + cam.cy).astype(int), 0, cam.height - 1)
    hit = mask[v, u] & (pts[:, 2] > 0)
    if not hit.any():
        return np.arange(mixture.count)
    return np.flatnonzero(hit)


def _nn_scale_ladder(main: GaussianMixture, sub: GaussianMixture, init: Sim3Params) -> tuple:
    """Sharp ladder keyed to the matched-pair cost scale at the init pose.

    Epsilon below the median nearest-neighbor cost keeps the coupling locked
    to local matches, which is what lets a small-motion init refine in place
    instead of drifting toward the global-moment optimum.
    """
    from .registration import Mw2Engine

    probe = Mw2Engine(main, sub, 1.0)
    _, _, _, mu2, cov2 = probe._transformed(init.as_vector())
    C, _ = probe._cost_and_eigs(mu2, cov2)
    mean_cost = max(float(C.mean()), 1e-30)
    nn = float(np.median(C.min(axis=0)))
    e1 = max(0.5 * nn, 1e-9 * mean_cost)
    e2 = max(0.05 * nn, 1e-10 * mean_cost)
    return (e1 / mean_cost, e2 / mean_cost)


def _auto_camera(mixture: GaussianMixture, template: Camera) -> Camera:
    """Camera posed toward the mixture with the template's intrinsics."""
    centroid = mixture.means.mean(axis=0)
    radius = float(np.sqrt(((mixture.means - centroid) ** 2).sum(axis=1).mean()))
    eye = centroid + np.array([0.25, 0.35, -2.6]) * max(radius, 1e-3)
    return Camera.look_at(
        eye, centroid, fx=template.fx, fy=template.fy, width=template.width, height=template.height
    )


def _mean_valid_depth(mixture: GaussianMixture, cam: Camera):
    out = render(mixture, cam)
    min_pixels = max(1, int(0.01 * cam.width * cam.height))
    if int(out.valid_mask.sum()) < min_pixels:
        return None
    return float(out.depth[out.valid_mask].mean())


def _render_score(main, sub, theta, cameras, targets) -> float:
    moved = sim3_apply_mixture(sim3_invert(theta), main)
    score = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyIntersectionWarning)
        for cam, target in zip(cameras, targets):
            ra = render(moved, cam)
            score += photometric_loss(ra, target) + 0.5 * depth_loss(ra, target)
    return score / len(cameras)


def _replace_steps(opt: OptimizerConfig, max_steps: int) -> OptimizerConfig:
    return dataclasses.replace(opt, max_steps=max_steps)


def _damped(opt: OptimizerConfig) -> OptimizerConfig:
    return dataclasses.replace(
        opt, lr_q=0.2 * opt.lr_q, lr_t=0.2 * opt.lr_t, lr_log_s=0.2 * opt.lr_log_s, momentum=0.5
    )


def _with_ladder(opt: OptimizerConfig, ladder: tuple) -> OptimizerConfig:
    return dataclasses.replace(opt, epsilon_ladder=ladder)


def merge_maps(main: GaussianMixture, sub: GaussianMixture, theta: Sim3Params) -> GaussianMixture:
    """Concatenate ``main`` with theta(sub) and renormalize weights."""
    moved = sim3_apply_mixture(theta, sub)
    merged = GaussianMixture(
        np.concatenate([main.means, moved.means]),
        np.concatenate([main.covariances, moved.covariances]),
        np.concatenate([main.weights, moved.weights]),
        np.concatenate([main.opacities, moved.opacities]),
        np.concatenate([main.colors, moved.colors]),
    )
    return normalize_weights(merged)


def default_dedup_radius(mixture: GaussianMixture) -> float:
    """Half the median nearest-neighbor distance between component means."""
    if mixture.count < 2:
        return 0.0
    tree = cKDTree(mixture.means)
    dist, _ = tree.query(mixture.means, k=2)
    return 0.5 * float(np.median(dist[:, 1]))


def prune(
    mixture: GaussianMixture,
    opacity_floor: float = 0.005,
    dedup_radius: float | None = None,
) -> GaussianMixture:
    """Drop low-opacity components and near-duplicates, keep weights normalized.

    Deduplication keeps the higher-opacity member of any pair whose means are
    within ``dedup_radius`` and whose covariances differ by less than 10% in
    Frobenius norm. Survivors are selected greedily by opacity, which makes
    the operation idempotent. Never returns an empty mixture.
    """
    if dedup_radius is None:
        dedup_radius = default_dedup_radius(mixture)
    alive = mixture.opacities >= opacity_floor
    if not alive.any():
        alive = np.zeros(mixture.count, dtype=bool)
        alive[int(np.argmax(mixture.opacities))] = True
    idx = np.flatnonzero(alive)

    if dedup_radius > 0 and idx.size > 1:
        order = idx[np.lexsort((idx, -mixture.opacities[idx]))]
        means = mixture.means[order]
        covs = mixture.covariances[order]
        tree = cKDTree(means)
        kept_mask = np.zeros(order.size, dtype=bool)
        kept_list: list[int] = []
        fro = np.sqrt((covs.reshape(order.size, 9) ** 2).sum(axis=1))
        for pos in range(order.size):
            duplicate = False
            for nb in tree.query_ball_point(means[pos], dedup_radius):
                if not kept_mask[nb] or nb == pos:
                    continue
                diff = float(np.linalg.norm((covs[pos] - covs[nb]).ravel()))
                if diff <= 0.10 * max(fro[pos], fro[nb], 1e-30):
                    duplicate = True
                    break
            if not duplicate:
                kept_mask[pos] = True
                kept_list.append(int(order[pos]))
        idx = np.array(sorted(kept_list), dtype=np.intp)

    return normalize_weights(mixture.subset(idx))


def ate_rmse(estimated, ground_truth) -> float:
    """RMSE of position residuals after similarity (Umeyama) alignment."""
    est = np.asarray(estimated, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise LengthMismatchError(f"trajectories must both be (N, 3), got {est.shape} vs {gt.shape}")
    if est.shape[0] < 2:
        raise LengthMismatchError("trajectories need at least 2 poses")
    s, R, t = umeyama_alignment(est, gt)
    aligned = s * est @ R.T + t
    return float(np.sqrt(((aligned - gt) ** 2).sum(axis=1).mean()))


def umeyama_alignment(src: np.ndarray, dst: np.ndarray):
    """Closed-form similarity aligning ``src`` onto ``dst`` (least squares)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / src.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = (xs**2).sum() / src.shape[0]
    s = float(np.trace(np.diag(D) @ S) / var_s) if var_s > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def camera_pose_in_main(theta: Sim3Params, cam: Camera):
    """Map a submap-local camera into the main frame via the submap's theta.

    Returns (position, orientation quaternion camera-to-world). Scale moves
    the center; orientation composes rotations only.
    """
    center = theta.apply_points(cam.center[None, :])[0]
    r_cw = theta.rotation() @ cam.rotation.T
    return center, Quaternion.from_rotation_matrix(r_cw)


def run_incremental(manifest: SceneManifest, cfg: PipelineConfig = PipelineConfig()) -> PipelineReport:
    """Register submaps one by one into a growing main map.

    Submap 0 seeds the main map. Every later submap is registered against the
    current main, merged (unless its registration failed) and the map pruned.
    The estimated trajectory holds each submap's source camera mapped through
    its estimated pose; ATE RMSE is included when ground truth is present.
    """
    if len(manifest.submaps) < 2:
        raise ValueError("incremental pipeline needs at least 2 submaps")
    main = normalize_weights(manifest.submaps[0].mixture)
    thetas: list[Sim3Params | None] = [Sim3Params.identity()]
    outcomes = [SubmapOutcome(0, None, 0.0, 0.0, error="")]
    outcomes[0].result = RegistrationResult(
        Sim3Params.identity(), {"mw2": 0.0, "photo": 0.0, "depth": 0.0, "total": 0.0}, [], True, 0
    )
    size_before = main.count

    for k in range(1, len(manifest.submaps)):
        sub = manifest.submaps[k]
        mixture = normalize_weights(sub.mixture)
        try:
            if not np.isfinite(mixture.means).all() or not np.isfinite(mixture.covariances).all():
                raise SplatAlignError("submap contains non-finite parameters")
            before, _ = mw2_distance(main, mixture, cfg.sinkhorn)
            result = register_pair(main, mixture, sub.cameras, cfg)
            moved = sim3_apply_mixture(result.theta, mixture)
            after, _ = mw2_distance(main, normalize_weights(moved), cfg.sinkhorn)
            outcomes.append(SubmapOutcome(k, result, before, after))
            thetas.append(result.theta)
            main = merge_maps(main, mixture, result.theta)
            size_before = main.count
            if cfg.prune_each_merge:
                main = prune(main, cfg.opacity_floor, cfg.dedup_radius)
        except SplatAlignError as exc:
            outcomes.append(SubmapOutcome(k, None, math.nan, math.nan, error=str(exc)))
            thetas.append(None)

    trajectory = []
    trajectory_gt = None
    for k, sub in enumerate(manifest.submaps):
        theta_k = thetas[k]
        if theta_k is None or not sub.cameras:
            trajectory.append((k, None, None))
            continue
        pos, orient = camera_pose_in_main(theta_k, sub.cameras[0])
        trajectory.append((k, pos, orient))

    ate = None
    if manifest.ground_truth_poses is not None:
        trajectory_gt = []
        for k, sub in enumerate(manifest.submaps):
            if not sub.cameras:
                trajectory_gt.append((k, None, None))
                continue
            pos, orient = camera_pose_in_main(manifest.ground_truth_poses[k], sub.cameras[0])
            trajectory_gt.append((k, pos, orient))
        est_pts = [p for (_, p, _) in trajectory if p is not None]
        gt_pts = [
            p for (k, p, _) in trajectory_gt if p is not None and trajectory[k][1] is not None
        ]
        if len(est_pts) >= 2 and len(est_pts) == len(gt_pts):
            ate = ate_rmse(np.stack(est_pts), np.stack(gt_pts))

    return PipelineReport(
        outcomes=outcomes,
        trajectory=trajectory,
        trajectory_gt=trajectory_gt,
        ate_rmse=ate,
        map_size_before_prune=size_before,
        map_size_after_prune=main.count,
        final_map=main,
    )


def generate_synthetic_scene(
    seed: int,
    n_components: int = 200,
    n_submaps: int = 4,
    overlap_fraction: float = 0.5,
    noise: float = 0.0,
    image_size: int = 64,
    max_angle_deg: float = 6.0,
    translation_frac: float = 0.05,
    log_s_range: tuple = (-0.08, 0.08),
) -> SceneManifest:
    """Deterministic synthetic scene with known per-submap Sim(3) poses.

    A clustered global mixture is sliced into overlapping windows along a
    sweep direction; each window is moved into its own local frame by the
    inverse of a random Sim(3) (submap 0 keeps the identity, defining the
    global frame), optionally perturbed by ``noise``, and paired with one
    camera that views it. Ground-truth poses map each submap back into the
    global frame.
    """
    if n_components < 10:
        raise ValueError("need at least 10 components")
    if not (0.0 < overlap_fraction <= 1.0):
        raise ValueError("overlap_fraction must lie in (0, 1]")
    if n_submaps < 1:
        raise ValueError("need at least one submap")
    rng = np.random.default_rng(seed)

    n_clusters = max(3, n_components // 25)
    centers = rng.uniform(-1.2, 1.2, size=(n_clusters, 3))
    which = rng.integers(0, n_clusters, size=n_components)
    means = centers[which] + rng.normal(size=(n_components, 3)) * 0.35
    # sweep along x so window slicing follows the scene
    means = means[np.argsort(means[:, 0], kind="stable")]
    sigma = rng.uniform(0.04, 0.16, size=(n_components, 3))
    quats = rng.normal(size=(n_components, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    covs = np.empty((n_components, 3, 3))
    for i in range(n_components):
        w, x, y, z = quats[i]
        R = np.array(
            [
                [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y],
                [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
                [2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
            ]
        )
        covs[i] = (R * sigma[i] ** 2) @ R.T
    opacities = rng.uniform(0.35, 0.95, size=n_components)
    colors = rng.uniform(0.1, 1.0, size=(n_components, 3))
    world = GaussianMixture(means, covs, np.full(n_components, 1.0 / n_components), opacities, colors)
    world = normalize_weights(world.regularized(1e-6))
    extent = world.extent()

    if n_submaps == 1:
        window = n_components
        starts = [0]
    else:
        window = int(n_components / (1.0 + (n_submaps - 1) * (1.0 - overlap_fraction)))
        window = max(window, 5)
        stride = max(1, round(window * (1.0 - overlap_fraction)))
        starts = [min(k * stride, n_components - window) for k in range(n_submaps)]

    submaps = []
    gt_poses = []
    for k in range(n_submaps):
        sl = slice(starts[k], starts[k] + window)
        piece = world.subset(np.arange(n_components)[sl])
        if k == 0:
            phi = Sim3Params.identity()
        else:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            ang = np.deg2rad(rng.uniform(0.3 * max_angle_deg, max_angle_deg))
            q = Quaternion(float(np.cos(ang / 2)), *(np.sin(ang / 2) * axis))
            t = rng.uniform(-1.0, 1.0, size=3) * translation_frac * extent
            phi = Sim3Params(q, t, float(rng.uniform(*log_s_range)))
        local = sim3_apply_mixture(sim3_invert(phi), piece)
        if noise > 0:
            jit_means = local.means + rng.normal(size=local.means.shape) * noise * 0.02 * extent
            jitter = rng.normal(size=local.covariances.shape) * (noise / 3.0)
            sym = 0.5 * (jitter + jitter.transpose(0, 2, 1))
            fro = np.linalg.norm(local.covariances.reshape(local.count, 9), axis=1)
            jit_covs = local.covariances + sym * fro.reshape(-1, 1, 1)
            # clamp back to PD
            wvals, vecs = np.linalg.eigh(jit_covs)
            wvals = np.clip(wvals, 1e-6, None)
            jit_covs = np.einsum("kab,kb,kcb->kac", vecs, wvals, vecs)
            local = local.replace(means=jit_means, covariances=jit_covs)
        local = normalize_weights(local)
        centroid = local.means.mean(axis=0)
        radius = float(np.sqrt(((local.means - centroid) ** 2).sum(axis=1).mean()))
        eye = centroid + np.array([0.25, 0.35, -2.6]) * max(radius, 0.2)
        cam = Camera.look_at(
            eye,
            centroid,
            fx=1.1 * image_size,
            fy=1.1 * image_size,
            width=image_size,
            height=image_size,
        )
        submaps.append(Submap(local, (cam,), name=f"submap_{k}"))
        gt_poses.append(phi)

    return SceneManifest(tuple(submaps), tuple(gt_poses), extent)
