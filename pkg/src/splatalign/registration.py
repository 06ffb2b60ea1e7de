"""Sim(3) estimation by joint minimization of transport, photo and depth losses.

The transport term uses the analytic envelope gradient: the coupling from the
entropic solver is held fixed while the pairwise costs are differentiated
through the component transform. Per-pair work reduces to three GEMMs plus
elementwise passes thanks to a Cayley-Hamilton identity: with
X = Sa @ Sb' (the covariance product), the matrix needed per pair,
Sa^1/2 (Sa^1/2 Sb' Sa^1/2)^{-1/2} Sa^1/2, equals X^{-1/2} Sa, and
X^{-1/2} = h0 I + h1 X + h2 X^{-1} with scalar coefficients from the pair's
eigenvalues. Rendering losses are differentiated by central differences over
the 8 pose coordinates (analytic rasterizer backprop is out of scope).
"""
from __future__ import annotations

import io as _io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .bures import CostMatrix, _cubic_roots, trisqrt_coefficients
from .core import Camera, GaussianMixture, Quaternion, Sim3Params, quat_to_rotation, sim3_apply_mixture
from .errors import DivergedError, EmptyMaskError, MissingCamerasError
from .render import depth_loss, photometric_loss, render
from .sinkhorn import ABSOLUTE, SinkhornConfig, TransportPlan, rescale_potentials, sinkhorn_log


@dataclass(frozen=True)
class JointLossWeights:
    lambda_mw2: float = 1.0
    lambda_photo: float = 1.0
    lambda_depth: float = 0.5

    def __post_init__(self):
        if min(self.lambda_mw2, self.lambda_photo, self.lambda_depth) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_mw2 == self.lambda_photo == self.lambda_depth == 0:
            raise ValueError("at least one loss weight must be positive")

    @property
    def uses_rendering(self) -> bool:
        return self.lambda_photo > 0 or self.lambda_depth > 0


MW2_ONLY = JointLossWeights(1.0, 0.0, 0.0)


@dataclass(frozen=True)
class OptimizerConfig:
    """First-order optimizer with per-block learning rates and momentum."""

    lr_q: float = 0.01
    lr_t: float = 0.01
    lr_log_s: float = 0.005
    max_steps: int = 150
    epsilon_ladder: tuple = (0.5, 0.05, 0.005)  # relative to mean cost at start
    momentum: float = 0.9
    plateau_rel_tol: float = 1e-6
    plateau_window: int = 20
    fd_step: float = 1e-3
    sinkhorn_max_iterations: int = 30
    sinkhorn_delta: float = 1e-7
    divergence_factor: float = 1e3
    mw2_gradient: str = "analytic"  # or "fd"
    seed: int = 0

    def __post_init__(self):
        ladder = tuple(float(e) for e in self.epsilon_ladder)
        if not ladder or any(e <= 0 for e in ladder):
            raise ValueError("epsilon_ladder must be non-empty and positive")
        if any(nxt >= cur for cur, nxt in zip(ladder, ladder[1:])):
            raise ValueError("epsilon_ladder must be strictly decreasing")
        object.__setattr__(self, "epsilon_ladder", ladder)


@dataclass
class RegistrationResult:
    theta: Sim3Params
    final_losses: dict
    mw2_history: list
    converged: bool
    steps_used: int
    loss_history: list = field(default_factory=list)  # (step, mw2, photo, depth, total)

    def theta_text(self) -> str:
        q = self.theta.q
        lines = [
            f"theta q {q.w:.17g} {q.x:.17g} {q.y:.17g} {q.z:.17g}",
            f"theta t {self.theta.t[0]:.17g} {self.theta.t[1]:.17g} {self.theta.t[2]:.17g}",
            f"theta log_s {self.theta.log_s:.17g}",
            f"converged {'true' if self.converged else 'false'}",
            f"steps {self.steps_used}",
        ]
        return "\n".join(lines) + "\n"

    def history_csv(self) -> str:
        out = _io.StringIO()
        out.write("step,mw2,photo,depth,total\n")
        for row in self.loss_history:
            out.write(",".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in row) + "\n")
        return out.getvalue()

    def to_json_dict(self) -> dict:
        q = self.theta.q
        return {
            "theta": {"q": [q.w, q.x, q.y, q.z], "t": self.theta.t.tolist(), "log_s": self.theta.log_s},
            "final_losses": self.final_losses,
            "converged": self.converged,
            "steps_used": self.steps_used,
        }

    def save(self, json_path) -> None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")


def _rotation_derivatives(q: np.ndarray):
    """d R / d q entrywise derivatives of the quaternion rotation formula."""
    w, x, y, z = q
    return (
        2.0 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64),
        2.0 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]], dtype=np.float64),
        2.0 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]], dtype=np.float64),
        2.0 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]], dtype=np.float64),
    )


class Mw2Engine:
    """Transport loss and envelope gradient for a fixed mixture pair.

    Holds the target-side precomputations (flattened covariance tensors for
    the product invariants) and warm-starts the entropic solver across calls,
    which is what makes per-step evaluation cheap inside the optimizer.
    """

    def __init__(self, A: GaussianMixture, B: GaussianMixture, epsilon: float,
                 max_iterations: int = 2000, convergence_delta: float = 1e-9):
        self.mu_a = A.means
        self.cov_a = A.covariances
        self.w_a = A.weights
        self.mu_b = B.means
        self.cov_b = B.covariances
        self.w_b = B.weights
        M = A.count
        self.tr_a = np.trace(self.cov_a, axis1=1, axis2=2)
        self.det_a = np.linalg.det(self.cov_a)
        self.p9 = self.cov_a.reshape(M, 9)
        # two layouts of P (x) P: rows (a,b,c,d) pair with the invariant GEMM,
        # rows (a,d,b,c) realize vec(P Q P) = K vec(Q)
        self.pp_inv = np.einsum("iab,icd->iabcd", self.cov_a, self.cov_a).reshape(M, 81)
        self.pp_map = np.einsum("iab,icd->iadbc", self.cov_a, self.cov_a).reshape(M, 81)
        self.cfg = SinkhornConfig(epsilon, max_iterations, convergence_delta, ABSOLUTE)
        self.potentials = None
        self.last_plan: TransportPlan | None = None

    def _transformed(self, theta_vec: np.ndarray):
        q = theta_vec[:4] / np.linalg.norm(theta_vec[:4])
        R = quat_to_rotation(Quaternion.from_array(q))
        s = math.exp(theta_vec[7])
        mu2 = s * self.mu_b @ R.T + theta_vec[4:7]
        cov2 = (s * s) * np.einsum("ab,kbc,dc->kad", R, self.cov_b, R)
        return q, R, s, mu2, cov2

    def _cost_and_eigs(self, mu2, cov2):
        M = self.mu_a.shape[0]
        N = mu2.shape[0]
        q9 = cov2.reshape(N, 9)
        i1 = self.p9 @ q9.T
        qq = np.einsum("kbc,kda->kabcd", cov2, cov2).reshape(N, 81)
        i2 = 0.5 * (i1 * i1 - self.pp_inv @ qq.T)
        i3 = self.det_a[:, None] * np.linalg.det(cov2)[None, :]
        lam = np.clip(_cubic_roots(i1, i2, i3), 0.0, None)
        mean_part = (
            (self.mu_a**2).sum(1)[:, None]
            + (mu2**2).sum(1)[None, :]
            - 2.0 * self.mu_a @ mu2.T
        )
        tr_b = np.trace(cov2, axis1=1, axis2=2)
        C = mean_part + self.tr_a[:, None] + tr_b[None, :] - 2.0 * np.sqrt(lam).sum(-1)
        return np.maximum(C, 0.0), lam

    def value(self, theta_vec: np.ndarray) -> float:
        _, _, _, mu2, cov2 = self._transformed(theta_vec)
        C, _ = self._cost_and_eigs(mu2, cov2)
        plan = sinkhorn_log(C, self.w_a, self.w_b, self.cfg, initial_potentials=self.potentials, warn=False)
        self.potentials = (plan.log_u, plan.log_v)
        self.last_plan = plan
        return plan.cost

    def value_and_grad(self, theta_vec: np.ndarray):
        q, R, s, mu2, cov2 = self._transformed(theta_vec)
        C, lam = self._cost_and_eigs(mu2, cov2)
        plan = sinkhorn_log(C, self.w_a, self.w_b, self.cfg, initial_potentials=self.potentials, warn=False)
        self.potentials = (plan.log_u, plan.log_v)
        self.last_plan = plan
        pi = plan.coupling
        colsum = pi.sum(axis=0)

        # d cost / d mu2_k, aggregated over the coupling
        g_mu = 2.0 * (colsum[:, None] * mu2 - pi.T @ self.mu_a)

        # d cost / d cov2_k = I - Sa^1/2 (Sa^1/2 cov2 Sa^1/2)^{-1/2} Sa^1/2
        #                  = I - X^{-1/2} Sa   with X = Sa cov2
        h0, h1, h2 = trisqrt_coefficients(lam)
        w0 = pi * h0
        w1 = pi * h1
        w2 = pi * h2
        term1 = np.einsum("ik,iab->kab", w0, self.cov_a)
        kmat = (w1.T @ self.pp_map).reshape(-1, 9, 9)
        term2 = np.einsum("kxy,ky->kx", kmat, cov2.reshape(-1, 9)).reshape(-1, 3, 3)
        cov2_inv = np.linalg.inv(cov2)
        term3 = w2.sum(axis=0)[:, None, None] * cov2_inv
        G = colsum[:, None, None] * np.eye(3) - term1 - term2 - term3
        G = 0.5 * (G + G.transpose(0, 2, 1))

        grad = np.zeros(8)
        grad[4:7] = g_mu.sum(axis=0)
        grad[7] = float((g_mu * (mu2 - theta_vec[4:7])).sum()) + 2.0 * float((G * cov2).sum())
        X = np.einsum("ka,kb->ab", g_mu, self.mu_b)
        Y = np.einsum("kab,cb,kcd->ad", self.cov_b, R, G)
        for j, dR in enumerate(_rotation_derivatives(q)):
            grad[j] = s * float((dR * X).sum()) + 2.0 * s * s * float((dR * Y.T).sum())
        grad[:4] -= (grad[:4] @ q) * q  # tangent-space projection
        return plan.cost, grad


def mw2_loss_and_gradient(A: GaussianMixture, B: GaussianMixture, theta: Sim3Params,
                          cfg: SinkhornConfig = SinkhornConfig()):
    """Transport loss between A and theta(B) with its 8-dim envelope gradient.

    If ``cfg`` scales epsilon with the mean cost, the value is resolved once
    at the given theta and then held absolute, so finite differencing the
    returned loss respects "epsilon fixed".
    """
    engine = Mw2Engine(A, B, 1.0)  # epsilon patched below once resolved
    _, _, _, mu2, cov2 = engine._transformed(theta.as_vector())
    C, _ = engine._cost_and_eigs(mu2, cov2)
    engine.cfg = SinkhornConfig(
        cfg.resolve_epsilon(C), cfg.max_iterations, cfg.convergence_delta, ABSOLUTE
    )
    return engine.value_and_grad(theta.as_vector())


def joint_loss(A: GaussianMixture, B: GaussianMixture, theta: Sim3Params,
               cameras: list[Camera], weights: JointLossWeights,
               cfg: SinkhornConfig = SinkhornConfig()):
    """Weighted sum of transport, photometric and depth losses.

    Returns (total, breakdown). Rendering terms are averaged over cameras;
    requesting them without cameras raises MissingCamerasError.
    """
    if weights.uses_rendering and not cameras:
        raise MissingCamerasError("photometric/depth losses require at least one camera")
    mw2_term = 0.0
    plan = None
    if weights.lambda_mw2 > 0:
        engine = Mw2Engine(A, B, 1.0)
        _, _, _, mu2, cov2 = engine._transformed(theta.as_vector())
        C, _ = engine._cost_and_eigs(mu2, cov2)
        engine.cfg = SinkhornConfig(cfg.resolve_epsilon(C), cfg.max_iterations, cfg.convergence_delta, ABSOLUTE)
        mw2_term = engine.value(theta.as_vector())
        plan = engine.last_plan
    photo_term = 0.0
    depth_term = 0.0
    if weights.uses_rendering:
        photo_term, depth_term = _render_terms(A, B, theta, cameras)
    total = (
        weights.lambda_mw2 * mw2_term
        + weights.lambda_photo * photo_term
        + weights.lambda_depth * depth_term
    )
    breakdown = {"mw2": mw2_term, "photo": photo_term, "depth": depth_term, "total": total}
    return total, breakdown, plan


def _render_terms(A, B, theta, cameras, target_renders=None):
    """Photometric/depth terms in the source frame of ``B``.

    The cameras are B's source cameras, so B renders to fixed target images
    (cacheable across pose evaluations) and the main map is pulled into B's
    frame with the inverse pose. Both depth maps then share B's metric units.
    """
    from .core import sim3_invert

    moved_a = sim3_apply_mixture(sim3_invert(theta), A)
    photo = 0.0
    depth = 0.0
    for j, cam in enumerate(cameras):
        ra = render(moved_a, cam)
        rb = target_renders[j] if target_renders is not None else render(B, cam)
        photo += photometric_loss(ra, rb)
        depth += depth_loss(ra, rb)
    n = len(cameras)
    return photo / n, depth / n


def estimate_initial_scale(A: GaussianMixture, B: GaussianMixture, camera: Camera) -> float:
    """Ratio of mean valid rendered depths, main over sub."""
    ra = render(A, camera)
    rb = render(B, camera)
    min_pixels = max(1, int(0.01 * camera.width * camera.height))
    for name, r in (("main", ra), ("sub", rb)):
        if int(r.valid_mask.sum()) < min_pixels:
            raise EmptyMaskError(f"{name} map valid-depth mask below 1% of pixels")
    s = float(ra.depth[ra.valid_mask].mean() / rb.depth[rb.valid_mask].mean())
    if not (s > 0 and math.isfinite(s)):
        raise EmptyMaskError(f"initial scale estimate is not positive finite: {s}")
    return s


def spread_scale_ratio(A: GaussianMixture, B: GaussianMixture) -> float:
    """RMS spread ratio of component means; render-free scale fallback."""
    sa = float(np.sqrt(((A.means - A.means.mean(0)) ** 2).sum(1).mean()))
    sb = float(np.sqrt(((B.means - B.means.mean(0)) ** 2).sum(1).mean()))
    return sa / max(sb, 1e-30)


def optimize_sim3(A: GaussianMixture, B: GaussianMixture, init: Sim3Params,
                  cameras: list[Camera] | None = None,
                  weights: JointLossWeights = MW2_ONLY,
                  opt: OptimizerConfig = OptimizerConfig()) -> RegistrationResult:
    """Annealed first-order descent over the epsilon ladder.

    Every stage resolves its epsilon from the ladder (relative to the mean
    cost at the initial pose), runs momentum updates with per-block learning
    rates, renormalizes the quaternion after each step, and keeps the
    best-loss pose. Rendering-loss gradients are central differences over the
    8 coordinates. Deterministic for fixed inputs and config.
    """
    cameras = cameras or []
    if weights.uses_rendering and not cameras:
        raise MissingCamerasError("rendering losses requested but no cameras supplied")
    target_renders = [render(B, cam) for cam in cameras] if weights.uses_rendering else None

    theta = init.as_vector()
    theta[:4] /= np.linalg.norm(theta[:4])

    probe = Mw2Engine(A, B, 1.0)
    _, _, _, mu2, cov2 = probe._transformed(theta)
    C0, _ = probe._cost_and_eigs(mu2, cov2)
    mean_cost = max(float(C0.mean()), 1e-30)
    lr = np.concatenate([np.full(4, opt.lr_q), np.full(3, opt.lr_t), [opt.lr_log_s]])

    mw2_history: list[float] = []
    loss_history: list[tuple] = []
    best_theta = theta.copy()
    steps_total = 0
    converged = False
    diverge_floor = None
    carry_pots = None
    carry_eps = None
    engine = None

    for eps_rel in opt.epsilon_ladder:
        eps_abs = eps_rel * mean_cost
        engine = Mw2Engine(A, B, eps_abs, opt.sinkhorn_max_iterations, opt.sinkhorn_delta)
        if carry_pots is not None:
            engine.potentials = rescale_potentials(*carry_pots, carry_eps, eps_abs)
        velocity = np.zeros(8)
        theta = best_theta.copy()
        best_stage = np.inf
        recent: list[float] = []
        converged = False
        for _ in range(opt.max_steps):
            mw2_val, g_mw2 = _mw2_step(engine, theta, opt)
            photo_val = depth_val = 0.0
            grad = weights.lambda_mw2 * g_mw2
            if weights.uses_rendering:
                photo_val, depth_val, g_render = _render_step(
                    A, B, theta, cameras, weights, opt, target_renders
                )
                grad = grad + g_render
            total = (
                weights.lambda_mw2 * mw2_val
                + weights.lambda_photo * photo_val
                + weights.lambda_depth * depth_val
            )
            steps_total += 1
            mw2_history.append(mw2_val)
            loss_history.append((steps_total, mw2_val, photo_val, depth_val, total))
            if diverge_floor is None:
                # mean cost sets the natural loss scale; keeps a perfectly
                # aligned start from tripping the guard on noise
                diverge_floor = max(abs(total), 1e-9 * mean_cost)
            if total > opt.divergence_factor * diverge_floor:
                raise DivergedError(f"loss {total:.3e} exceeded {opt.divergence_factor:.0e} x initial")
            if total < best_stage:
                best_stage = total
                best_theta = theta.copy()
            recent.append(best_stage)
            if len(recent) > opt.plateau_window:
                recent.pop(0)
                prev = recent[0]
                if prev - best_stage <= opt.plateau_rel_tol * max(abs(prev), 1e-30):
                    converged = True
                    break
            velocity = opt.momentum * velocity - lr * grad
            theta = theta + velocity
            theta[:4] /= np.linalg.norm(theta[:4])
        carry_pots = engine.potentials
        carry_eps = eps_abs

    final = Sim3Params.from_vector(best_theta)
    final_mw2 = engine.value(best_theta) if weights.lambda_mw2 > 0 else 0.0
    final_photo = final_depth = 0.0
    if weights.uses_rendering:
        final_photo, final_depth = _render_terms(A, B, final, cameras, target_renders)
    breakdown = {
        "mw2": final_mw2,
        "photo": final_photo,
        "depth": final_depth,
        "total": weights.lambda_mw2 * final_mw2
        + weights.lambda_photo * final_photo
        + weights.lambda_depth * final_depth,
    }
    return RegistrationResult(
        theta=final,
        final_losses=breakdown,
        mw2_history=mw2_history,
        converged=converged,
        steps_used=steps_total,
        loss_history=loss_history,
    )


def _mw2_step(engine: Mw2Engine, theta: np.ndarray, opt: OptimizerConfig):
    if opt.mw2_gradient == "analytic":
        return engine.value_and_grad(theta)
    # central-difference fallback, mostly for debugging
    val = engine.value(theta)
    grad = np.zeros(8)
    h = opt.fd_step
    for j in range(8):
        tp = theta.copy()
        tp[j] += h
        tm = theta.copy()
        tm[j] -= h
        grad[j] = (engine.value(tp) - engine.value(tm)) / (2 * h)
    return val, grad


def _render_step(A, B, theta: np.ndarray, cameras, weights: JointLossWeights, opt: OptimizerConfig,
                 target_renders=None):
    if target_renders is None:
        target_renders = [render(B, cam) for cam in cameras]

    def rendered(vec: np.ndarray):
        return _render_terms(A, B, Sim3Params.from_vector(vec), cameras, target_renders)

    photo, depth = rendered(theta)
    grad = np.zeros(8)
    h = opt.fd_step
    for j in range(8):
        tp = theta.copy()
        tp[j] += h
        tm = theta.copy()
        tm[j] -= h
        pp, dp = rendered(tp)
        pm, dm = rendered(tm)
        grad[j] = (
            weights.lambda_photo * (pp - pm) + weights.lambda_depth * (dp - dm)
        ) / (2 * h)
    return photo, depth, grad
