"""Closed-form window pose solving and per-scene depth/focal refinement.

Refinement alternates two blocks: poses (and shape alignments) are re-solved
in closed form for the current parameters, then the parameters take one
gradient step with those held fixed. The parameters are a log-scale per frame
(depth multiplied by ``exp(sigma_t)``, frame 0 pinned) and one log-focal
correction shared by all frames (focal multiplied by ``exp(phi)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .align import CorrespondenceSet, principal_scale, umeyama_similarity, weighted_procrustes
from .core import DepthMap, chain, unproject
from .corr import sample_cloud, warp_cloud
from .errors import (
    DegeneracyError,
    DegenerateInputError,
    InsufficientSupportError,
    NonFiniteLossError,
    PoseSolveError,
    RefinementAborted,
)
from .loss import (
    MIN_SUPPORT,
    LossWeights,
    mask_bce_loss,
    relative_pose,
    total_loss,
    track_weights,
)

MAX_HALVINGS = 20

# unit vector selecting the image-plane axes that the focal correction rescales
_PLANAR = np.array([1.0, 1.0, 0.0])
# residual norms below this fraction of the cloud size are rounding noise; the
# norm has a kink at zero, so such points get the zero subgradient
KINK_TOL = 1e-10


@dataclass
class RefineParams:
    log_scales: np.ndarray = None
    log_focal: float = 0.0
    iterations: int = 200
    step: float = 0.05
    tolerance: float = 1e-7
    # descent direction: gradient with every distance d replaced by
    # sqrt(d^2 + (smoothing * F)^2), F the frame's principal scale; 0 = exact
    smoothing: float = 1e-2

    def __post_init__(self):
        if not (self.step > 0 and math.isfinite(self.step)):
            raise ValueError(f"step size must be positive and finite, got {self.step}")
        if self.iterations < 0:
            raise ValueError(f"iteration budget must be >= 0, got {self.iterations}")
        if not (self.tolerance >= 0 and math.isfinite(self.tolerance)):
            raise ValueError(f"tolerance must be finite and >= 0, got {self.tolerance}")
        if not (self.smoothing >= 0 and math.isfinite(self.smoothing)):
            raise ValueError(f"smoothing must be finite and >= 0, got {self.smoothing}")
        if not math.isfinite(self.log_focal):
            raise ValueError("log-focal correction must be finite")
        if self.log_scales is not None:
            scales = np.asarray(self.log_scales, dtype=np.float64).copy()
            if not np.all(np.isfinite(scales)):
                raise ValueError("log-scales must be finite")
            if len(scales) and scales[0] != 0.0:
                raise ValueError("frame 0 log-scale is pinned to 0")
            self.log_scales = scales

    def theta(self, num_frames):
        scales = np.zeros(num_frames) if self.log_scales is None else self.log_scales
        if len(scales) != num_frames:
            raise ValueError(f"{len(scales)} log-scales for {num_frames} frames")
        return np.append(scales, self.log_focal)


@dataclass
class RefineResult:
    depths: list
    intrinsics: object
    poses: list
    log_scales: np.ndarray
    log_focal: float
    trace: list = field(default_factory=list)
    iterations: int = 0
    stop_reason: str = ""

    @property
    def initial(self):
        return self.trace[0]

    @property
    def final(self):
        return self.trace[-1]


def solve_window_poses(clouds, flows, masks):
    """Camera-to-world poses (frame 0 = identity) from flow-matched clouds.

    For each adjacent pair the later cloud is pulled back through the flow onto
    the earlier grid, and a weighted Procrustes fit maps the later camera's
    coordinates into the earlier one's. The relative poses are then chained.

    Args:
        clouds: T >= 2 FrameClouds.
        flows: T - 1 FlowFields, ``flows[k]`` from frame k to k+1.
        masks: T - 1 confidence masks on frame k's grid.
    """
    if len(clouds) < 2:
        raise ValueError(f"need at least 2 frames to solve poses, got {len(clouds)}")
    if len(flows) != len(clouds) - 1 or len(masks) != len(flows):
        raise ValueError(
            f"{len(clouds)} frames need {len(clouds) - 1} flows and masks, "
            f"got {len(flows)} and {len(masks)}"
        )
    relative = []
    for k, flow in enumerate(flows):
        warped = warp_cloud(clouds[k + 1], flow)
        weights = np.asarray(getattr(masks[k], "values", masks[k]), dtype=np.float64)
        pairs = CorrespondenceSet.from_clouds(warped, clouds[k], weights)
        try:
            relative.append(weighted_procrustes(pairs))
        except (DegeneracyError, DegenerateInputError) as exc:
            raise PoseSolveError(k + 1, exc) from exc
    return chain(relative)


def _focal_factor(phi):
    e = math.exp(-phi)
    return np.array([e, e, 1.0])


@dataclass
class _Pair:
    """Matched base points of frames i and j with confidence weights."""

    i: int
    j: int
    a: np.ndarray
    b: np.ndarray
    w: np.ndarray


@dataclass
class HeldState:
    """Closed-form quantities solved at one parameter vector."""

    relative: list
    poses: list
    shape_fits: list


class SceneObjective:
    """Total loss of a scene as a function of (log-scales, log-focal).

    All correspondence sampling is done once on the unrefined clouds: a frame's
    refined cloud is ``exp(sigma_t) * diag(e^-phi, e^-phi, 1)`` applied to its
    base cloud, a linear map that commutes with bilinear sampling.
    """

    def __init__(self, inputs, weights=None):
        self.inputs = inputs
        self.weights = LossWeights() if weights is None else weights
        self.num_frames = inputs.num_frames
        base = inputs.clouds()
        self.base = base
        edges = inputs.edge_masks()
        frame_masks = inputs.frame_masks(edges)
        pair_masks = inputs.pair_masks(edges)

        self.flow_pairs = []
        for k, flow in enumerate(inputs.flows):
            warped = warp_cloud(base[k + 1], flow)
            ok = base[k].valid & warped.valid
            w = pair_masks[k].values[ok]
            keep = w > 0
            self.flow_pairs.append(
                _Pair(k, k + 1, base[k].points[ok][keep], warped.points[ok][keep], w[keep])
            )

        self.track_pairs = []
        tracks = inputs.tracks
        if tracks is not None and tracks.num_frames > 1:
            q = tracks.query_frame
            a_all, ok_q = sample_cloud(base[q], tracks.positions[:, q])
            for t in range(tracks.num_frames):
                if t == q:
                    continue
                b_all, ok_t = sample_cloud(base[t], tracks.positions[:, t])
                w = track_weights(tracks, frame_masks, t, q)
                keep = ok_q & ok_t & (w > 0)
                self.track_pairs.append(_Pair(q, t, a_all[keep], b_all[keep], w[keep]))

        # second moments of every frame's valid points, for the principal scale
        self.moments = []
        for c in base:
            pts = c.valid_points()
            centered = pts - pts.mean(axis=0)
            self.moments.append(centered.T @ centered / len(pts))

        self.shape_pairs = None
        if inputs.references is not None:
            self.shape_pairs = []
            for c, ref in zip(base, inputs.references):
                ref_cloud = unproject(ref, inputs.intrinsics)
                both = c.valid & ref_cloud.valid
                self.shape_pairs.append((c.points[both], ref_cloud.points[both]))
            self.ref_sizes = [principal_scale(ref) for _, ref in self.shape_pairs]

        self.mask_value = math.fsum(mask_bce_loss(m, m) for m in frame_masks) / len(frame_masks)
        self.counts = {
            "flow": sum(len(p.w) for p in self.flow_pairs),
            "track": sum(len(p.w) for p in self.track_pairs),
            "shape": sum(len(a) for a, _ in self.shape_pairs or []),
        }

    @property
    def num_params(self):
        return self.num_frames + 1

    def _principal(self, j, sigma, phi):
        s = _focal_factor(phi)
        vals, vecs = np.linalg.eigh(self.moments[j] * np.outer(s, s))
        if not vals[-1] > 0:
            raise DegeneracyError(f"frame {j} cloud has zero principal scale")
        return math.exp(sigma[j]) * math.sqrt(vals[-1]), vecs[:, -1]

    def solve(self, theta):
        """Closed-form poses and shape alignments at ``theta``."""
        sigma, phi = theta[:-1], theta[-1]
        s = _focal_factor(phi)
        relative = []
        for p in self.flow_pairs:
            pairs = CorrespondenceSet(
                math.exp(sigma[p.j]) * p.b * s, math.exp(sigma[p.i]) * p.a * s, p.w
            )
            try:
                relative.append(weighted_procrustes(pairs))
            except (DegeneracyError, DegenerateInputError) as exc:
                raise PoseSolveError(p.j, exc) from exc
        poses = chain(relative)
        fits = []
        for src, ref in self.shape_pairs or []:
            fits.append(umeyama_similarity(CorrespondenceSet(src * s, ref)))
        return HeldState(relative, poses, fits)

    def _corr_term(self, p, pose, sigma, phi, grad=None, coeff=0.0, smooth=0.0):
        if len(p.w) < MIN_SUPPORT:
            raise InsufficientSupportError(
                f"frames {p.i}/{p.j}: {len(p.w)} weighted correspondences; need {MIN_SUPPORT}"
            )
        s = _focal_factor(phi)
        xa = math.exp(sigma[p.i]) * p.a * s
        xb = math.exp(sigma[p.j]) * p.b * s
        rot = pose.rotation
        rxb = xb @ rot.T
        r = xa - rxb - pose.translation
        d = np.linalg.norm(r, axis=1)
        wsum = float(p.w.sum())
        num = float(p.w @ d) / wsum
        scale, v = self._principal(p.j, sigma, phi)
        value = num / scale
        if grad is not None:
            live = d > KINK_TOL * scale
            if smooth > 0:
                u = d / scale
                rho = u / np.sqrt(u * u + smooth * smooth)
            else:
                rho = live.astype(np.float64)
            wr = p.w * rho
            wd = np.where(live, wr / np.where(live, d, 1.0), 0.0)
            num = float(wr @ d) / wsum
            dn_i = float(wd @ np.einsum("ij,ij->i", r, xa)) / wsum
            dn_j = -float(wd @ np.einsum("ij,ij->i", r, rxb)) / wsum
            dr_phi = -xa * _PLANAR + (xb * _PLANAR) @ rot.T
            dn_phi = float(wd @ np.einsum("ij,ij->i", r, dr_phi)) / wsum
            df_phi = -scale * (v[0] ** 2 + v[1] ** 2)
            grad[p.i] += coeff * dn_i / scale
            grad[p.j] += coeff * (dn_j / scale - num / scale)
            grad[-1] += coeff * (dn_phi / scale - num * df_phi / scale**2)
        return value

    def _shape_term(self, t, fit, phi, grad=None, coeff=0.0, smooth=0.0):
        src, ref = self.shape_pairs[t]
        s = _focal_factor(phi)
        xs = src * s
        q = fit.scale * xs @ fit.rotation.T + fit.translation - ref
        d = np.linalg.norm(q, axis=1)
        value = float(d.sum()) / len(d)
        if grad is not None:
            dq = -fit.scale * (xs * _PLANAR) @ fit.rotation.T
            size = self.ref_sizes[t]
            live = d > KINK_TOL * size
            if smooth > 0:
                inv = 1.0 / np.sqrt(d * d + (smooth * size) ** 2)
            else:
                inv = np.where(live, 1.0 / np.where(live, d, 1.0), 0.0)
            grad[-1] += coeff * float(inv @ np.einsum("ij,ij->i", q, dq)) / len(d)
        return value

    def held(self, theta, state, with_gradient=False, smooth=0.0):
        """(LossReport, gradient or None) with poses and alignments from ``state``.

        Args:
            smooth: if > 0 the gradient is that of the smoothed distances
                ``sqrt(d^2 + (smooth * F)^2)``; the report is always exact.
        """
        theta = np.asarray(theta, dtype=np.float64)
        sigma, phi = theta[:-1], theta[-1]
        wt = self.weights
        grad = np.zeros(self.num_params) if with_gradient else None

        flow_vals = []
        nf = len(self.flow_pairs)
        for p, rel in zip(self.flow_pairs, state.relative):
            flow_vals.append(self._corr_term(p, rel, sigma, phi, grad, wt.beta / max(nf, 1), smooth))
        track_vals = []
        nt = len(self.track_pairs)
        for p in self.track_pairs:
            pose = relative_pose(state.poses, p.i, p.j)
            track_vals.append(self._corr_term(p, pose, sigma, phi, grad, wt.gamma / max(nt, 1), smooth))
        shape_vals = []
        ns = len(self.shape_pairs or [])
        for t, fit in enumerate(state.shape_fits):
            shape_vals.append(self._shape_term(t, fit, phi, grad, wt.alpha / max(ns, 1), smooth))

        flow = math.fsum(flow_vals) / nf if nf else 0.0
        track = math.fsum(track_vals) / nt if nt else 0.0
        shape = math.fsum(shape_vals) / ns if ns else 0.0
        report = total_loss(shape, flow, track, self.mask_value, 0.0, wt, self.counts)
        return report, grad

    def evaluate(self, theta):
        """Fully re-solved objective: (LossReport, HeldState)."""
        theta = np.asarray(theta, dtype=np.float64)
        state = self.solve(theta)
        report, _ = self.held(theta, state)
        return report, state

    def gradient(self, theta, state, smooth=0.0):
        """Analytic gradient of the held-state total at ``theta`` (smoothed if ``smooth`` > 0)."""
        return self.held(theta, state, with_gradient=True, smooth=smooth)[1]

    def held_total(self, state):
        """Callable ``theta -> total`` with ``state`` frozen, for finite differences."""
        return lambda theta: self.held(theta, state)[0].total

    def apply(self, theta, state):
        """Refined depths and intrinsics at ``theta``."""
        sigma, phi = theta[:-1], float(theta[-1])
        depths = [
            DepthMap(d.values * math.exp(sg), d.valid) for d, sg in zip(self.inputs.depths, sigma)
        ]
        intr = self.inputs.intrinsics.scaled_focal(math.exp(phi))
        return depths, intr


def numeric_gradient(fn, x, epsilon=1e-6):
    """Central finite-difference gradient of a scalar function of a vector."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for k in range(len(x)):
        up = x.copy()
        down = x.copy()
        up[k] += epsilon
        down[k] -= epsilon
        grad[k] = (fn(up) - fn(down)) / (2 * epsilon)
    return grad


def _result(objective, theta, state, trace, iterations, reason):
    depths, intr = objective.apply(theta, state)
    return RefineResult(
        depths=depths,
        intrinsics=intr,
        poses=state.poses,
        log_scales=theta[:-1].copy(),
        log_focal=float(theta[-1]),
        trace=list(trace),
        iterations=iterations,
        stop_reason=reason,
    )


def _line_search(objective, theta, state, report, params, last_step):
    """One descent step: (accepted (theta, report, state) or None, step used)."""
    grad = objective.gradient(theta, state, params.smoothing)
    grad[0] = 0.0
    # try twice the last accepted step, never more than the base step
    eta = min(params.step, 2 * last_step)
    for _ in range(MAX_HALVINGS + 1):
        trial = theta - eta * grad
        trial_report, trial_state = objective.evaluate(trial)
        if trial_report.total < report.total:
            return (trial, trial_report, trial_state), eta
        eta /= 2
    return None, eta


def refine_scene(inputs, params=None, weights=None, on_iteration=None):
    """Optimize per-frame depth scales and a shared focal correction.

    Each iteration re-solves poses in closed form, takes a gradient step on the
    parameters with poses held, and accepts it only if the re-solved total
    decreases (halving the step up to 20 times otherwise). The first trial step
    is twice the last accepted one, capped at ``params.step``.

    Args:
        inputs: SceneInputs of the scene.
        params: RefineParams with initial values and the descent settings.
        weights: LossWeights for the total.
        on_iteration: optional callable receiving one dict per accepted step.

    Returns:
        RefineResult with refined depths, intrinsics, poses and the loss trace.

    Raises:
        RefinementAborted: on a non-finite loss or a failed pose solve; the
            exception carries the last finite result.
    """
    params = RefineParams() if params is None else params
    objective = SceneObjective(inputs, weights)
    theta = params.theta(inputs.num_frames)
    report, state = objective.evaluate(theta)
    trace = [report]
    if on_iteration is not None:
        on_iteration({"iteration": 0, "step": 0.0, **report.to_dict()})
    reason = "budget"
    done = 0
    last_step = params.step
    for it in range(1, params.iterations + 1):
        try:
            accepted, eta = _line_search(objective, theta, state, report, params, last_step)
        except NonFiniteLossError as exc:
            last = _result(objective, theta, state, trace, done, "non-finite")
            raise RefinementAborted(f"iteration {it}: {exc}", last) from exc
        except PoseSolveError as exc:
            last = _result(objective, theta, state, trace, done, "pose-solve")
            raise RefinementAborted(f"iteration {it}: {exc}", last) from exc
        if accepted is None:
            reason = "line-search"
            break
        previous = report.total
        last_step = eta
        theta, report, state = accepted
        trace.append(report)
        done = it
        if on_iteration is not None:
            on_iteration({"iteration": it, "step": eta, **report.to_dict()})
        if previous <= 0 or (previous - report.total) / previous < params.tolerance:
            reason = "converged"
            break
    return _result(objective, theta, state, trace, done, reason)
