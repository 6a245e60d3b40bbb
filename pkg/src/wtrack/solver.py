"""Minimizer over mixed pose / Euclidean parameter blocks.

An objective is any callable ``f(params) -> (loss, pose_grad, point_grads)``
where ``pose_grad`` is ``(P, 6)`` w.r.t. left increments ``exp(d) o pose`` and
``point_grads`` maps block names to arrays shaped like ``params.points``.

Two methods are available:

``lbfgs``
    Limited-memory quasi-Newton with Armijo backtracking. Blocks listed in
    ``l1`` get an additional ``c * sum|x|`` term handled orthant-wise
    (OWL-QN), so coordinates sitting exactly at zero stay there unless the
    smooth gradient overcomes ``c``.
``adaptive``
    Diagonal RMS-preconditioned gradient descent with a monotone step
    controller; ``l1`` blocks use a proximal soft-threshold.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .config import SolverConfig
from .errors import NonFiniteObjective
from .geometry import identity_arrays, retract_batch


@dataclass
class ParamBlocks:
    quats: np.ndarray
    trans: np.ndarray
    points: dict = field(default_factory=dict)
    frozen_poses: np.ndarray | None = None
    frozen_points: dict = field(default_factory=dict)

    def __post_init__(self):
        self.quats = np.array(self.quats, dtype=float).reshape(-1, 4)
        self.trans = np.array(self.trans, dtype=float).reshape(-1, 3)
        if self.frozen_poses is None:
            self.frozen_poses = np.zeros(len(self.quats), dtype=bool)
        self.frozen_poses = np.asarray(self.frozen_poses, dtype=bool)
        self.points = {k: np.array(v, dtype=float) for k, v in self.points.items()}
        frozen = {}
        for name, arr in self.points.items():
            mask = self.frozen_points.get(name)
            if mask is None:
                mask = np.zeros(arr.shape[:-1], dtype=bool)
            elif np.ndim(mask) == 0:
                mask = np.full(arr.shape[:-1], bool(mask))
            frozen[name] = np.asarray(mask, dtype=bool)
        self.frozen_points = frozen

    @classmethod
    def points_only(cls, **points):
        q, t = identity_arrays(0)
        return cls(q, t, points)

    def copy(self):
        return ParamBlocks(self.quats.copy(), self.trans.copy(),
                           {k: v.copy() for k, v in self.points.items()},
                           self.frozen_poses.copy(),
                           {k: v.copy() for k, v in self.frozen_points.items()})

    @property
    def n_free(self):
        return 6 * int((~self.frozen_poses).sum()) + sum(
            int((~self.frozen_points[k]).sum()) * v.shape[-1] for k, v in self.points.items())


class SolveResult(NamedTuple):
    params: ParamBlocks
    loss: float
    iterations: int
    history: list
    converged: bool
    reason: str


class _Layout:
    """Maps between ParamBlocks and flat free-coordinate vectors."""

    def __init__(self, params: ParamBlocks, l1):
        self.free_pose = ~params.frozen_poses
        self.n_pose = 6 * int(self.free_pose.sum())
        self.names = list(params.points)
        self.masks = {}
        sizes = []
        for name in self.names:
            arr = params.points[name]
            m = np.broadcast_to(~params.frozen_points[name][..., None], arr.shape)
            self.masks[name] = m
            sizes.append(int(m.sum()))
        self.offsets = np.concatenate([[self.n_pose], self.n_pose + np.cumsum(sizes)]).astype(int)
        self.size = int(self.offsets[-1])
        self.l1 = np.zeros(self.size)
        for k, name in enumerate(self.names):
            self.l1[self.offsets[k]:self.offsets[k + 1]] = float((l1 or {}).get(name, 0.0))
        self.has_l1 = bool(np.any(self.l1 > 0))

    def flatten_grad(self, pose_grad, point_grads):
        parts = [np.asarray(pose_grad, dtype=float).reshape(-1, 6)[self.free_pose].ravel()]
        for name in self.names:
            parts.append(np.asarray(point_grads[name], dtype=float)[self.masks[name]])
        return np.concatenate(parts) if parts else np.zeros(0)

    def point_values(self, params):
        parts = [np.zeros(self.n_pose)]
        for name in self.names:
            parts.append(params.points[name][self.masks[name]])
        return np.concatenate(parts)

    def apply(self, params, step, set_points=None):
        out = params.copy()
        if self.n_pose:
            delta = np.zeros((len(params.quats), 6))
            delta[self.free_pose] = step[:self.n_pose].reshape(-1, 6)
            q, t = retract_batch(params.quats[self.free_pose], params.trans[self.free_pose],
                                 delta[self.free_pose])
            out.quats[self.free_pose] = q
            out.trans[self.free_pose] = t
        for k, name in enumerate(self.names):
            seg = slice(self.offsets[k], self.offsets[k + 1])
            if set_points is not None:
                out.points[name][self.masks[name]] = set_points[seg]
            else:
                out.points[name][self.masks[name]] += step[seg]
        return out


def _l1_value(layout, x):
    return float(np.sum(layout.l1 * np.abs(x))) if layout.has_l1 else 0.0


def _pseudo_grad(g, x, c):
    pg = g + c * np.sign(x)
    at0 = (x == 0) & (c > 0)
    right = g[at0] + c[at0]
    left = g[at0] - c[at0]
    pg[at0] = np.where(right < 0, right, np.where(left > 0, left, 0.0))
    return pg


def _evaluate(objective, params, layout, where):
    loss, pose_grad, point_grads = objective(params)
    loss = float(loss)
    if not np.isfinite(loss):
        return loss, None
    g = layout.flatten_grad(pose_grad, point_grads)
    if not np.all(np.isfinite(g)):
        bad = _bad_block(layout, g)
        raise NonFiniteObjective(bad, f"non-finite gradient in block {bad!r} ({where})")
    return loss, g


def _bad_block(layout, g):
    idx = int(np.flatnonzero(~np.isfinite(g))[0])
    if idx < layout.n_pose:
        return "poses"
    k = int(np.searchsorted(layout.offsets, idx, side="right")) - 1
    return layout.names[k]


def _diag(precond, params, layout):
    if precond is None:
        return None
    pose_d, point_d = precond(params)
    d = layout.flatten_grad(pose_d, point_d)
    pos = d[d > 0]
    floor = 1e-6 * float(np.median(pos)) if pos.size else 1.0
    return np.maximum(d, max(floor, 1e-300))


def minimize(objective: Callable, init: ParamBlocks, cfg: SolverConfig | None = None, *,
             l1: dict | None = None, precond: Callable | None = None,
             callback: Callable | None = None) -> SolveResult:
    """Minimize ``objective(params) + sum_b l1[b] * |params.points[b]|_1``.

    ``precond(params)`` may return positive diagonal curvature estimates
    shaped like the gradient; they seed the quasi-Newton scaling.
    ``callback(iteration, loss)`` is invoked after every accepted step.
    """
    cfg = cfg or SolverConfig()
    layout = _Layout(init, l1)
    params = init.copy()
    f_smooth, g = _evaluate(objective, params, layout, "initial point")
    if g is None:
        raise NonFiniteObjective("loss", "objective is not finite at the initial point")
    x = layout.point_values(params)
    f = f_smooth + _l1_value(layout, x)
    history = [f]
    if layout.size == 0 or cfg.max_iters == 0:
        return SolveResult(params, f, 0, history, True, "nothing to optimize")
    if cfg.method == "adaptive":
        return _adaptive(objective, params, layout, cfg, f, g, x, history, callback)
    return _lbfgs(objective, params, layout, cfg, f, g, x, history, precond, callback)


def _lbfgs(objective, params, layout, cfg, f, g, x, history, precond, callback):
    S, Y = deque(maxlen=cfg.history), deque(maxlen=cfg.history)
    D = _diag(precond, params, layout)
    converged, reason = False, "max_iters"
    it = 0
    for it in range(1, cfg.max_iters + 1):
        pg = _pseudo_grad(g, x, layout.l1) if layout.has_l1 else g
        if not np.any(pg) or np.max(np.abs(pg)) <= cfg.gtol:
            converged, reason = True, "gradient"
            it -= 1
            break
        d = -_two_loop(pg, S, Y, D)
        if not S and D is None:
            d *= cfg.step / max(np.linalg.norm(pg), 1e-300)
        if layout.has_l1:
            d[np.sign(d) != np.sign(-pg)] = 0.0
        slope = float(pg @ d)
        if slope >= 0:
            S.clear()
            Y.clear()
            d = -pg / D if D is not None else -pg * cfg.step / max(np.linalg.norm(pg), 1e-300)
            slope = float(pg @ d)
            if slope >= 0:
                converged, reason = True, "no descent direction"
                it -= 1
                break
        orthant = np.where(x != 0, np.sign(x), np.sign(-pg)) if layout.has_l1 else None

        alpha = 1.0
        accepted = False
        for _ in range(50):
            step = alpha * d
            if layout.has_l1:
                xt = x + step
                crossed = (layout.l1 > 0) & (np.sign(xt) != orthant)
                xt[crossed] = 0.0
                step_eff = np.where(layout.l1 > 0, xt - x, step)
                step_eff[:layout.n_pose] = step[:layout.n_pose]
                trial = layout.apply(params, step_eff, set_points=xt)
            else:
                step_eff = step
                xt = x + step
                trial = layout.apply(params, step)
            ft_smooth, gt = _evaluate(objective, trial, layout, f"iteration {it}")
            if gt is not None:
                ft = ft_smooth + _l1_value(layout, xt)
                if ft <= f + 1e-4 * float(pg @ step_eff):
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            converged, reason = True, "line search stalled"
            it -= 1
            break
        s = step_eff
        y = gt - g
        sy = float(s @ y)
        if sy > 1e-12 * max(float(np.linalg.norm(s) * np.linalg.norm(y)), 1e-300):
            S.append(s)
            Y.append(y)
        f_prev = f
        params, f, g, x = trial, ft, gt, xt
        if precond is not None:
            D = _diag(precond, params, layout)
        if cfg.debug:
            assert np.allclose(np.linalg.norm(params.quats, axis=1), 1.0, atol=1e-9)
        history.append(f)
        if callback is not None:
            callback(it, f)
        if f == 0.0:
            converged, reason = True, "zero loss"
            break
        if f_prev - f <= cfg.tol * abs(f_prev):
            converged, reason = True, "tol"
            break
    return SolveResult(params, f, it, history, converged, reason)


def _two_loop(q, S, Y, D):
    q = q.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((a, rho, s, y))
        q -= a * y
    if D is not None:
        if S:
            s, y = S[-1], Y[-1]
            gamma = float(s @ y) / float(y @ (y / D))
            r = gamma * q / D
        else:
            r = q / D
    elif S:
        s, y = S[-1], Y[-1]
        r = q * (float(s @ y) / float(y @ y))
    else:
        r = q
    for a, rho, s, y in reversed(alphas):
        b = rho * float(y @ r)
        r += s * (a - b)
    return r


def _adaptive(objective, params, layout, cfg, f, g, x, history, callback):
    v = g * g
    lr = cfg.step
    beta = 0.9
    converged, reason = False, "max_iters"
    it = 0
    for it in range(1, cfg.max_iters + 1):
        v = beta * v + (1 - beta) * g * g
        denom = np.sqrt(v) + 1e-12
        accepted = False
        for _ in range(40):
            step = -lr * g / denom
            if layout.has_l1:
                z = x + step
                thr = lr * layout.l1 / denom
                xt = np.where(layout.l1 > 0, np.sign(z) * np.maximum(np.abs(z) - thr, 0.0), z)
                xt[:layout.n_pose] = 0.0
                trial = layout.apply(params, step, set_points=xt)
            else:
                xt = x + step
                trial = layout.apply(params, step)
            ft_smooth, gt = _evaluate(objective, trial, layout, f"iteration {it}")
            if gt is not None:
                ft = ft_smooth + _l1_value(layout, xt)
                if ft <= f:
                    accepted = True
                    break
            lr *= 0.5
        if not accepted:
            converged, reason = True, "step underflow"
            it -= 1
            break
        lr *= 1.2
        f_prev = f
        params, f, g, x = trial, ft, gt, xt
        if cfg.debug:
            assert np.allclose(np.linalg.norm(params.quats, axis=1), 1.0, atol=1e-9)
        history.append(f)
        if callback is not None:
            callback(it, f)
        if f == 0.0 or f_prev - f <= cfg.tol * abs(f_prev):
            converged, reason = True, "tol" if f else "zero loss"
            break
    return SolveResult(params, f, it, history, converged, reason)


def block_slices(params: ParamBlocks):
    """Flat free-coordinate ranges per block (``"poses"`` first), as used by :func:`grad_check`."""
    layout = _Layout(params, None)
    out = {"poses": slice(0, layout.n_pose)}
    for k, name in enumerate(layout.names):
        out[name] = slice(int(layout.offsets[k]), int(layout.offsets[k + 1]))
    return out


def grad_check(objective: Callable, params: ParamBlocks, h: float = 1e-5,
               max_coords: int | None = None, rng=None, coords=None) -> float:
    """Max over coordinates of ``|g_a - g_fd| / max(1, |g_a|, |g_fd|)``.

    Pose coordinates are perturbed with ``exp(+-h e_k) o pose``. ``coords``
    selects flat free coordinates explicitly; otherwise, when ``max_coords``
    is given, a random subset is checked.
    """
    layout = _Layout(params, None)
    _, pose_grad, point_grads = objective(params)
    ga = layout.flatten_grad(pose_grad, point_grads)
    if coords is not None:
        coords = np.asarray(coords, dtype=np.int64)
    else:
        coords = np.arange(layout.size)
        if max_coords is not None and layout.size > max_coords:
            rng = np.random.default_rng(rng)
            coords = np.sort(rng.choice(layout.size, max_coords, replace=False))
    worst = 0.0
    for i in coords:
        e = np.zeros(layout.size)
        e[i] = h
        fp = float(objective(layout.apply(params, e))[0])
        fm = float(objective(layout.apply(params, -e))[0])
        gfd = (fp - fm) / (2 * h)
        err = abs(ga[i] - gfd) / max(1.0, abs(ga[i]), abs(gfd))
        worst = max(worst, err)
    return worst
