"""Planar two-link arm: forward/inverse kinematics and differential IK.

Both links share the same length ``l``. The arm is the simulated environment
for the robot client and, through :func:`scripted_demo`, the demonstrator
that produces training episodes.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

# theta_1 on [0, pi] keeps the arm above its mounting surface.
DEFAULT_JOINT_LIMITS = ((0.0, np.pi), (-np.pi, np.pi))

PINV_SIGMA_FLOOR = 1e-4
PINV_DAMPING = 1e-6


class KinematicsError(Exception):
    pass


class Unreachable(KinematicsError):
    pass


class NotConverged(KinematicsError):
    def __init__(self, residual: float, message: str = ""):
        self.residual = float(residual)
        super().__init__(message or f"IK did not converge (residual={self.residual:.3e})")


class SingularJacobian(RuntimeWarning):
    """Issued when the damped pseudo-inverse fallback was used."""


@dataclass(frozen=True, eq=False)
class ArmState:
    theta: np.ndarray
    link_len: float = 1.0
    joint_limits: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_JOINT_LIMITS))

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).reshape(2)
        limits = np.asarray(self.joint_limits, dtype=float).reshape(2, 2)
        if not self.link_len > 0:
            raise ValueError(f"link_len must be positive, got {self.link_len}")
        if np.any(limits[:, 0] > limits[:, 1]):
            raise ValueError(f"bad joint limits {limits.tolist()}")
        if np.any(theta < limits[:, 0] - 1e-12) or np.any(theta > limits[:, 1] + 1e-12):
            raise ValueError(f"theta {theta.tolist()} outside joint limits {limits.tolist()}")
        object.__setattr__(self, "theta", np.clip(theta, limits[:, 0], limits[:, 1]))
        object.__setattr__(self, "joint_limits", limits)
        object.__setattr__(self, "link_len", float(self.link_len))

    def with_theta(self, theta) -> "ArmState":
        """New state at ``theta`` clamped into the joint limits."""
        clamped = np.clip(np.asarray(theta, dtype=float), self.joint_limits[:, 0], self.joint_limits[:, 1])
        return ArmState(clamped, self.link_len, self.joint_limits)

    def __repr__(self):
        return f"ArmState(theta={self.theta.tolist()}, link_len={self.link_len})"


@dataclass(frozen=True, eq=False)
class PoseTarget:
    p_star: np.ndarray
    p_dot_star: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "p_star", np.asarray(self.p_star, dtype=float).reshape(2))
        object.__setattr__(self, "p_dot_star", np.asarray(self.p_dot_star, dtype=float).reshape(2))

    def check_reachable(self, link_len: float):
        if np.linalg.norm(self.p_star) > 2.0 * link_len * (1 + 1e-12):
            raise Unreachable(f"target {self.p_star.tolist()} is outside the disc of radius {2 * link_len}")


def fk(state: ArmState) -> np.ndarray:
    t1, t2 = state.theta
    l = state.link_len
    return np.array([l * np.cos(t1) + l * np.cos(t1 + t2), l * np.sin(t1) + l * np.sin(t1 + t2)])


def jacobian(state: ArmState) -> np.ndarray:
    t1, t2 = state.theta
    l = state.link_len
    s1, c1 = np.sin(t1), np.cos(t1)
    s12, c12 = np.sin(t1 + t2), np.cos(t1 + t2)
    return np.array([[-l * s1 - l * s12, -l * s12], [l * c1 + l * c12, l * c12]])


def damped_pinv(J: np.ndarray, sigma_floor: float = PINV_SIGMA_FLOOR,
                damping: float = PINV_DAMPING) -> Tuple[np.ndarray, bool]:
    """Moore-Penrose pseudo-inverse via SVD, Tikhonov-damped near singularities.

    Returns ``(J_pinv, damped)``. When the smallest singular value falls below
    ``sigma_floor`` every inverse singular value becomes ``s / (s**2 + damping)``,
    which bounds the gain by ``1 / (2 sqrt(damping))``.
    """
    U, S, Vt = np.linalg.svd(J)
    damped = bool(S.min() < sigma_floor)
    if damped:
        s_inv = S / (S ** 2 + damping)
    else:
        s_inv = 1.0 / S
    return (Vt.T * s_inv) @ U.T, damped


def _joint_velocity(state: ArmState, p_dot: np.ndarray) -> np.ndarray:
    J_pinv, damped = damped_pinv(jacobian(state))
    if damped:
        warnings.warn(SingularJacobian(f"damped pseudo-inverse used at theta={state.theta.tolist()}"),
                      stacklevel=3)
    return J_pinv @ p_dot


def diffik_step(state: ArmState, p_dot_star, dt: float) -> ArmState:
    """One forward-Euler step of velocity-level IK: q += dt * J(q)^+ p_dot_star."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    q_dot = _joint_velocity(state, np.asarray(p_dot_star, dtype=float))
    return state.with_theta(state.theta + dt * q_dot)


def feedback_diffik_step(state: ArmState, target: PoseTarget, k_p: float, dt: float) -> ArmState:
    """Diff-IK step with proportional correction of the task-space error."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if k_p < 0:
        raise ValueError(f"k_p must be non-negative, got {k_p}")
    p_cmd = target.p_dot_star + k_p * (target.p_star - fk(state))
    q_dot = _joint_velocity(state, p_cmd)
    return state.with_theta(state.theta + dt * q_dot)


def _fk_arr(theta: np.ndarray, l: float) -> np.ndarray:
    t1, t12 = theta[0], theta[0] + theta[1]
    return np.array([l * (np.cos(t1) + np.cos(t12)), l * (np.sin(t1) + np.sin(t12))])


def _gauss_newton(state: ArmState, p_star: np.ndarray, max_iters: int, tol: float,
                  damping: float = 1e-9) -> Tuple[ArmState, float]:
    l = state.link_len
    lo, hi = state.joint_limits[:, 0], state.joint_limits[:, 1]
    q = state.theta.copy()
    r = _fk_arr(q, l) - p_star
    err = float(np.hypot(*r))
    for _ in range(max_iters):
        if err <= tol:
            break
        J = jacobian(ArmState(q, l, state.joint_limits))
        step = -np.linalg.solve(J.T @ J + damping * np.eye(2), J.T @ r)
        alpha = 1.0
        while alpha > 1e-8:
            cand = np.clip(q + alpha * step, lo, hi)
            r_new = _fk_arr(cand, l) - p_star
            err_new = float(np.hypot(*r_new))
            if err_new < err * (1 - 1e-4 * alpha):
                break
            alpha *= 0.5
        else:
            break  # stuck, usually against a joint limit
        q, r, err = cand, r_new, err_new
    return state.with_theta(q), err


# deterministic restart seeds, used only when the solve from init stalls
_RESTART_SEEDS = [(np.pi / 4, np.pi / 2), (3 * np.pi / 4, -np.pi / 2), (np.pi / 2, 0.5),
                  (np.pi / 2, -0.5), (0.1, 2.5), (3.0, -2.5), (0.3, -1.5), (2.8, 1.5)]


def _mirror(state: ArmState) -> Optional[ArmState]:
    # equal links: the elbow-flipped solution keeps theta1 + theta2 / 2
    t1, t2 = state.theta
    lo, hi = state.joint_limits[0]
    for shift in (0.0, -2 * np.pi, 2 * np.pi):
        m1 = t1 + t2 + shift
        if lo <= m1 <= hi:
            try:
                return ArmState(np.array([m1, -t2]), state.link_len, state.joint_limits)
            except ValueError:
                return None
    return None


def ik_solve(target: PoseTarget, init: ArmState, max_iters: int = 100, tol: float = 1e-9) -> ArmState:
    """Solve ``fk(q) = p_star`` by damped Gauss-Newton with backtracking.

    Iterates are clamped to the joint limits. Of the (up to two) solutions,
    the one nearest ``init`` in joint space is returned.
    """
    target.check_reachable(init.link_len)
    p_star = target.p_star
    solutions: List[ArmState] = []
    best_err = np.inf
    seeds = [init.theta] + [np.array(s) for s in _RESTART_SEEDS]
    for seed in seeds:
        state, err = _gauss_newton(init.with_theta(seed), p_star, max_iters, tol)
        best_err = min(best_err, err)
        if err <= tol:
            solutions.append(state)
            break
    if not solutions:
        raise NotConverged(best_err)
    mirror = _mirror(solutions[0])
    if mirror is not None:
        mirror, err = _gauss_newton(mirror, p_star, max_iters, tol)
        if err <= tol:
            solutions.append(mirror)
    return min(solutions, key=lambda s: float(np.linalg.norm(s.theta - init.theta)))


def observation(state: ArmState) -> np.ndarray:
    """Proprioceptive observation: joint angles followed by end-effector position."""
    return np.concatenate([state.theta, fk(state)])


def scripted_demo(start: ArmState, waypoints: Sequence[PoseTarget], dt: float, noise_std: float,
                  k_p: float = 5.0, steps_per_waypoint: int = 10,
                  rng: Optional[np.random.Generator] = None) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Roll feedback diff-IK through ``waypoints`` and record (observation, action) pairs.

    The reference moves linearly from the previous waypoint (initially the start
    position) to the next one over ``steps_per_waypoint`` ticks. The action at
    tick t is the next configuration q_{t+1} plus N(0, noise_std^2) noise.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for wp in waypoints:
        wp.check_reachable(start.link_len)
    pairs = []
    state = start
    prev = fk(start)
    for wp in waypoints:
        seg_vel = (wp.p_star - prev) / (steps_per_waypoint * dt)
        for s in range(steps_per_waypoint):
            p_ref = prev + (s + 1) / steps_per_waypoint * (wp.p_star - prev)
            nxt = feedback_diffik_step(state, PoseTarget(p_ref, seg_vel + wp.p_dot_star), k_p, dt)
            action = nxt.theta + (rng.normal(0.0, noise_std, size=2) if noise_std > 0 else 0.0)
            pairs.append((observation(state), action))
            state = nxt
        prev = wp.p_star
    return pairs


def circle_waypoints(center=(0.9, 0.9), radius: float = 0.35, n: int = 24, laps: float = 1.0,
                     phase: float = 0.0) -> List[PoseTarget]:
    """Counter-clockwise waypoints on a circle, starting one step after ``phase``."""
    k = np.arange(1, int(round(n * laps)) + 1)
    ang = phase + 2 * np.pi * k / n
    c = np.asarray(center, dtype=float)
    return [PoseTarget(c + radius * np.array([np.cos(a), np.sin(a)])) for a in ang]
