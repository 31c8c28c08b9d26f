"""Scripted circle-tracing task: demonstration episodes and an oracle chunk policy."""
from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import dataset as ds
from .kinematics import (ArmState, PoseTarget, circle_waypoints, feedback_diffik_step, fk, ik_solve,
                         scripted_demo)
from .policy import ACTION_KEY, OBS_KEY, DimMismatch

CENTER = (0.9, 0.9)
RADIUS = 0.35
N_WAYPOINTS = 24
STEPS_PER_WAYPOINT = 5
K_P = 5.0
BASE_INIT = (0.3, 1.5)
TASK = "trace the circle counter-clockwise"
OBS_DIM = 4
ACTION_DIM = 2


def circle_distance(p, center=CENTER, radius: float = RADIUS) -> np.ndarray:
    """Distance from end-effector position(s) to the reference circle."""
    p = np.asarray(p, dtype=float)
    return np.abs(np.linalg.norm(p - np.asarray(center), axis=-1) - radius)


def circle_start(phase: float, center=CENTER, radius: float = RADIUS) -> ArmState:
    p0 = np.asarray(center) + radius * np.array([np.cos(phase), np.sin(phase)])
    return ik_solve(PoseTarget(p0), ArmState(BASE_INIT))


def demo_episode(phase: float, laps: float, dt: float, noise_std: float, rng: np.random.Generator,
                 start_jitter: float = 0.02):
    """One demonstration: (observations (L, 4), actions (L, 2))."""
    s0 = circle_start(phase)
    if start_jitter > 0:
        s0 = s0.with_theta(s0.theta + rng.normal(0.0, start_jitter, 2))
    wps = circle_waypoints(CENTER, RADIUS, N_WAYPOINTS, laps, phase)
    pairs = scripted_demo(s0, wps, dt, noise_std, k_p=K_P, steps_per_waypoint=STEPS_PER_WAYPOINT, rng=rng)
    return np.array([o for o, _ in pairs]), np.array([a for _, a in pairs])


def teach(root, episodes: int = 50, seed: int = 0, laps: float = 2.5, dt: float = 0.033,
          noise_std: float = 0.01, rows_per_file: int = ds.DEFAULT_ROWS_PER_FILE) -> List[ds.EpisodeMeta]:
    """Write ``episodes`` scripted demonstrations with random start phases into a new dataset."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    root = Path(root)
    ds.create_dataset(root, 1.0 / dt, {OBS_KEY: ("float64", (OBS_DIM,)), ACTION_KEY: ("float64", (ACTION_DIM,))},
                      rows_per_file=rows_per_file)
    rng = np.random.default_rng(seed)
    metas = []
    for _ in range(episodes):
        obs, act = demo_episode(rng.uniform(0, 2 * np.pi), laps, dt, noise_std, rng)
        frames = [ds.EpisodeFrame({OBS_KEY: o, ACTION_KEY: a}) for o, a in zip(obs, act)]
        metas.append(ds.write_episode(root, frames, TASK))
    ds.compute_stats(root)
    return metas


def demo_noise_floor(root, skip: int = 60) -> float:
    """Mean circle distance of the demonstrator's own (noisy) joint targets.

    The first ``skip`` frames of every episode are dropped so the approach
    from the jittered start does not count.
    """
    lds = ds.LocalDataset(root)
    dists = []
    for e in range(len(lds.episodes)):
        act = lds.episode_arrays(e, [ACTION_KEY])[ACTION_KEY][skip:]
        dists.append(circle_distance(np.array([fk(ArmState(a, joint_limits=((-10, 10), (-10, 10))))
                                               for a in act])))
    return float(np.mean(np.concatenate(dists)))


class DemoPolicy:
    """Oracle chunk generator: rolls the demonstrator forward from the observed state.

    Used for queue experiments where the learned policy is irrelevant. The
    reference point starts at the angle of the current end-effector and
    advances at the demonstration's angular speed.
    """

    def __init__(self, h_a: int, dt: float, h_o: int = 1):
        self.h_a, self.dt, self.h_o = int(h_a), float(dt), int(h_o)
        self.obs_dim, self.action_dim = OBS_DIM, ACTION_DIM
        self.omega = 2 * np.pi / (N_WAYPOINTS * STEPS_PER_WAYPOINT * dt)

    @property
    def cond_dims(self) -> int:
        return self.h_o * self.obs_dim

    def describe(self) -> dict:
        return {"h_o": self.h_o, "h_a": self.h_a, "obs_dim": self.obs_dim, "action_dim": self.action_dim,
                "objective": "scripted", "relative": False, "steps": 0}

    def infer_chunk(self, obs_stack, seed: Optional[int] = None, rng=None, steps=None) -> np.ndarray:
        obs = np.asarray(obs_stack, dtype=float).ravel()
        if obs.size != self.cond_dims:
            raise DimMismatch(f"observation stack has {obs.size} values, expected {self.cond_dims}")
        state = ArmState(obs[-OBS_DIM:][:ACTION_DIM])
        c = np.asarray(CENTER)
        rel = fk(state) - c
        phi = np.arctan2(rel[1], rel[0])
        out = np.empty((self.h_a, ACTION_DIM))
        for k in range(self.h_a):
            ang = phi + self.omega * self.dt * (k + 1)
            p_ref = c + RADIUS * np.array([np.cos(ang), np.sin(ang)])
            v_ref = RADIUS * self.omega * np.array([-np.sin(ang), np.cos(ang)])
            state = feedback_diffik_step(state, PoseTarget(p_ref, v_ref), K_P, self.dt)
            out[k] = state.theta
        return out


def stack_history(history: Sequence[np.ndarray], h_o: int) -> np.ndarray:
    """Last ``h_o`` observations, oldest first, front-padded by repeating the earliest."""
    hist = list(history[-h_o:])
    while len(hist) < h_o:
        hist.insert(0, hist[0])
    return np.concatenate(hist)

