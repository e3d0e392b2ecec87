"""Quadrotor trajectory-tracking stack: body-rate simulator, L1 adaptive
disturbance estimator, flatness and sampling-MPC baselines, and a
reinforcement-learned tracking policy with an experiment harness."""

__version__ = "0.1.0"

from .dynamics import (
    ControlCommand,
    DisturbanceState,
    QuadState,
    SimConfig,
    SimulationFault,
    evolve_disturbance,
    is_crashed,
    sample_initial_disturbance,
    step,
)
from .estimator import L1Estimator, L1State, l1_update
from .trajectories import (
    FeedforwardWindow,
    ReferenceTrajectory,
    feedforward_window,
    gen_chained,
    gen_poly5,
    gen_star,
    gen_triangle,
    gen_zigzag,
    make_bank,
)
from .policy import ObsConfig, Observation, PolicyBundle, act, build_observation, encode, load_bundle, save_bundle
from .baselines import FlatnessGains, MppiConfig, flatness_control, mppi_control, rollout_cost
