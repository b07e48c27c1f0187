import numpy as np
import pytest

from motionlift.core_types import CameraParams, MotionSequence


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_motion(rng, F=4, J=5, root_index=0):
    pos = rng.normal(0.0, 0.3, size=(F, J, 3))
    root = rng.normal(0.0, 0.2, size=(F, 3)) + np.array([0.0, 0.0, 0.9])
    return MotionSequence.from_relative(pos, root, root_index)


def random_camera(rng, distance=3.0):
    """Camera on a random sphere point aimed at a jittered origin."""
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    eye = distance * d + np.array([0.0, 0.0, 0.9])
    up = (0.0, 0.0, 1.0) if abs(d[2]) < 0.95 else (1.0, 0.0, 0.0)
    return CameraParams.look_at(eye, rng.normal(0, 0.05, 3) + [0.0, 0.0, 0.9], up=up,
                                focal=rng.uniform(400, 1200, 2),
                                principal_point=rng.uniform(300, 700, 2))


@pytest.fixture(scope="session")
def tiny_ckpt():
    """A briefly trained small prior; enough structure for sampler plumbing tests."""
    from motionlift.synth import GeneratorConfig, generate_motions
    from motionlift.trainer import TrainConfig, train

    data = generate_motions(GeneratorConfig(n_sequences=20, frames=8, seed=11))
    cfg = TrainConfig(steps=60, batch_size=8, F_max=8, T=50,
                      model=dict(joints=17, model_dim=16, layers=1, heads=2))
    return train(data, cfg)


@pytest.fixture(scope="session")
def tiny_scene():
    from motionlift.synth import GeneratorConfig, default_camera_rig, generate_motions, render_observations

    gt = generate_motions(GeneratorConfig(n_sequences=1, frames=8, seed=12))[0]
    cams = default_camera_rig()
    obs = render_observations(gt, cams, 1.0, np.random.default_rng(0))
    return gt, list(zip(obs, cams))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
