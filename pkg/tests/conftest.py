import functools
import time

import numpy as np
import pytest

from gausslock import core


def random_raw(seed: int, n: int = 64) -> np.ndarray:
    """A raw batch whose activated cloud has well separated spectra."""
    rng = np.random.default_rng(seed)
    raw = rng.normal(0.0, 1.0, size=(n, core.N_CHANNELS))
    raw[:, core.POS] *= np.array([0.5, 0.3, 0.15])
    raw[:, core.COLOR] *= np.array([1.5, 1.0, 0.5])
    return raw


def random_cloud(seed: int, n: int = 64) -> core.GaussianCloud:
    return core.activate(random_raw(seed, n))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TEACHER_SECONDS: dict = {}


@functools.lru_cache(maxsize=None)
def teacher_for(seed: int):
    """Reference teacher for one seed, trained once per session."""
    from gausslock.experiment import pretrain_teacher

    t0 = time.perf_counter()
    teacher = pretrain_teacher(seed)
    TEACHER_SECONDS[seed] = time.perf_counter() - t0
    return teacher


# acceptance verdicts, echoed after the run: number -> (passed, detail)
CRITERIA: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


def trap_descent(trap: str, seed: int, steps: int, lr: float = 0.3, n: int = 64):
    """Adam descent of a single trap on a free raw cloud.

    Returns the opacity mask and the collapse report before every step and
    after the last one.
    """
    from gausslock import render, traps
    from gausslock.optim import AdamState, OptimizerConfig, adamw_step

    raw = random_raw(seed, n)
    cfg = traps.TrapConfig(enabled=frozenset({trap}))
    mask = traps.build_opacity_mask(core.activate(raw), 0.1)
    opt = OptimizerConfig(lr=lr, weight_decay=0.0, grad_clip=0.0)
    state = AdamState.zeros(raw.size)
    reports = []
    for _ in range(steps):
        cloud = core.activate(raw)
        reports.append(render.collapse_report(cloud, mask))
        g = traps.coupled_trap(cloud, cfg, mask).grad
        theta, state, _ = adamw_step(raw.ravel(), state, g.ravel(), opt)
        raw = theta.reshape(raw.shape)
    reports.append(render.collapse_report(core.activate(raw), mask))
    return mask, reports


# statistic each trap drives, and whether it rises under descent
TRAP_STATISTIC = {
    "position": ("pos_cond", 1),
    "scale": ("scale_aniso", 1),
    "rotation": ("rot_coherence", 1),
    "color": ("color_cond", 1),
    "opacity": ("opa_masked_mean", -1),
}
