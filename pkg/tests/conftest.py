from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ematongue import ema_io, synth
from ematongue.rig import Pose, bind_struts, default_assignment, default_rig, end_tangents

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def rig():
    return default_rig()


@pytest.fixture(scope="session")
def struts(rig):
    return synth.default_struts(rig)


@pytest.fixture(scope="session")
def layout(struts):
    return synth.default_layout(struts)


@pytest.fixture(scope="session")
def reference_pose():
    scene = synth.default_scene()["static_coils"]
    return {k: scene[k]["position"] for k in ("NOSE", "EAR_L", "EAR_R")}


def random_pose(rig, rng, max_disp=5.0, max_twist=0.3):
    """Rest pose with every free joint moved inside a ball and random twists."""
    p = Pose.rest(rig)
    d = rng.normal(size=p.joints.shape)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d *= max_disp * rng.random((len(d), 1)) ** (1 / 3)
    d[0] = 0.0  # pinned root
    p.joints = p.joints + d
    p.head_twist = rng.uniform(-max_twist, max_twist, len(rig))
    p.tail_twist = rng.uniform(-max_twist, max_twist, len(rig))
    return p


def fk_targets(pose, assignment=None):
    """Targets that a perfect solve reproduces exactly: endpoint plus end tangent."""
    from ematongue.rig import Target

    rig = pose.rig
    th, tt = end_tangents(rig, pose.joints)
    out = {}
    for bone, end in (assignment or default_assignment()).values():
        b = rig.index[bone]
        out[(bone, end)] = Target(pose.endpoint(bone, end), th[b] if end == "head" else tt[b], 1.0)
    return out


class Corpus:
    def __init__(self, sweep, truth, cleaned, struts):
        self.sweep = sweep
        self.truth = truth
        self.cleaned = cleaned
        self.struts = struts


def make_corpus(rig, struts, layout, reference_pose, cycles=23, noise=None, seed=0):
    script = synth.ta_cycle_script(rig, cycles)
    sweep, truth = synth.generate_gesture(rig, struts, script, 200.0, noise=noise, seed=seed,
                                          annotations=synth.ta_annotations(cycles))
    corrected, _ = ema_io.head_correct(sweep, layout, reference_pose)
    cleaned, _ = ema_io.clean(corrected)
    bound = bind_struts(rig, cleaned, layout, synth.first_rest_hold_frame(), default_assignment())
    return Corpus(sweep, truth, cleaned, bound)


@pytest.fixture(scope="session")
def clean_corpus(rig, struts, layout, reference_pose):
    return make_corpus(rig, struts, layout, reference_pose)


@pytest.fixture(scope="session")
def clean_solve(rig, clean_corpus):
    from ematongue.ik import solve_sweep

    return solve_sweep(rig, clean_corpus.struts, clean_corpus.cleaned)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
