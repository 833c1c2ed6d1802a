import numpy as np
import pytest

from surgsim import Engine, MaterialParams, SolverConfig, Tool, ToolPose
from surgsim.collision import closest_point_element_sdf
from surgsim.phantom import make_slab, pin_halfspace
from surgsim.sdf import Sphere
from surgsim.tools import apply_grasper_grab, apply_grasper_release, apply_scissors_cut


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile (or load from disk cache) every numba kernel once, outside any
    timed test body, by running a miniature end-to-end scenario."""
    mesh = make_slab(3, 3, 2, size=(0.03, 0.03, 0.02))
    pin_halfspace(mesh, (0, 0, 1), 1e-9)
    tool = Tool(
        tool_id="t", kind="grasper",
        pose=ToolPose(kind="grasper", position=(0.015, 0.015, 0.03),
                      quaternion=(1, 0, 0, 0), jaw=1.0),
    )
    for parallel in (False, True):
        eng = Engine(mesh, MaterialParams(), SolverConfig(substeps=2, parallel_batches=parallel),
                     tools=[tool])
        press = ToolPose(kind="grasper", position=(0.015, 0.015, 0.024),
                         quaternion=(1, 0, 0, 0), jaw=1.0)
        eng.step_frame({"t": press})
        closed = ToolPose(kind="grasper", position=(0.015, 0.015, 0.024),
                          quaternion=(1, 0, 0, 0), jaw=0.05)
        eng.step_frame({"t": closed})
        apply_grasper_release(eng, eng.tools["t"])
        eng.tools_config.require_coagulation = False
        scissor_pose = ToolPose(kind="scissors", position=(0.015, 0.015, 0.024),
                                quaternion=(1, 0, 0, 0), jaw=0.0)
        apply_scissors_cut(eng, scissor_pose)
        eng.add_attachment(0, mesh.vertices[0] + 0.001, compliance=1e-4)
        eng.step_frame()
    closest_point_element_sdf(np.array([[0.0, 0.0, 0.01]]), Sphere(radius=0.005))
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(20260811)


def random_tet(rng, scale=0.05, min_quality=0.1):
    """Well-conditioned random tetrahedron vertex positions (4, 3)."""
    while True:
        pts = rng.uniform(-scale, scale, size=(4, 3))
        d = np.stack([pts[1] - pts[0], pts[2] - pts[0], pts[3] - pts[0]], axis=1)
        vol = np.linalg.det(d) / 6.0
        edge = max(np.linalg.norm(pts[i] - pts[j]) for i in range(4) for j in range(i + 1, 4))
        if vol > min_quality * edge**3 / 6.0:
            return pts
