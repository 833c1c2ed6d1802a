"""Synthetic slab phantom: a tetrahedralized rectangular slab with a marked
central disk standing in for the lesion, since no anatomical mesh ships.
Also builds the scripted circumferential-incision-then-resect trajectory."""

from __future__ import annotations

import math

import numpy as np

from .mesh import TetMesh, compute_rest_state
from .tools import CoagulationState, ToolPose

# Alternating 5-tet cube decomposition; parity flip keeps shared faces conforming.
_EVEN_TETS = (
    (0b000, 0b100, 0b010, 0b001),
    (0b110, 0b100, 0b010, 0b111),
    (0b101, 0b100, 0b111, 0b001),
    (0b011, 0b111, 0b010, 0b001),
    (0b100, 0b111, 0b010, 0b001),
)
_ODD_TETS = (
    (0b000, 0b100, 0b110, 0b101),
    (0b000, 0b110, 0b010, 0b011),
    (0b000, 0b101, 0b011, 0b001),
    (0b110, 0b101, 0b011, 0b111),
    (0b000, 0b110, 0b011, 0b101),
)


def make_slab(
    nx: int, ny: int, nz: int,
    size: tuple[float, float, float] = (0.08, 0.08, 0.02),
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> TetMesh:
    """Regular slab of nx*ny*nz cubes, 5 tets each, rest state computed."""
    sx, sy, sz = size
    ox, oy, oz = origin
    xs = np.linspace(ox, ox + sx, nx + 1)
    ys = np.linspace(oy, oy + sy, ny + 1)
    zs = np.linspace(oz, oz + sz, nz + 1)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    verts = np.zeros(((nx + 1) * (ny + 1) * (nz + 1), 3))
    for i in range(nx + 1):
        for j in range(ny + 1):
            for k in range(nz + 1):
                verts[vid(i, j, k)] = (xs[i], ys[j], zs[k])

    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                corner = [vid(i + (c >> 2 & 1), j + (c >> 1 & 1), k + (c & 1)) for c in range(8)]
                pattern = _EVEN_TETS if (i + j + k) % 2 == 0 else _ODD_TETS
                for tet in pattern:
                    tets.append([corner[c] for c in tet])

    mesh = TetMesh(vertices=verts, tets=np.array(tets, dtype=np.int64))
    compute_rest_state(mesh)
    mesh.refresh_surface()
    return mesh


def slab_grid_for_elements(n_elements: int, nz: int = 2) -> tuple[int, int, int]:
    """Square-footprint grid whose 5-tet decomposition is close to (and at
    least) the requested element count."""
    n_cubes = max(1, math.ceil(n_elements / 5))
    side = max(1, math.ceil(math.sqrt(n_cubes / nz)))
    return side, side, nz


def top_surface_vertices(mesh: TetMesh) -> np.ndarray:
    """Vertices on the slab's +z face."""
    zmax = mesh.vertices[:, 2].max()
    return np.nonzero(np.isclose(mesh.vertices[:, 2], zmax))[0]


def pin_halfspace(mesh: TetMesh, normal, offset: float) -> np.ndarray:
    """Pin all vertices with dot(normal, v) <= offset; returns their indices."""
    n = np.asarray(normal, dtype=np.float64)
    picked = np.nonzero(mesh.vertices @ n <= offset)[0]
    mesh.pinned[picked] = True
    return picked


def placode_disk_triangles(mesh: TetMesh, center, radius: float) -> np.ndarray:
    """Surface triangles on the top face whose centroid lies within `radius`
    of `center` (xy distance): the marked central "lesion" disk."""
    if mesh.surface is None:
        mesh.refresh_surface()
    c = np.asarray(center, dtype=np.float64)
    tri_pts = mesh.vertices[mesh.surface]
    centroids = tri_pts.mean(axis=1)
    zmax = mesh.vertices[:, 2].max()
    on_top = np.isclose(centroids[:, 2], zmax)
    in_disk = np.linalg.norm(centroids[:, :2] - c[:2], axis=1) <= radius
    return np.nonzero(on_top & in_disk)[0]


def ring_path(center, radius: float, z: float, n_points: int = 64) -> np.ndarray:
    """Closed circular waypoint loop at height z (for diathermy trajectories)."""
    angles = np.linspace(0.0, 2.0 * math.pi, n_points, endpoint=False)
    pts = np.zeros((n_points, 3))
    pts[:, 0] = center[0] + radius * np.cos(angles)
    pts[:, 1] = center[1] + radius * np.sin(angles)
    pts[:, 2] = z
    return pts


DOWNWARD = (1.0, 0.0, 0.0, 0.0)  # 180 deg about x: tool +z along world -z


def procedure_trajectory(center, radius: float, surface_z: float,
                         passes: int = 3, cuts_per_pass: int = 32,
                         ring_seconds: float = 2.0, cut_spacing: float = 0.1,
                         descend_per_pass: float = 0.002,
                         frame_dt: float = 1.0 / 60.0):
    """Scripted two-tool procedure: the diathermy tip traces the ring while
    active, then the scissors close once at each waypoint around it. Each pass
    descends by `descend_per_pass` so the tip reaches the freshly exposed
    tissue in the deepening groove before the next resection round.

    Returns (Trajectory, total duration). Jaw transitions are step-shaped and
    straddle a frame boundary so every closure registers as one cut event.
    """
    from .harness import Trajectory

    traj = Trajectory()
    cx, cy = float(center[0]), float(center[1])
    park_d = ToolPose(kind="diathermy", position=(cx, cy, surface_z + 0.05),
                      quaternion=DOWNWARD, active=False)
    park_s = ToolPose(kind="scissors", position=(cx, cy, surface_z + 0.08),
                      quaternion=DOWNWARD, jaw=1.0, active=False)
    traj.add("diathermy", 0.0, park_d)
    traj.add("scissors", 0.0, park_s)

    def ring_point(angle, z):
        return (cx + radius * math.cos(angle), cy + radius * math.sin(angle), z)

    t = 0.2
    eps = 1e-6
    for p in range(passes):
        # diathermy pass: circle the ring with the tip pressed into the groove
        tip_z = surface_z + 0.001 - p * descend_per_pass
        n_way = 64
        for k in range(n_way + 1):
            angle = 2.0 * math.pi * k / n_way
            traj.add("diathermy", t + ring_seconds * k / n_way, ToolPose(
                kind="diathermy", position=ring_point(angle, tip_z),
                quaternion=DOWNWARD, active=True,
            ))
        t += ring_seconds + 2 * frame_dt
        traj.add("diathermy", t, park_d)

        # scissors pass: one closure per waypoint, timed to frame boundaries
        for k in range(cuts_per_pass):
            angle = 2.0 * math.pi * k / cuts_per_pass
            pos = ring_point(angle, surface_z + 0.002)
            t_cut = (round(t / frame_dt) + 2) * frame_dt
            arrive = t_cut - frame_dt - eps
            traj.add("scissors", arrive, ToolPose(
                kind="scissors", position=pos, quaternion=DOWNWARD, jaw=1.0, active=True))
            traj.add("scissors", t_cut - 0.5 * frame_dt, ToolPose(
                kind="scissors", position=pos, quaternion=DOWNWARD, jaw=1.0, active=True))
            traj.add("scissors", t_cut - 0.5 * frame_dt + eps, ToolPose(
                kind="scissors", position=pos, quaternion=DOWNWARD, jaw=0.0, active=True))
            t_open = t_cut + frame_dt
            traj.add("scissors", t_open, ToolPose(
                kind="scissors", position=pos, quaternion=DOWNWARD, jaw=0.0, active=True))
            traj.add("scissors", t_open + eps, ToolPose(
                kind="scissors", position=pos, quaternion=DOWNWARD, jaw=1.0, active=True))
            t = t_cut + cut_spacing
        traj.add("scissors", t, park_s)
        t += 2 * frame_dt

    return traj, t + 0.2


def coagulate_ring(mesh: TetMesh, coag: CoagulationState, center, radius: float,
                   band: float, energy: float) -> int:
    """Directly mark current surface triangles inside the annulus cylinder
    radius +- band (any depth) as coagulated: the scripted stand-in for one
    diathermy pass, usable again after cuts expose fresh tissue."""
    if mesh.surface is None:
        mesh.refresh_surface()
    c = np.asarray(center, dtype=np.float64)
    count = 0
    for tri in mesh.surface:
        centroid = mesh.vertices[tri].mean(axis=0)
        r = np.linalg.norm(centroid[:2] - c[:2])
        if radius - band <= r <= radius + band:
            coag.deposit(CoagulationState.face_key(tri), energy)
            count += 1
    return count
