"""Virtual instruments: diathermy marking, scissors resection, grasper attachment.

Tool poses arrive once per frame; mutations (cuts, grabs) happen only at frame
boundaries, while poses interpolate linearly across the frame's substeps for
collision. Quaternions are (x, y, z, w) throughout.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .sdf import Capsule, CompiledSdf, Posed, RoundedBox, SmoothUnion, Sphere, Union
from .sdf import compile_shape, transform_compiled

log = logging.getLogger(__name__)

TOOL_KINDS = ("diathermy", "scissors", "grasper")

IDENTITY_QUAT = (0.0, 0.0, 0.0, 1.0)

# Jaw values are quantized to this grid when building cached jaw geometry;
# sub-micrometer shape error at the default jaw length.
_JAW_QUANTUM = 1e-3


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("zero quaternion")
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_rotate(q, v) -> np.ndarray:
    return quat_to_matrix(q) @ np.asarray(v, dtype=np.float64)


def quat_slerp(q0, q1, u: float) -> np.ndarray:
    """Shortest-arc spherical interpolation; exactly q0/q1 at u = 0/1."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    dot = float(q0 @ q1)
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 0.9995:
        out = q0 + u * (q1 - q0)
        return out / np.linalg.norm(out)
    theta = math.acos(min(1.0, dot))
    s = math.sin(theta)
    return (math.sin((1.0 - u) * theta) * q0 + math.sin(u * theta) * q1) / s


@dataclass
class ToolPose:
    kind: str
    position: np.ndarray
    quaternion: np.ndarray = (0.0, 0.0, 0.0, 1.0)
    jaw: float = 1.0
    active: bool = False

    def __post_init__(self):
        if self.kind not in TOOL_KINDS:
            raise ValueError(f"unknown tool kind {self.kind!r}")
        self.position = np.asarray(self.position, dtype=np.float64)
        q = np.asarray(self.quaternion, dtype=np.float64)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"quaternion not normalized (|q| = {n:.8f})")
        self.quaternion = q / n
        if not 0.0 <= self.jaw <= 1.0:
            raise ValueError(f"jaw must be in [0, 1], got {self.jaw}")


def lerp_pose(a: ToolPose, b: ToolPose, u: float) -> ToolPose:
    """Linear position/jaw, slerp orientation; activation sampled from the
    frame target (booleans do not interpolate)."""
    return ToolPose(
        kind=b.kind,
        position=(1.0 - u) * a.position + u * b.position,
        quaternion=quat_slerp(a.quaternion, b.quaternion, u),
        jaw=(1.0 - u) * a.jaw + u * b.jaw,
        active=b.active,
    )


@dataclass(frozen=True)
class ToolGeometry:
    """Instrument dimensions (meters). Synthetic defaults sized for a
    fetoscopic instrument against a centimeter-scale tissue slab."""

    shaft_length: float = 0.12
    shaft_radius: float = 0.0025
    tip_radius: float = 0.003
    jaw_length: float = 0.012
    jaw_half_thickness: float = 0.0012
    jaw_half_width: float = 0.002
    max_aperture: float = 0.014      # jaw tip separation at jaw = 1
    jaw_round: float = 0.0008
    blade_radius: float = 0.0025
    grasp_dilation: float = 0.002
    smoothing: float = 0.002

    @property
    def max_jaw_angle(self) -> float:
        return math.asin(min(1.0, (self.max_aperture / 2.0) / self.jaw_length))


@dataclass
class ToolsConfig:
    """Interaction model parameters (all synthetic; the procedure stages they
    encode are: coagulate first, then the marked tissue becomes cuttable)."""

    diathermy_rate: float = 1.0           # energy units per second of tip contact
    coag_threshold: float = 0.25          # flag (and darken) at this energy
    cut_threshold_fraction: float = 0.75  # cuttable at fraction * threshold
    require_coagulation: bool = True
    max_cut_fraction: float = 0.2         # runaway-cut guard
    grasp_compliance: float = 0.0
    deposit_margin: float = 1.5e-3        # tip proximity band for energy deposit

    def new_coagulation_state(self) -> "CoagulationState":
        return CoagulationState(
            threshold=self.coag_threshold, cut_fraction=self.cut_threshold_fraction
        )


class CoagulationState:
    """Per-surface-triangle accumulated energy keyed by the sorted vertex
    triple, so energies survive surface re-extraction after cuts."""

    def __init__(self, threshold: float, cut_fraction: float):
        self.threshold = threshold
        self.cut_fraction = cut_fraction
        self.energies: dict[tuple[int, int, int], float] = {}

    @staticmethod
    def face_key(tri) -> tuple[int, int, int]:
        a, b, c = int(tri[0]), int(tri[1]), int(tri[2])
        return tuple(sorted((a, b, c)))

    def deposit(self, key: tuple[int, int, int], energy: float) -> None:
        if energy < 0.0:
            raise ValueError("coagulation energy is monotone non-decreasing")
        self.energies[key] = self.energies.get(key, 0.0) + energy

    def energy(self, key) -> float:
        return self.energies.get(key, 0.0)

    def is_coagulated(self, key) -> bool:
        return self.energy(key) >= self.threshold

    def is_cuttable(self, key) -> bool:
        return self.energy(key) >= self.cut_fraction * self.threshold

    def flags_for(self, triangles: np.ndarray) -> np.ndarray:
        out = np.zeros(len(triangles), dtype=np.uint8)
        for i, tri in enumerate(triangles):
            if self.is_coagulated(self.face_key(tri)):
                out[i] = 1
        return out


# ---------------------------------------------------------------------------
# shapes


def _jaw_pose(sign: float, angle: float, geom: ToolGeometry):
    half = np.array([0.0, 0.0, geom.jaw_length / 2.0])
    rot = np.array([math.sin(sign * angle / 2.0), 0.0, 0.0, math.cos(sign * angle / 2.0)])
    center = quat_rotate(rot, half)
    return Posed(
        position=tuple(center),
        quaternion=tuple(rot),
        child=RoundedBox(
            half_extents=(geom.jaw_half_width, geom.jaw_half_thickness, geom.jaw_length / 2.0),
            round_radius=geom.jaw_round,
        ),
    )


def _local_tool_shape(kind: str, geom: ToolGeometry, jaw: float):
    """Tool SDF in the tool frame: +z points toward the tissue, tip/jaw pivot
    at the origin, shaft trailing along -z."""
    shaft = Capsule(a=(0.0, 0.0, 0.0), b=(0.0, 0.0, -geom.shaft_length), radius=geom.shaft_radius)
    if kind == "diathermy":
        return Union(children=(Sphere(radius=geom.tip_radius, center=(0.0, 0.0, 0.0)), shaft))
    angle = jaw * geom.max_jaw_angle
    return SmoothUnion(
        smoothing=geom.smoothing,
        children=(shaft, _jaw_pose(+1.0, angle, geom), _jaw_pose(-1.0, angle, geom)),
    )


def tool_sdf(pose: ToolPose, geometry: ToolGeometry | None = None):
    """World-space SDF shape tree for an instrument pose."""
    geom = geometry or ToolGeometry()
    return Posed(
        position=tuple(pose.position),
        quaternion=tuple(pose.quaternion),
        child=_local_tool_shape(pose.kind, geom, pose.jaw),
    )


def jaw_tip_positions(pose: ToolPose, geometry: ToolGeometry | None = None):
    """World positions of the two jaw tips at the pose's jaw opening."""
    geom = geometry or ToolGeometry()
    angle = pose.jaw * geom.max_jaw_angle
    tips = []
    for sign in (+1.0, -1.0):
        rot = np.array([math.sin(sign * angle / 2.0), 0.0, 0.0, math.cos(sign * angle / 2.0)])
        local = quat_rotate(rot, np.array([0.0, 0.0, geom.jaw_length]))
        tips.append(pose.position + quat_rotate(pose.quaternion, local))
    return tips[0], tips[1]


@functools.lru_cache(maxsize=256)
def _compiled_local(kind: str, geom: ToolGeometry, jaw_q: int) -> CompiledSdf:
    return compile_shape(_local_tool_shape(kind, geom, jaw_q * _JAW_QUANTUM))


@functools.lru_cache(maxsize=16)
def _compiled_jaw_region(geom: ToolGeometry) -> CompiledSdf:
    # closed-jaw volume used for grasping, pivot at the origin
    return compile_shape(
        Posed(
            position=(0.0, 0.0, geom.jaw_length / 2.0),
            quaternion=IDENTITY_QUAT,
            child=RoundedBox(
                half_extents=(geom.jaw_half_width, geom.jaw_half_thickness, geom.jaw_length / 2.0),
                round_radius=geom.jaw_round,
            ),
        )
    )


@functools.lru_cache(maxsize=16)
def _compiled_blade(geom: ToolGeometry) -> CompiledSdf:
    # capsule spanning the closed jaws: pivot to closed tip
    return compile_shape(
        Capsule(a=(0.0, 0.0, 0.0), b=(0.0, 0.0, geom.jaw_length), radius=geom.blade_radius)
    )


def tool_compiled_sdf(pose: ToolPose, geometry: ToolGeometry | None = None) -> CompiledSdf:
    """Compiled world-space SDF; local shape cached per quantized jaw value."""
    geom = geometry or ToolGeometry()
    jaw_q = int(round(pose.jaw / _JAW_QUANTUM))
    local = _compiled_local(pose.kind, geom, jaw_q)
    return transform_compiled(local, quat_to_matrix(pose.quaternion), pose.position)


def _posed_compiled(local: CompiledSdf, pose: ToolPose) -> CompiledSdf:
    return transform_compiled(local, quat_to_matrix(pose.quaternion), pose.position)


# ---------------------------------------------------------------------------
# instrument actions


def apply_diathermy(pose: ToolPose, contacts, dt: float, state: CoagulationState,
                    geometry: ToolGeometry | None = None, rate: float = 1.0,
                    deposit_margin: float = 1.5e-3, positions: np.ndarray | None = None):
    """Deposit rate*dt into every contacted triangle near the active tip."""
    if pose.kind != "diathermy" or not pose.active:
        return state
    geom = geometry or ToolGeometry()
    tip = pose.position
    reach = geom.tip_radius + deposit_margin
    for con in contacts:
        if con.elem_kind != 1:  # triangles only
            continue
        if positions is not None:
            point = (con.barycentric[:, None] * positions[con.vertex_ids]).sum(axis=0)
            if np.linalg.norm(point - tip) > reach:
                continue
        state.deposit(CoagulationState.face_key(con.vertex_ids), rate * dt)
    return state


@dataclass
class CutResult:
    removed_tets: np.ndarray
    removed_mass: float
    rejected: bool = False
    reason: str = ""


def _blade_candidate_tets(engine, pose: ToolPose, geom: ToolGeometry) -> np.ndarray:
    """Alive tets intersecting the blade capsule, detected by sampling each
    tet at its vertices, centroid, and edge midpoints."""
    mesh = engine.mesh
    alive_ids = np.nonzero(mesh.alive)[0]
    if len(alive_ids) == 0:
        return alive_ids
    blade = _posed_compiled(_compiled_blade(geom), pose)
    x = engine.state.x
    p = x[mesh.tets[alive_ids]]  # (k, 4, 3)
    centroid = p.mean(axis=1, keepdims=True)
    pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    mids = np.stack([(p[:, a] + p[:, b]) / 2.0 for a, b in pairs], axis=1)
    samples = np.concatenate([p, centroid, mids], axis=1)  # (k, 11, 3)
    flat = samples.reshape(-1, 3)
    idx = np.arange(len(flat), dtype=np.int64)
    out = np.empty(len(flat), dtype=np.int64)
    n = _kernels.points_inside_sdf(
        flat, idx, len(flat), blade.ops, blade.op_smooth, blade.leaf_kind,
        blade.leaf_params, blade.leaf_rot, blade.leaf_trans, 0.0, out,
    )
    hit_tets = np.unique(out[:n] // samples.shape[1])
    return alive_ids[hit_tets]


def apply_scissors_cut(engine, pose: ToolPose, geometry: ToolGeometry | None = None) -> CutResult:
    """Resect tets intersecting the closed blade; gated on coagulation unless
    disabled. Large cuts are rejected (runaway-cut guard)."""
    geom = geometry or ToolGeometry()
    cfg = engine.tools_config
    candidates = _blade_candidate_tets(engine, pose, geom)
    if cfg.require_coagulation and len(candidates):
        coag = engine.coagulation
        keep = []
        for t in candidates:
            tet = engine.mesh.tets[t]
            faces = (
                (tet[0], tet[2], tet[1]), (tet[0], tet[1], tet[3]),
                (tet[0], tet[3], tet[2]), (tet[1], tet[2], tet[3]),
            )
            if any(coag.is_cuttable(CoagulationState.face_key(f)) for f in faces):
                keep.append(t)
        candidates = np.asarray(keep, dtype=np.int64)
    if len(candidates) == 0:
        return CutResult(removed_tets=candidates, removed_mass=0.0)
    n_alive = int(engine.mesh.alive.sum())
    if len(candidates) > cfg.max_cut_fraction * n_alive:
        msg = (
            f"cut rejected: would remove {len(candidates)} of {n_alive} alive tets "
            f"(> {cfg.max_cut_fraction:.0%} runaway-cut guard)"
        )
        log.warning(msg)
        return CutResult(removed_tets=np.zeros(0, dtype=np.int64), removed_mass=0.0,
                         rejected=True, reason=msg)
    removed = engine.mark_tets_dead(candidates)
    return CutResult(removed_tets=candidates, removed_mass=removed)


def apply_grasper_grab(engine, tool: "Tool", pose: ToolPose) -> list[int]:
    """Attach surface vertices inside the dilated closed-jaw region to
    jaw-local frame targets; returns the new attachment handles."""
    geom = tool.geometry
    mesh = engine.mesh
    if mesh.surface is None or len(mesh.surface) == 0:
        return []
    region = _posed_compiled(_compiled_jaw_region(geom), pose)
    surf_verts = np.unique(mesh.surface).astype(np.int64)
    out = np.empty(len(surf_verts), dtype=np.int64)
    n = _kernels.points_inside_sdf(
        engine.state.x, surf_verts, len(surf_verts), region.ops, region.op_smooth,
        region.leaf_kind, region.leaf_params, region.leaf_rot, region.leaf_trans,
        geom.grasp_dilation, out,
    )
    rot = quat_to_matrix(pose.quaternion)
    handles = []
    for v in out[:n]:
        if engine.mesh.inv_mass[v] == 0.0:
            continue  # pinned or orphaned: an attachment could not move it
        world = engine.state.x[v]
        local = rot.T @ (world - pose.position)
        handle = engine.add_attachment(int(v), world, engine.tools_config.grasp_compliance)
        tool.held_attachments.append((handle, local))
        handles.append(handle)
    return handles


def apply_grasper_release(engine, tool: "Tool") -> None:
    for handle, _local in tool.held_attachments:
        engine.remove_attachment(handle)
    tool.held_attachments.clear()


@dataclass
class Tool:
    """Per-instrument runtime state owned by the engine."""

    tool_id: str
    kind: str
    pose: ToolPose
    geometry: ToolGeometry = field(default_factory=ToolGeometry)
    interp_pose: ToolPose | None = None
    held_attachments: list[tuple[int, np.ndarray]] = field(default_factory=list)
    initial_pose: ToolPose | None = None

    def __post_init__(self):
        if self.kind not in TOOL_KINDS:
            raise ValueError(f"unknown tool kind {self.kind!r}")
        if self.initial_pose is None:
            self.initial_pose = self.pose

    def attachment_target(self, local: np.ndarray) -> np.ndarray:
        pose = self.interp_pose or self.pose
        return pose.position + quat_to_matrix(pose.quaternion) @ local

    def after_substep(self, engine, dt_s: float) -> None:
        if self.kind != "diathermy":
            return
        pose = self.interp_pose or self.pose
        cfg = engine.tools_config
        apply_diathermy(
            pose, engine.last_contacts.get(self.tool_id, []), dt_s, engine.coagulation,
            self.geometry, cfg.diathermy_rate, cfg.deposit_margin, engine.state.x,
        )

    def reset(self) -> None:
        self.pose = self.initial_pose
        self.interp_pose = None
        self.held_attachments.clear()


def frame_events(engine, targets: dict[str, ToolPose]) -> None:
    """Detect jaw/activation transitions between the last committed pose and
    the frame target; apply cuts and grasp changes at the frame boundary."""
    for tool_id, tool in engine.tools.items():
        prev = tool.pose
        target = targets[tool_id]
        closing = prev.jaw > 0.5 and target.jaw < 0.1
        opening = target.jaw > 0.5
        if tool.kind == "scissors" and closing and target.active:
            apply_scissors_cut(engine, target, tool.geometry)
        elif tool.kind == "grasper":
            if closing and not tool.held_attachments:
                apply_grasper_grab(engine, tool, target)
            elif opening and tool.held_attachments:
                apply_grasper_release(engine, tool)
