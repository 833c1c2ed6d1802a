"""XPBD time integration: n equal substeps, one Gauss-Seidel pass each.

The engine owns the mutable simulation state. Constraint order within a pass
is deviatoric, hydrostatic, attachments, then contacts (so penetrations are
resolved after elasticity). Elastic constraints run in graph-colored batches;
batches with disjoint vertex sets make the parallel path bitwise-identical to
the serial one.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, collision, constitutive
from .mesh import MaterialParams, TetMesh, vertex_masses_from_density
from .sdf import compile_shape
from .tools import Tool, ToolPose, ToolsConfig, frame_events, lerp_pose, tool_compiled_sdf

# Finite stand-in for infinite compliance (lambda=0 materials): keeps the
# XPBD update well-defined while making the constraint inert.
_ALPHA_CAP = 1e30


class NumericalDivergence(RuntimeError):
    """Positions left the finite range; names the first offending vertex."""

    def __init__(self, vertex: int, substep: int):
        self.vertex = vertex
        self.substep = substep
        super().__init__(f"non-finite position at vertex {vertex} (substep {substep})")


@dataclass
class SolverConfig:
    frame_dt: float = 1.0 / 60.0
    substeps: int = 8
    iterations: int = 1                 # constraint passes per substep; >1 only
                                        # for the substep-vs-iteration comparison
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    velocity_damping: float = 0.0       # 1/s, applied as v *= max(0, 1 - damping*dt)
    max_speed_clamp: float = 0.0        # m/s, 0 disables
    deterministic: bool = True
    parallel_batches: bool = False
    contact_margin: float = 1e-3        # m, early-contact band
    contact_compliance: float = 0.0     # m/N, 0 = rigid pushout
    hydrostatic_rest_correction: bool = False  # opt-in det(F) = 1 + mu/lambda target
    compliance_scale_dev: float = 1.0
    compliance_scale_hyd: float = 1.0

    def __post_init__(self):
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.frame_dt <= 0.0:
            raise ValueError("frame_dt must be positive")

    @property
    def substep_dt(self) -> float:
        return self.frame_dt / self.substeps


@dataclass
class SolverState:
    x: np.ndarray
    x_prev: np.ndarray
    v: np.ndarray
    ext_force: np.ndarray
    lam_dev: np.ndarray
    lam_hyd: np.ndarray


@dataclass
class FrameTelemetry:
    frame_index: int
    sim_time: float
    mean_substep_ms: float
    elastic_residual: float
    total_volume: float
    volume_ratio: float
    kinetic_energy: float
    contact_count: int
    removed_mass: float
    degenerate_constraints: int
    nonconverged_narrowphase: int
    tool_forces: dict[str, float] = field(default_factory=dict)


def xpbd_delta_lambda(c_value, gradients, inv_masses, alpha_tilde, lambda_acc) -> float:
    """Single XPBD multiplier update; 0 when the system is degenerate.

    delta = (-C - alpha_tilde * lambda_acc) / (sum_i w_i |grad_i|^2 + alpha_tilde).
    Caller applies x_i += w_i * delta * grad_i and lambda_acc += delta.
    """
    grads = np.asarray(gradients, dtype=np.float64).reshape(-1, 3)
    w = np.asarray(inv_masses, dtype=np.float64)
    denom = float((w * (grads * grads).sum(axis=1)).sum()) + alpha_tilde
    if denom < 1e-12:
        return 0.0
    return (-c_value - alpha_tilde * lambda_acc) / denom


def extract_constraint_force(lambda_acc: float, gradient, dt_s: float) -> np.ndarray:
    """Constraint force estimate f = lambda * grad(C) / dt^2 (newtons)."""
    return lambda_acc * np.asarray(gradient, dtype=np.float64) / (dt_s * dt_s)


class Engine:
    """Owns and advances one soft-body scene; single-threaded stepping."""

    def __init__(
        self,
        mesh: TetMesh,
        materials: MaterialParams,
        config: SolverConfig,
        tools: list[Tool] | None = None,
        tools_config: ToolsConfig | None = None,
    ):
        self.mesh = mesh
        self.materials = materials
        self.config = config
        self.tools: dict[str, Tool] = {t.tool_id: t for t in (tools or [])}
        self.tools_config = tools_config or ToolsConfig()

        if mesh.rest_inv is None:
            raise ValueError("mesh rest state missing; call compute_rest_state")
        if mesh.surface is None:
            mesh.refresh_surface()
        if mesh.inv_mass is None or not np.any(mesh.inv_mass > 0):
            vertex_masses_from_density(mesh, materials.density)

        n = mesh.num_vertices
        m = mesh.num_tets
        self.state = SolverState(
            x=mesh.vertices.copy(),
            x_prev=mesh.vertices.copy(),
            v=np.zeros((n, 3)),
            ext_force=np.zeros((n, 3)),
            lam_dev=np.zeros(m),
            lam_hyd=np.zeros(m),
        )
        self._gravity = np.asarray(config.gravity, dtype=np.float64)

        # per-element compliance alpha = scale / (modulus * V_rest), capped so
        # a zero Lame lambda yields an inert (not NaN-producing) constraint
        vol = mesh.rest_volume
        self._alpha_dev = np.minimum(
            config.compliance_scale_dev / (materials.lame_mu * vol), _ALPHA_CAP
        )
        if materials.lame_lambda > 0.0:
            self._alpha_hyd = np.minimum(
                config.compliance_scale_hyd / (materials.lame_lambda * vol), _ALPHA_CAP
            )
        else:
            self._alpha_hyd = np.full(m, _ALPHA_CAP)
        self._rest_correction = (
            materials.lame_mu / materials.lame_lambda
            if config.hydrostatic_rest_correction and materials.lame_lambda > 0.0
            else 0.0
        )

        self._colors = _kernels.greedy_tet_coloring(mesh.tets, n)
        self._rebuild_constraint_order()
        self._rebuild_collision_structures()

        # attachments (grow-only arrays; slots deactivate on removal)
        self._att_vert = np.zeros(0, dtype=np.int64)
        self._att_target = np.zeros((0, 3))
        self._att_compliance = np.zeros(0)
        self._att_lam = np.zeros(0)
        self._att_active = np.zeros(0, dtype=np.bool_)
        self._att_dir = np.zeros((0, 3))

        self.frame_index = 0
        self.sim_time = 0.0
        self.removed_mass = 0.0
        self.topology_version = 0
        self.coagulation = self.tools_config.new_coagulation_state()
        self.last_contacts: dict[str, list[collision.Contact]] = {}
        self._last_tool_contact_force: dict[str, np.ndarray] = {}
        self._degenerate = 0
        self._nonconverged = 0
        self._rest_total_volume = mesh.total_volume()
        self._initial = self._capture_initial()

    # -- setup helpers ----------------------------------------------------

    def _capture_initial(self):
        return {
            "x": self.state.x.copy(),
            "v": self.state.v.copy(),
            "alive": self.mesh.alive.copy(),
            "inv_mass": self.mesh.inv_mass.copy(),
        }

    def _rebuild_constraint_order(self):
        alive_ids = np.nonzero(self.mesh.alive)[0]
        if len(alive_ids) == 0:
            self._order = np.zeros(0, dtype=np.int64)
            self._bounds = np.zeros(1, dtype=np.int64)
            return
        cols = self._colors[alive_ids]
        sort = np.argsort(cols, kind="stable")
        self._order = np.ascontiguousarray(alive_ids[sort])
        ncol = int(cols.max()) + 1
        self._bounds = np.searchsorted(cols[sort], np.arange(ncol + 1)).astype(np.int64)

    def _rebuild_collision_structures(self):
        kind, nv, vids = collision.surface_elements(self.mesh)
        if len(kind) == 0:
            self.bvh = None
            return
        self.bvh = collision.build_bvh(
            kind, nv, vids, self.state.x, margin=self.config.contact_margin
        )

    def _on_topology_change(self):
        self.mesh.refresh_surface()
        vertex_masses_from_density(self.mesh, self.materials.density)
        self._rebuild_constraint_order()
        self._rebuild_collision_structures()
        self.topology_version += 1

    # -- attachments -------------------------------------------------------

    def add_attachment(self, vertex: int, target, compliance: float = 0.0) -> int:
        """Distance-to-moving-target constraint; returns a removal handle."""
        if not 0 <= vertex < self.mesh.num_vertices:
            raise IndexError(f"unknown vertex {vertex}")
        handle = len(self._att_vert)
        self._att_vert = np.append(self._att_vert, np.int64(vertex))
        self._att_target = np.vstack([self._att_target, np.asarray(target, dtype=np.float64)])
        self._att_compliance = np.append(self._att_compliance, float(compliance))
        self._att_lam = np.append(self._att_lam, 0.0)
        self._att_active = np.append(self._att_active, True)
        self._att_dir = np.vstack([self._att_dir, np.zeros(3)])
        return handle

    def remove_attachment(self, handle: int) -> None:
        self._att_active[handle] = False

    def move_attachment(self, handle: int, target) -> None:
        self._att_target[handle] = np.asarray(target, dtype=np.float64)

    def attachment_force(self, handle: int, dt_s: float | None = None) -> np.ndarray:
        """Force exerted on the vertex by an attachment at the last substep,
        using the projection direction recorded by the solve."""
        dt = dt_s if dt_s is not None else self.config.substep_dt
        return extract_constraint_force(self._att_lam[handle], self._att_dir[handle], dt)

    # -- stepping ----------------------------------------------------------

    def substep(self, dt_s: float, tool_shapes: list[tuple[Tool, object]] | None = None) -> None:
        """One XPBD substep: predict, constraint pass(es), velocity update."""
        st = self.state
        np.copyto(st.x_prev, st.x)
        _kernels.predict_positions(
            st.x, st.v, self.mesh.inv_mass, st.ext_force, self._gravity, dt_s
        )
        st.lam_dev[:] = 0.0
        st.lam_hyd[:] = 0.0
        self._att_lam[:] = 0.0
        inv_dt2 = 1.0 / (dt_s * dt_s)
        dev_tilde = self._alpha_dev * inv_dt2
        hyd_tilde = self._alpha_hyd * inv_dt2
        elastic = (
            _kernels.elastic_pass_parallel
            if self.config.parallel_batches
            else _kernels.elastic_pass_serial
        )

        # collision re-detection: once per substep against current tool poses
        tool_shapes = tool_shapes or []
        self._degenerate = 0
        self._nonconverged = 0
        contact_batches = []
        self.last_contacts = {}
        for tool, _compiled in tool_shapes:
            self._last_tool_contact_force[tool.tool_id] = np.zeros(3)
        for tool, compiled in tool_shapes:
            contacts = []
            if self.bvh is not None:
                self.bvh.refit(st.x)
                contacts = collision.generate_contacts(
                    self.bvh, st.x, compiled, self.config.contact_margin
                )
                if tool.held_attachments:
                    # clamped vertices ride the jaws; the clamping tool must
                    # not push them back out
                    grabbed = {int(self._att_vert[h]) for h, _ in tool.held_attachments
                               if self._att_active[h]}
                    contacts = [c for c in contacts
                                if not any(int(v) in grabbed for v in c.vertex_ids)]
                contacts.sort(key=lambda c: (c.elem_kind, c.elem_index))
            self.last_contacts[tool.tool_id] = contacts
            self._nonconverged += sum(1 for c in contacts if not c.converged)
            arrays = collision.contacts_to_arrays(contacts) if contacts else None
            contact_batches.append((tool, compiled, contacts, arrays))
            for handle, local in tool.held_attachments:
                self.move_attachment(handle, tool.attachment_target(local))

        att_tilde = np.where(
            self._att_compliance > 0.0, self._att_compliance * inv_dt2, 0.0
        )
        contact_tilde = self.config.contact_compliance * inv_dt2

        for _ in range(self.config.iterations):
            self._degenerate += elastic(
                st.x, self.mesh.inv_mass, self.mesh.tets, self.mesh.rest_inv,
                dev_tilde, st.lam_dev, self._order, self._bounds, 0, 0.0,
            )
            self._degenerate += elastic(
                st.x, self.mesh.inv_mass, self.mesh.tets, self.mesh.rest_inv,
                hyd_tilde, st.lam_hyd, self._order, self._bounds, 1,
                self._rest_correction,
            )
            if len(self._att_vert):
                _kernels.solve_attachments(
                    st.x, self.mesh.inv_mass, self._att_vert, self._att_target,
                    att_tilde, self._att_lam, self._att_active, self._att_dir,
                )
            for tool, compiled, contacts, arrays in contact_batches:
                if arrays is None:
                    continue
                nv, vids, bary, lam, acc_n, acc_t = arrays
                force = np.zeros(3)
                _kernels.solve_contacts(
                    st.x, st.x_prev, self.mesh.inv_mass, nv, vids, bary,
                    compiled.ops, compiled.op_smooth, compiled.leaf_kind,
                    compiled.leaf_params, compiled.leaf_rot, compiled.leaf_trans,
                    self.materials.friction_coeff, contact_tilde, lam,
                    acc_n, acc_t, force, inv_dt2,
                )
                self._last_tool_contact_force[tool.tool_id] += force
                for i, con in enumerate(contacts):
                    con.lambda_n = float(lam[i])
                    con.normal_push = float(acc_n[i])
                    con.tangent_corr = float(acc_t[i])

        _kernels.update_velocities(
            st.x, st.x_prev, st.v, self.mesh.inv_mass, dt_s,
            self.config.velocity_damping, self.config.max_speed_clamp,
        )
        bad = _kernels.first_nonfinite(st.x)
        if bad >= 0:
            raise NumericalDivergence(int(bad), -1)

    def step_frame(self, target_poses: dict[str, ToolPose] | None = None) -> FrameTelemetry:
        """Advance one frame: apply frame-boundary tool events, run n substeps
        with linearly interpolated tool poses, collect telemetry."""
        cfg = self.config
        targets: dict[str, ToolPose] = {}
        for tool_id, tool in self.tools.items():
            targets[tool_id] = (target_poses or {}).get(tool_id, tool.pose)

        # tool mutations only between substeps (frame boundary)
        frame_events(self, targets)

        dt_s = cfg.substep_dt
        self._last_tool_contact_force = {tid: np.zeros(3) for tid in self.tools}
        wall: list[float] = []
        contact_count = 0
        degenerate_total = 0
        nonconverged_total = 0
        for s in range(cfg.substeps):
            u = (s + 1) / cfg.substeps
            shapes = []
            for tool_id, tool in self.tools.items():
                pose_s = lerp_pose(tool.pose, targets[tool_id], u)
                shapes.append((tool, tool_compiled_sdf(pose_s, tool.geometry)))
                tool.interp_pose = pose_s
            t0 = time.perf_counter()
            self.substep(dt_s, shapes)
            wall.append(time.perf_counter() - t0)
            contact_count = sum(len(c) for c in self.last_contacts.values())
            degenerate_total += self._degenerate
            nonconverged_total += self._nonconverged
            for tool, _compiled in shapes:
                tool.after_substep(self, dt_s)

        for tool_id, tool in self.tools.items():
            tool.pose = targets[tool_id]

        self.frame_index += 1
        self.sim_time += cfg.frame_dt

        alive = self.mesh.alive
        forces = {}
        for tool_id, tool in self.tools.items():
            f = self._last_tool_contact_force.get(tool_id, np.zeros(3)).copy()
            for handle, _local in tool.held_attachments:
                f -= self.attachment_force(handle, dt_s)
            forces[tool_id] = float(np.linalg.norm(f))

        dev, hyd = constitutive.elastic_residuals(
            self.state.x, self.mesh.tets[alive], self.mesh.rest_inv[alive],
            self._rest_correction,
        )
        n_c = max(1, 2 * int(alive.sum()))
        residual = float(np.sqrt((np.sum(dev * dev) + np.sum(hyd * hyd)) / n_c))
        vol = self.mesh.total_volume(self.state.x)
        w = self.mesh.inv_mass
        movable = w > 0
        ke = 0.5 * float(
            ((self.state.v[movable] ** 2).sum(axis=1) / w[movable]).sum()
        )
        return FrameTelemetry(
            frame_index=self.frame_index,
            sim_time=self.sim_time,
            mean_substep_ms=1e3 * float(np.mean(wall)) if wall else 0.0,
            elastic_residual=residual,
            total_volume=vol,
            volume_ratio=vol / self._rest_total_volume if self._rest_total_volume else 1.0,
            kinetic_energy=ke,
            contact_count=contact_count,
            removed_mass=self.removed_mass,
            degenerate_constraints=degenerate_total,
            nonconverged_narrowphase=nonconverged_total,
            tool_forces=forces,
        )

    # -- bookkeeping ---------------------------------------------------------

    def mark_tets_dead(self, tet_ids: np.ndarray) -> float:
        """Resect tets; returns the mass removed. Triggers topology rebuild."""
        tet_ids = np.asarray(tet_ids, dtype=np.int64)
        tet_ids = tet_ids[self.mesh.alive[tet_ids]]
        if len(tet_ids) == 0:
            return 0.0
        removed = float(self.materials.density * self.mesh.rest_volume[tet_ids].sum())
        self.mesh.alive[tet_ids] = False
        self.removed_mass += removed
        self._on_topology_change()
        return removed

    def position_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.state.x.tobytes())
        h.update(self.mesh.alive.tobytes())
        return h.hexdigest()

    def reset(self) -> None:
        init = self._initial
        self.state.x[:] = init["x"]
        self.state.x_prev[:] = init["x"]
        self.state.v[:] = init["v"]
        self.state.ext_force[:] = 0.0
        self.state.lam_dev[:] = 0.0
        self.state.lam_hyd[:] = 0.0
        self.mesh.alive[:] = init["alive"]
        self.mesh.inv_mass[:] = init["inv_mass"]
        self.mesh.refresh_surface()
        self._rebuild_constraint_order()
        self._rebuild_collision_structures()
        self._att_vert = np.zeros(0, dtype=np.int64)
        self._att_target = np.zeros((0, 3))
        self._att_compliance = np.zeros(0)
        self._att_lam = np.zeros(0)
        self._att_active = np.zeros(0, dtype=np.bool_)
        self._att_dir = np.zeros((0, 3))
        self.frame_index = 0
        self.sim_time = 0.0
        self.removed_mass = 0.0
        self.topology_version = 0
        self.coagulation = self.tools_config.new_coagulation_state()
        self.last_contacts = {}
        for tool in self.tools.values():
            tool.reset()
