"""Scenario configuration, trajectory playback, metrics, goldens, benchmarks."""

from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from .mesh import MaterialParams, TetMesh, load_mesh, vertex_masses_from_density
from .phantom import make_slab, pin_halfspace, slab_grid_for_elements
from .solver import Engine, NumericalDivergence, SolverConfig
from .tools import Tool, ToolGeometry, ToolPose, ToolsConfig, quat_slerp

METRIC_COLUMNS = (
    "time",
    "volume_ratio",
    "elastic_residual",
    "kinetic_energy",
    "contact_count",
    "removed_mass",
    "mean_substep_ms",
)

# wall-time columns are machine-dependent and never compared
DEFAULT_TOLERANCES = {
    "time": 1e-9,
    "volume_ratio": 1e-6,
    "elastic_residual": 1e-6,
    "kinetic_energy": 1e-6,
    "contact_count": 0.0,
    "removed_mass": 1e-9,
    "mean_substep_ms": math.inf,
}


class ScenarioError(ValueError):
    pass


@dataclass
class ToolSpec:
    tool_id: str
    kind: str
    position: tuple = (0.0, 0.0, 0.1)
    quaternion: tuple = (0.0, 0.0, 0.0, 1.0)
    jaw: float = 1.0
    active: bool = False
    geometry: ToolGeometry = field(default_factory=ToolGeometry)

    def initial_pose(self) -> ToolPose:
        return ToolPose(
            kind=self.kind, position=self.position, quaternion=self.quaternion,
            jaw=self.jaw, active=self.active,
        )


@dataclass
class PhantomSpec:
    nx: int = 8
    ny: int = 8
    nz: int = 2
    size: tuple = (0.08, 0.08, 0.02)


@dataclass
class Scenario:
    name: str = "scenario"
    mesh_path: str | None = None
    phantom: PhantomSpec | None = None
    material: MaterialParams = field(default_factory=MaterialParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    interaction: ToolsConfig = field(default_factory=ToolsConfig)
    pins: list = field(default_factory=list)   # {"halfspace": {...}} or {"indices": [...]}
    tools: list[ToolSpec] = field(default_factory=list)
    trajectory_path: str | None = None
    duration: float = 1.0
    metrics_path: str | None = None
    golden_path: str | None = None

    def __post_init__(self):
        if self.duration <= 0.0:
            raise ScenarioError("duration must be positive")
        if self.mesh_path is None and self.phantom is None:
            self.phantom = PhantomSpec()

    def build_mesh(self) -> TetMesh:
        if self.mesh_path is not None:
            mesh = load_mesh(self.mesh_path)
        else:
            p = self.phantom
            mesh = make_slab(p.nx, p.ny, p.nz, size=tuple(p.size))
        for pin in self.pins:
            if "halfspace" in pin:
                hs = pin["halfspace"]
                pin_halfspace(mesh, hs["normal"], float(hs["offset"]))
            elif "indices" in pin:
                mesh.pinned[np.asarray(pin["indices"], dtype=np.int64)] = True
            else:
                raise ScenarioError(f"unknown pin spec {pin!r}")
        vertex_masses_from_density(mesh, self.material.density)
        return mesh

    def build_engine(self) -> Engine:
        tools = [
            Tool(tool_id=t.tool_id, kind=t.kind, pose=t.initial_pose(), geometry=t.geometry)
            for t in self.tools
        ]
        return Engine(self.build_mesh(), self.material, self.solver,
                      tools=tools, tools_config=self.interaction)


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ScenarioError(f"missing {key!r} in {where}")
    return mapping[key]


def _coerce_numbers(value):
    """YAML 1.1 reads scientific notation without a signed exponent (1.0e4)
    as a string; convert any such strings back to floats, recursively."""
    if isinstance(value, dict):
        return {k: _coerce_numbers(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_coerce_numbers(v) for v in value]
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def load_scenario(path: str) -> Scenario:
    """Parse a scenario file (YAML; nested key-value sections) and resolve
    referenced paths relative to the file."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ScenarioError(f"{path}: scenario file must be a mapping")
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if p is None or os.path.isabs(p) else os.path.join(base, p)

    mesh_cfg = raw.get("mesh", {})
    mesh_path = resolve(mesh_cfg.get("path"))
    phantom = None
    if "phantom" in mesh_cfg:
        ph = mesh_cfg["phantom"]
        phantom = PhantomSpec(
            nx=int(ph.get("nx", 8)), ny=int(ph.get("ny", 8)), nz=int(ph.get("nz", 2)),
            size=tuple(ph.get("size", (0.08, 0.08, 0.02))),
        )
    if mesh_path is not None and not os.path.exists(mesh_path):
        raise ScenarioError(f"mesh file not found: {mesh_path}")

    mat = MaterialParams(**_coerce_numbers(raw.get("material", {})))

    sol = _coerce_numbers(dict(raw.get("solver", {})))
    if "frame_rate" in sol:
        sol["frame_dt"] = 1.0 / float(sol.pop("frame_rate"))
    if "gravity" in sol:
        sol["gravity"] = tuple(sol["gravity"])
    solver = SolverConfig(**sol)

    interaction = ToolsConfig(**_coerce_numbers(raw.get("interaction", {})))

    tools = []
    for t in raw.get("tools", []):
        geom = ToolGeometry(**_coerce_numbers(t.get("geometry", {})))
        tools.append(ToolSpec(
            tool_id=str(_require(t, "id", "tool entry")),
            kind=_require(t, "kind", "tool entry"),
            position=tuple(t.get("position", (0.0, 0.0, 0.1))),
            quaternion=tuple(t.get("quaternion", (0.0, 0.0, 0.0, 1.0))),
            jaw=float(t.get("jaw", 1.0)),
            active=bool(t.get("active", False)),
            geometry=geom,
        ))

    trajectory_path = resolve(raw.get("trajectory"))
    if trajectory_path is not None and not os.path.exists(trajectory_path):
        raise ScenarioError(f"trajectory file not found: {trajectory_path}")

    return Scenario(
        name=raw.get("name", os.path.splitext(os.path.basename(path))[0]),
        mesh_path=mesh_path,
        phantom=phantom,
        material=mat,
        solver=solver,
        interaction=interaction,
        pins=raw.get("pin", []),
        tools=tools,
        trajectory_path=trajectory_path,
        duration=float(raw.get("duration", 1.0)),
        metrics_path=resolve(raw.get("metrics")),
        golden_path=resolve(raw.get("golden")),
    )


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Per-tool timestamped pose keyframes; linear position/jaw, shortest-arc
    quaternion interpolation, piecewise-constant activation."""

    records: dict[str, list[tuple[float, ToolPose]]] = field(default_factory=dict)

    def add(self, tool_id: str, t: float, pose: ToolPose) -> None:
        recs = self.records.setdefault(tool_id, [])
        if recs and t <= recs[-1][0]:
            raise ScenarioError(
                f"trajectory timestamps must be strictly increasing for {tool_id!r}"
            )
        recs.append((t, pose))

    def tool_ids(self):
        return list(self.records.keys())

    def pose_at(self, tool_id: str, t: float) -> ToolPose | None:
        recs = self.records.get(tool_id)
        if not recs:
            return None
        if t <= recs[0][0]:
            return recs[0][1]
        if t >= recs[-1][0]:
            return recs[-1][1]
        for i in range(len(recs) - 1):
            t0, p0 = recs[i]
            t1, p1 = recs[i + 1]
            if t0 <= t <= t1:
                if t == t0:
                    return p0
                if t == t1:
                    return p1
                u = (t - t0) / (t1 - t0)
                return ToolPose(
                    kind=p1.kind,
                    position=(1 - u) * p0.position + u * p1.position,
                    quaternion=quat_slerp(p0.quaternion, p1.quaternion, u),
                    jaw=(1 - u) * p0.jaw + u * p1.jaw,
                    active=p0.active,
                )
        return recs[-1][1]

    def poses_at(self, t: float) -> dict[str, ToolPose]:
        out = {}
        for tool_id in self.records:
            pose = self.pose_at(tool_id, t)
            if pose is not None:
                out[tool_id] = pose
        return out


TRAJECTORY_FIELDS = ("time", "tool", "kind", "px", "py", "pz",
                     "qx", "qy", "qz", "qw", "jaw", "active")


def load_trajectory(path_or_stream) -> Trajectory:
    if hasattr(path_or_stream, "read"):
        fh = path_or_stream
        close = False
    else:
        fh = open(path_or_stream, "r", newline="", encoding="utf-8")
        close = True
    try:
        reader = csv.DictReader(fh)
        missing = set(TRAJECTORY_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ScenarioError(f"trajectory missing columns: {sorted(missing)}")
        traj = Trajectory()
        for row in reader:
            pose = ToolPose(
                kind=row["kind"],
                position=(float(row["px"]), float(row["py"]), float(row["pz"])),
                quaternion=(float(row["qx"]), float(row["qy"]),
                            float(row["qz"]), float(row["qw"])),
                jaw=float(row["jaw"]),
                active=row["active"].strip().lower() in ("1", "true", "yes"),
            )
            traj.add(row["tool"], float(row["time"]), pose)
        return traj
    finally:
        if close:
            fh.close()


def dump_trajectory(traj: Trajectory, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_FIELDS)
        for tool_id, recs in traj.records.items():
            for t, p in recs:
                writer.writerow([
                    repr(t), tool_id, p.kind,
                    *[repr(float(c)) for c in p.position],
                    *[repr(float(c)) for c in p.quaternion],
                    repr(float(p.jaw)), int(p.active),
                ])


# ---------------------------------------------------------------------------
# runs, metrics, goldens


@dataclass
class MetricsReport:
    columns: tuple = METRIC_COLUMNS
    rows: np.ndarray = field(default_factory=lambda: np.zeros((0, len(METRIC_COLUMNS))))
    position_hash: str = ""
    deterministic: bool = True
    failure: str | None = None

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.columns.index(name)]


def run_scenario(scenario: Scenario, engine: Engine | None = None,
                 frame_callback=None) -> MetricsReport:
    """Step the scenario for its duration, interpolating trajectory poses at
    frame boundaries; a solver abort yields partial metrics plus a failure
    record instead of raising."""
    engine = engine or scenario.build_engine()
    traj = load_trajectory(scenario.trajectory_path) if scenario.trajectory_path else None
    n_frames = max(1, round(scenario.duration / scenario.solver.frame_dt))
    rows = []
    failure = None
    for f in range(n_frames):
        t_end = (f + 1) * scenario.solver.frame_dt
        targets = traj.poses_at(t_end) if traj else None
        try:
            tele = engine.step_frame(targets)
        except NumericalDivergence as exc:
            failure = str(exc)
            break
        rows.append([
            tele.sim_time, tele.volume_ratio, tele.elastic_residual,
            tele.kinetic_energy, float(tele.contact_count), tele.removed_mass,
            tele.mean_substep_ms,
        ])
        if frame_callback is not None:
            frame_callback(engine, tele)
    report = MetricsReport(
        rows=np.asarray(rows, dtype=np.float64).reshape(-1, len(METRIC_COLUMNS)),
        position_hash=engine.position_hash(),
        deterministic=scenario.solver.deterministic,
        failure=failure,
    )
    if scenario.metrics_path:
        write_metrics(report, scenario.metrics_path)
    return report


def write_metrics(report: MetricsReport, path_or_stream) -> None:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(report.columns)
    for row in report.rows:
        writer.writerow([repr(float(v)) for v in row])
    out.write(f"# position_hash={report.position_hash}\n")
    out.write(f"# deterministic={str(report.deterministic).lower()}\n")
    if report.failure:
        out.write(f"# failure={report.failure}\n")
    text = out.getvalue()
    if hasattr(path_or_stream, "write"):
        path_or_stream.write(text)
    else:
        os.makedirs(os.path.dirname(os.path.abspath(path_or_stream)), exist_ok=True)
        with open(path_or_stream, "w", encoding="utf-8") as fh:
            fh.write(text)


def read_metrics(path_or_stream) -> MetricsReport:
    if hasattr(path_or_stream, "read"):
        text = path_or_stream.read()
    else:
        with open(path_or_stream, "r", encoding="utf-8") as fh:
            text = fh.read()
    lines = text.splitlines()
    meta = {}
    data_lines = []
    for ln in lines:
        if ln.startswith("#"):
            key, _, value = ln[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
        elif ln.strip():
            data_lines.append(ln)
    reader = csv.reader(data_lines)
    header = tuple(next(reader))
    rows = np.array([[float(v) for v in row] for row in reader], dtype=np.float64)
    return MetricsReport(
        columns=header,
        rows=rows.reshape(-1, len(header)),
        position_hash=meta.get("position_hash", ""),
        deterministic=meta.get("deterministic", "false") == "true",
        failure=meta.get("failure") or None,
    )


@dataclass
class GoldenDiff:
    passed: bool
    column: str | None = None
    detail: str = ""


def compare_golden(report: MetricsReport | str, golden_path: str,
                   tolerances: dict | None = None) -> GoldenDiff:
    """Per-column tolerance comparison against a stored golden; deterministic
    reports additionally require an exact position-hash match."""
    if isinstance(report, str):
        report = read_metrics(report)
    golden = read_metrics(golden_path)
    if tuple(report.columns) != tuple(golden.columns):
        raise ScenarioError(
            f"metrics schema mismatch: {report.columns} vs golden {golden.columns}"
        )
    if report.rows.shape != golden.rows.shape:
        return GoldenDiff(False, None,
                          f"row count {report.rows.shape[0]} != golden {golden.rows.shape[0]}")
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(tolerances or {})
    for j, name in enumerate(report.columns):
        limit = tol.get(name, 0.0)
        if math.isinf(limit):
            continue
        if report.rows.shape[0] == 0:
            continue
        worst = float(np.max(np.abs(report.rows[:, j] - golden.rows[:, j])))
        if worst > limit:
            return GoldenDiff(False, name, f"column {name!r}: max |diff| {worst:.3e} > {limit:.3e}")
    if report.deterministic and golden.deterministic:
        if report.position_hash != golden.position_hash:
            return GoldenDiff(False, "position_hash",
                              f"hash {report.position_hash[:12]} != golden "
                              f"{golden.position_hash[:12]}")
    return GoldenDiff(True)


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchRow:
    elements: int
    substeps_per_second: float
    mean_substep_ms: float


def _bench_engine(n_elements: int, base: Scenario) -> Engine:
    nx, ny, nz = slab_grid_for_elements(n_elements)
    size = (0.08, 0.08, 0.02)
    mesh = make_slab(nx, ny, nz, size=size)
    pin_halfspace(mesh, (0, 0, 1), 1e-9)  # pin the bottom face
    vertex_masses_from_density(mesh, base.material.density)
    # one tool pressed lightly into the top center: one active contact region
    tool = Tool(
        tool_id="probe", kind="grasper",
        pose=ToolPose(
            kind="grasper",
            position=(size[0] / 2, size[1] / 2, size[2] + 0.009),
            quaternion=(1.0, 0.0, 0.0, 0.0),  # jaws point -z, into the slab
            jaw=0.0,
        ),
    )
    return Engine(mesh, base.material, base.solver, tools=[tool],
                  tools_config=base.interaction)


def benchmark(scenario: Scenario, sizes, warmup_frames: int = 10,
              timed_frames: int = 60) -> list[BenchRow]:
    """Achieved substep rate per element count on this host, with one tool in
    contact throughout."""
    out = []
    for n in sizes:
        engine = _bench_engine(int(n), scenario)
        for _ in range(warmup_frames):
            engine.step_frame()
        t0 = time.perf_counter()
        for _ in range(timed_frames):
            engine.step_frame()
        elapsed = time.perf_counter() - t0
        n_sub = timed_frames * scenario.solver.substeps
        out.append(BenchRow(
            elements=int(engine.mesh.alive.sum()),
            substeps_per_second=n_sub / elapsed,
            mean_substep_ms=1e3 * elapsed / n_sub,
        ))
    return out
