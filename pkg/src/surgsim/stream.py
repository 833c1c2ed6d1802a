"""Session protocol between the simulation loop and an interactive viewer.

Control plane: UTF-8 JSON text frames (poses, events, tool selection, reset).
Data plane: binary snapshot frames, little-endian, layout below. Exactly one
interactive client at a time; the simulation pauses while disconnected.

Snapshot frame layout (all little-endian):

    offset  size  field
    0       4     magic "SNP1"
    4       4     u32 frame index
    8       8     f64 simulation time (s)
    16      4     u32 topology version
    20      1     u8 flags (bit 0: triangle index list included)
    21      3     padding
    24      4     u32 vertex count V
    28      4     u32 triangle count T
    32      4     u32 tool count K
    36      4     f32 volume ratio
    40      4     u32 contact count
    44      ...   V*3 f32 vertex positions (m)
            ...   if flag bit 0: T*3 u32 triangle indices (into the V vertices)
            ...   T u8 per-triangle flags (bit 0: coagulated)
            ...   K tool records: 3 f32 position, 4 f32 quaternion (x,y,z,w),
                  f32 jaw, u8 active, 3 pad, f32 force magnitude (N)
"""

from __future__ import annotations

import asyncio
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .solver import Engine
from .tools import ToolPose

log = logging.getLogger(__name__)

PROTOCOL_VERSION = "1"

_MAGIC = b"SNP1"
_HEADER = struct.Struct("<4sIdIB3xIIIfI")
_TOOL_RECORD = struct.Struct("<3f4ffB3xf")
FLAG_TOPOLOGY = 1

MESSAGE_TYPES = ("pose", "event", "select_tool", "reset")


class ProtocolError(ValueError):
    pass


@dataclass
class SessionMessage:
    type: str
    tool: str | None = None
    position: np.ndarray | None = None
    quaternion: np.ndarray | None = None
    jaw: float | None = None
    active: bool | None = None
    event: str | None = None
    timestamp_ms: float | None = None


@dataclass
class ToolSnap:
    position: np.ndarray
    quaternion: np.ndarray
    jaw: float
    active: bool
    force: float


@dataclass
class Snapshot:
    frame_index: int
    sim_time: float
    topology_version: int
    positions: np.ndarray              # (V, 3) float32
    triangles: np.ndarray | None       # (T, 3) uint32, None when omitted
    coag_flags: np.ndarray             # (T,) uint8
    tools: list[ToolSnap]
    volume_ratio: float
    contact_count: int


def decode_message(data) -> SessionMessage:
    """Parse and validate an inbound control message (JSON text)."""
    if isinstance(data, (bytes, bytearray)):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"message is not valid UTF-8: {exc}") from exc
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"message is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ProtocolError("message must be a JSON object")
    mtype = raw.get("type")
    if mtype not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {mtype!r}")
    msg = SessionMessage(type=mtype, tool=raw.get("tool"),
                         timestamp_ms=raw.get("t"))
    if mtype == "pose":
        try:
            pos = np.asarray(raw["position"], dtype=np.float64).reshape(3)
            quat = np.asarray(raw["quaternion"], dtype=np.float64).reshape(4)
        except (KeyError, ValueError, TypeError) as exc:
            raise ProtocolError(f"malformed pose fields: {exc}") from exc
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(quat))):
            raise ProtocolError("pose fields must be finite")
        norm = float(np.linalg.norm(quat))
        if norm < 1e-9:
            raise ProtocolError("zero quaternion")
        msg.position = pos
        msg.quaternion = quat / norm  # normalized server-side on receipt
        jaw = float(raw.get("jaw", 1.0))
        if not math.isfinite(jaw):
            raise ProtocolError("jaw must be finite")
        msg.jaw = min(1.0, max(0.0, jaw))
        msg.active = bool(raw.get("active", False))
    elif mtype == "event":
        name = raw.get("name")
        if not isinstance(name, str):
            raise ProtocolError("event message requires a string 'name'")
        msg.event = name
    elif mtype == "select_tool":
        if not isinstance(raw.get("tool"), str):
            raise ProtocolError("select_tool requires a string 'tool'")
    return msg


def encode_snapshot(snap: Snapshot, include_topology: bool | None = None) -> bytes:
    """Serialize a snapshot; topology is included when requested (or when the
    snapshot carries triangles and the flag is left unset)."""
    if include_topology is None:
        include_topology = snap.triangles is not None
    if include_topology and snap.triangles is None:
        raise ProtocolError("cannot include topology: snapshot has no triangles")
    flags = FLAG_TOPOLOGY if include_topology else 0
    n_tris = len(snap.coag_flags)
    parts = [_HEADER.pack(
        _MAGIC, snap.frame_index, snap.sim_time, snap.topology_version, flags,
        len(snap.positions), n_tris, len(snap.tools),
        snap.volume_ratio, snap.contact_count,
    )]
    parts.append(np.ascontiguousarray(snap.positions, dtype="<f4").tobytes())
    if include_topology:
        parts.append(np.ascontiguousarray(snap.triangles, dtype="<u4").tobytes())
    parts.append(np.ascontiguousarray(snap.coag_flags, dtype=np.uint8).tobytes())
    for tool in snap.tools:
        parts.append(_TOOL_RECORD.pack(
            *[float(c) for c in tool.position],
            *[float(c) for c in tool.quaternion],
            float(tool.jaw), int(bool(tool.active)), float(tool.force),
        ))
    return b"".join(parts)


def decode_snapshot(buf: bytes) -> Snapshot:
    """Inverse of encode_snapshot; raises ProtocolError on truncation."""
    if len(buf) < _HEADER.size:
        raise ProtocolError(f"snapshot truncated: {len(buf)} < header {_HEADER.size}")
    (magic, frame_index, sim_time, topo_version, flags,
     n_verts, n_tris, n_tools, volume_ratio, contact_count) = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    offset = _HEADER.size
    expected = n_verts * 12
    if flags & FLAG_TOPOLOGY:
        expected += n_tris * 12
    expected += n_tris
    expected += n_tools * _TOOL_RECORD.size
    if len(buf) != offset + expected:
        raise ProtocolError(
            f"snapshot truncated: {len(buf)} bytes, expected {offset + expected}"
        )
    positions = np.frombuffer(buf, dtype="<f4", count=n_verts * 3, offset=offset)
    positions = positions.reshape(n_verts, 3).copy()
    offset += n_verts * 12
    triangles = None
    if flags & FLAG_TOPOLOGY:
        triangles = np.frombuffer(buf, dtype="<u4", count=n_tris * 3, offset=offset)
        triangles = triangles.reshape(n_tris, 3).copy()
        offset += n_tris * 12
    coag = np.frombuffer(buf, dtype=np.uint8, count=n_tris, offset=offset).copy()
    offset += n_tris
    tools = []
    for _ in range(n_tools):
        rec = _TOOL_RECORD.unpack_from(buf, offset)
        tools.append(ToolSnap(
            position=np.array(rec[0:3]), quaternion=np.array(rec[3:7]),
            jaw=rec[7], active=bool(rec[8]), force=rec[9],
        ))
        offset += _TOOL_RECORD.size
    return Snapshot(
        frame_index=frame_index, sim_time=sim_time, topology_version=topo_version,
        positions=positions, triangles=triangles, coag_flags=coag, tools=tools,
        volume_ratio=volume_ratio, contact_count=contact_count,
    )


class SnapshotBuilder:
    """Builds snapshots from an engine; caches the surface-vertex compaction
    per topology version (the index list references only included vertices)."""

    def __init__(self, engine: Engine):
        self.engine = engine
        self._topo_version = -1
        self._verts = np.zeros(0, dtype=np.int64)
        self._tris = np.zeros((0, 3), dtype=np.uint32)

    def _refresh_topology(self):
        surface = self.engine.mesh.surface
        if surface is None or len(surface) == 0:
            self._verts = np.zeros(0, dtype=np.int64)
            self._tris = np.zeros((0, 3), dtype=np.uint32)
        else:
            self._verts = np.unique(surface)
            remap = np.zeros(self.engine.mesh.num_vertices, dtype=np.uint32)
            remap[self._verts] = np.arange(len(self._verts), dtype=np.uint32)
            self._tris = remap[surface].astype(np.uint32)
        self._topo_version = self.engine.topology_version

    def build(self, tool_forces: dict[str, float] | None = None) -> Snapshot:
        engine = self.engine
        if self._topo_version != engine.topology_version:
            self._refresh_topology()
        surface = engine.mesh.surface
        coag = (
            engine.coagulation.flags_for(surface)
            if surface is not None and len(surface)
            else np.zeros(0, dtype=np.uint8)
        )
        tools = []
        forces = tool_forces or {}
        for tool_id, tool in engine.tools.items():
            pose = tool.pose
            tools.append(ToolSnap(
                position=pose.position.copy(), quaternion=pose.quaternion.copy(),
                jaw=pose.jaw, active=pose.active, force=float(forces.get(tool_id, 0.0)),
            ))
        rest = engine._rest_total_volume
        contact_count = sum(len(c) for c in engine.last_contacts.values())
        return Snapshot(
            frame_index=engine.frame_index,
            sim_time=engine.sim_time,
            topology_version=engine.topology_version,
            positions=engine.state.x[self._verts].astype(np.float32),
            triangles=self._tris.copy(),
            coag_flags=coag,
            tools=tools,
            volume_ratio=float(engine.mesh.total_volume(engine.state.x) / rest) if rest else 1.0,
            contact_count=contact_count,
        )


@dataclass
class _SessionState:
    poses: dict = field(default_factory=dict)      # tool id -> latest SessionMessage
    events: list = field(default_factory=list)     # (tool id, event name)
    selected_tool: str | None = None
    want_reset: bool = False


class SessionServer:
    """Single-client interactive session around one engine."""

    def __init__(self, scenario, snapshot_hz: float = 30.0, realtime: bool = True):
        self.scenario = scenario
        self.engine: Engine = scenario.build_engine()
        self.snapshot_hz = snapshot_hz
        self.realtime = realtime
        self.builder = SnapshotBuilder(self.engine)
        self.state = _SessionState()
        if self.engine.tools:
            self.state.selected_tool = next(iter(self.engine.tools))
        self._busy = False
        self._last_telemetry = None

    def hello(self) -> str:
        return json.dumps({
            "type": "hello",
            "version": PROTOCOL_VERSION,
            "scenario": self.scenario.name,
            "frame_dt": self.scenario.solver.frame_dt,
            "snapshot_hz": self.snapshot_hz,
            "tools": [
                {"id": tid, "kind": tool.kind} for tid, tool in self.engine.tools.items()
            ],
        })

    def _handle_message(self, msg: SessionMessage) -> None:
        state = self.state
        if msg.type == "pose":
            tool_id = msg.tool or state.selected_tool
            if tool_id not in self.engine.tools:
                raise ProtocolError(f"unknown tool {tool_id!r}")
            state.poses[tool_id] = msg  # latest-wins within a frame
        elif msg.type == "event":
            tool_id = msg.tool or state.selected_tool
            if tool_id not in self.engine.tools:
                raise ProtocolError(f"unknown tool {tool_id!r}")
            state.events.append((tool_id, msg.event))
        elif msg.type == "select_tool":
            if msg.tool not in self.engine.tools:
                raise ProtocolError(f"unknown tool {msg.tool!r}")
            state.selected_tool = msg.tool
        elif msg.type == "reset":
            state.want_reset = True

    def _frame_targets(self) -> dict[str, ToolPose]:
        targets = {}
        for tool_id, msg in self.state.poses.items():
            tool = self.engine.tools[tool_id]
            targets[tool_id] = ToolPose(
                kind=tool.kind, position=msg.position, quaternion=msg.quaternion,
                jaw=msg.jaw, active=msg.active,
            )
        self.state.poses = {}
        return targets

    def step_once(self) -> None:
        """Advance one frame, applying queued messages at the boundary."""
        from .tools import apply_scissors_cut

        if self.state.want_reset:
            self.engine.reset()
            self.state = _SessionState(selected_tool=self.state.selected_tool)
            self.builder = SnapshotBuilder(self.engine)
            self._last_telemetry = None
        for tool_id, event in self.state.events:
            tool = self.engine.tools[tool_id]
            if event == "cut" and tool.kind == "scissors":
                apply_scissors_cut(self.engine, tool.pose, tool.geometry)
            else:
                log.warning("ignoring event %r for tool %r (%s)", event, tool_id, tool.kind)
        self.state.events = []
        self._last_telemetry = self.engine.step_frame(self._frame_targets())

    def snapshot_bytes(self, include_topology: bool) -> bytes:
        forces = self._last_telemetry.tool_forces if self._last_telemetry else {}
        return encode_snapshot(self.builder.build(forces), include_topology)

    async def _run_connection(self, ws) -> None:
        frame_dt = self.scenario.solver.frame_dt
        frames_per_snapshot = max(1, round((1.0 / frame_dt) / self.snapshot_hz))
        last_topo_sent = -1

        async def receiver():
            async for data in ws:
                try:
                    self._handle_message(decode_message(data))
                except ProtocolError as exc:
                    await ws.send(json.dumps({"type": "error", "detail": str(exc)}))

        recv_task = asyncio.ensure_future(receiver())
        try:
            await ws.send(self.hello())
            next_deadline = asyncio.get_event_loop().time()
            frame = 0
            while not recv_task.done():
                self.step_once()
                frame += 1
                if frame % frames_per_snapshot == 0:
                    include = self.engine.topology_version != last_topo_sent
                    await ws.send(self.snapshot_bytes(include))
                    last_topo_sent = self.engine.topology_version
                if self.realtime:
                    next_deadline += frame_dt
                    delay = next_deadline - asyncio.get_event_loop().time()
                    if delay > 0:
                        await asyncio.sleep(delay)
                    else:
                        next_deadline = asyncio.get_event_loop().time()
                        await asyncio.sleep(0)
                else:
                    await asyncio.sleep(0)
        finally:
            recv_task.cancel()

    async def handler(self, ws) -> None:
        if self._busy:
            await ws.send(json.dumps({
                "type": "error", "detail": "session busy: single-client server",
            }))
            await ws.close()
            return
        self._busy = True
        try:
            await self._run_connection(ws)
        except Exception as exc:  # client gone: pause and await reconnect
            log.info("client connection ended: %s", exc)
        finally:
            self._busy = False

    async def serve(self, host: str, port: int, ready: asyncio.Event | None = None):
        import websockets.asyncio.server

        async with websockets.asyncio.server.serve(self.handler, host, port) as server:
            if ready is not None:
                ready.set()
            await server.serve_forever()


def serve_session(scenario, port: int, host: str = "127.0.0.1",
                  snapshot_hz: float = 30.0, realtime: bool = True) -> None:
    """Run an interactive session server until interrupted."""
    server = SessionServer(scenario, snapshot_hz=snapshot_hz, realtime=realtime)
    log.info("serving %s on ws://%s:%d", scenario.name, host, port)
    asyncio.run(server.serve(host, port))
