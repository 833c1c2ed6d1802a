/**
 * Wire protocol (version "1") against the simulation session server.
 *
 * Control plane: JSON text frames. Data plane: little-endian binary snapshot
 * frames with the layout below (offsets in bytes):
 *
 *   0   magic "SNP1"
 *   4   u32 frame index
 *   8   f64 simulation time (s)
 *   16  u32 topology version
 *   20  u8 flags (bit 0: triangle index list included), 3 pad
 *   24  u32 vertex count V
 *   28  u32 triangle count T
 *   32  u32 tool count K
 *   36  f32 volume ratio
 *   40  u32 contact count
 *   44  V*3 f32 vertex positions (m)
 *       [flag] T*3 u32 triangle indices
 *       T u8 per-triangle flags (bit 0: coagulated)
 *       K tool records: 3 f32 position, 4 f32 quaternion (x,y,z,w),
 *         f32 jaw, u8 active, 3 pad, f32 force (N)
 */

export const PROTOCOL_VERSION = "1";

const MAGIC = 0x31504e53; // "SNP1" little-endian
const HEADER_BYTES = 44;
const TOOL_RECORD_BYTES = 40;
const FLAG_TOPOLOGY = 1;

export interface ToolSnapshot {
  position: [number, number, number];
  quaternion: [number, number, number, number];
  jaw: number;
  active: boolean;
  force: number;
}

export interface Snapshot {
  frameIndex: number;
  simTime: number;
  topologyVersion: number;
  positions: Float32Array;
  /** null when the frame reuses the previously sent topology */
  triangles: Uint32Array | null;
  coagFlags: Uint8Array;
  tools: ToolSnapshot[];
  volumeRatio: number;
  contactCount: number;
}

export interface ToolInfo {
  id: string;
  kind: string;
}

export interface HelloMessage {
  type: "hello";
  version: string;
  scenario: string;
  frameDt: number;
  snapshotHz: number;
  tools: ToolInfo[];
}

export interface ErrorMessage {
  type: "error";
  detail: string;
}

export class ProtocolError extends Error {}

/** Parse a binary snapshot frame; throws ProtocolError on truncation. */
export function decodeSnapshot(buf: ArrayBuffer): Snapshot {
  if (buf.byteLength < HEADER_BYTES) {
    throw new ProtocolError(`snapshot truncated: ${buf.byteLength} < ${HEADER_BYTES}`);
  }
  const view = new DataView(buf);
  if (view.getUint32(0, true) !== MAGIC) {
    throw new ProtocolError("bad snapshot magic");
  }
  const frameIndex = view.getUint32(4, true);
  const simTime = view.getFloat64(8, true);
  const topologyVersion = view.getUint32(16, true);
  const flags = view.getUint8(20);
  const nVerts = view.getUint32(24, true);
  const nTris = view.getUint32(28, true);
  const nTools = view.getUint32(32, true);
  const volumeRatio = view.getFloat32(36, true);
  const contactCount = view.getUint32(40, true);

  const hasTopology = (flags & FLAG_TOPOLOGY) !== 0;
  let expected = HEADER_BYTES + nVerts * 12 + nTris + nTools * TOOL_RECORD_BYTES;
  if (hasTopology) expected += nTris * 12;
  if (buf.byteLength !== expected) {
    throw new ProtocolError(
      `snapshot truncated: ${buf.byteLength} bytes, expected ${expected}`,
    );
  }

  let offset = HEADER_BYTES;
  const positions = new Float32Array(buf.slice(offset, offset + nVerts * 12));
  offset += nVerts * 12;
  let triangles: Uint32Array | null = null;
  if (hasTopology) {
    triangles = new Uint32Array(buf.slice(offset, offset + nTris * 12));
    offset += nTris * 12;
  }
  const coagFlags = new Uint8Array(buf.slice(offset, offset + nTris));
  offset += nTris;
  const tools: ToolSnapshot[] = [];
  for (let k = 0; k < nTools; k += 1) {
    tools.push({
      position: [
        view.getFloat32(offset, true),
        view.getFloat32(offset + 4, true),
        view.getFloat32(offset + 8, true),
      ],
      quaternion: [
        view.getFloat32(offset + 12, true),
        view.getFloat32(offset + 16, true),
        view.getFloat32(offset + 20, true),
        view.getFloat32(offset + 24, true),
      ],
      jaw: view.getFloat32(offset + 28, true),
      active: view.getUint8(offset + 32) !== 0,
      force: view.getFloat32(offset + 36, true),
    });
    offset += TOOL_RECORD_BYTES;
  }
  return {
    frameIndex, simTime, topologyVersion, positions, triangles, coagFlags,
    tools, volumeRatio, contactCount,
  };
}

export interface PoseFields {
  position: [number, number, number];
  quaternion: [number, number, number, number];
  jaw: number;
  active: boolean;
}

/** Encode a pose control message for one tool. */
export function encodePose(tool: string, pose: PoseFields, timestampMs: number): string {
  return JSON.stringify({
    type: "pose",
    tool,
    position: pose.position,
    quaternion: pose.quaternion,
    jaw: pose.jaw,
    active: pose.active,
    t: timestampMs,
  });
}

export function encodeEvent(tool: string, name: string): string {
  return JSON.stringify({ type: "event", tool, name });
}

export function encodeSelectTool(tool: string): string {
  return JSON.stringify({ type: "select_tool", tool });
}

export function encodeReset(): string {
  return JSON.stringify({ type: "reset" });
}

/** Parse a server text frame (hello or error). */
export function parseServerText(text: string): HelloMessage | ErrorMessage {
  let raw: unknown;
  try {
    raw = JSON.parse(text);
  } catch (err) {
    throw new ProtocolError(`server sent invalid JSON: ${err}`);
  }
  const msg = raw as { type?: string };
  if (msg.type === "hello") {
    const hello = raw as HelloMessage;
    if (hello.version !== PROTOCOL_VERSION) {
      throw new ProtocolError(`protocol version mismatch: ${hello.version}`);
    }
    return hello;
  }
  if (msg.type === "error") {
    return raw as ErrorMessage;
  }
  throw new ProtocolError(`unexpected server message type: ${msg.type}`);
}
