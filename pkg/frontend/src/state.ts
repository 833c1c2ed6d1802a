/**
 * Viewer state: connection, tool selection, latest snapshot, and force
 * history. The viewer never mutates simulation state except through protocol
 * messages; outbound poses are rate-capped and only sent while connected.
 */

import type { Snapshot, ToolInfo } from "./protocol.js";

export type ConnectionStatus = "connecting" | "connected" | "disconnected";

export const STALL_TIMEOUT_MS = 1000;
export const FORCE_HISTORY_LENGTH = 180;

export interface ViewerState {
  connection: ConnectionStatus;
  tools: ToolInfo[];
  currentTool: number;
  snapshot: Snapshot | null;
  lastSnapshotAtMs: number;
  topologyVersion: number;
  /** set when the index list changed and the render geometry must rebuild */
  geometryDirty: boolean;
  triangles: Uint32Array | null;
  forceHistory: number[];
  poseRateHz: number;
  lastPoseSentAtMs: number;
}

export function createState(poseRateHz = 60): ViewerState {
  return {
    connection: "connecting",
    tools: [],
    currentTool: 0,
    snapshot: null,
    lastSnapshotAtMs: 0,
    topologyVersion: -1,
    geometryDirty: false,
    triangles: null,
    forceHistory: [],
    poseRateHz,
    lastPoseSentAtMs: -Infinity,
  };
}

export function onConnected(state: ViewerState, tools: ToolInfo[]): void {
  state.connection = "connected";
  state.tools = tools;
  state.currentTool = 0;
}

export function onDisconnected(state: ViewerState): void {
  state.connection = "disconnected";
}

export function selectTool(state: ViewerState, index: number): ToolInfo | null {
  if (index < 0 || index >= state.tools.length) return null;
  state.currentTool = index;
  return state.tools[index];
}

export function currentTool(state: ViewerState): ToolInfo | null {
  return state.tools[state.currentTool] ?? null;
}

/** Fold a snapshot into the state; tracks topology changes and force history. */
export function onSnapshot(state: ViewerState, snap: Snapshot, nowMs: number): void {
  state.snapshot = snap;
  state.lastSnapshotAtMs = nowMs;
  if (snap.triangles !== null) {
    state.triangles = snap.triangles;
  }
  if (snap.topologyVersion !== state.topologyVersion) {
    state.topologyVersion = snap.topologyVersion;
    state.geometryDirty = true;
  }
  const tool = snap.tools[state.currentTool];
  state.forceHistory.push(tool ? tool.force : 0);
  if (state.forceHistory.length > FORCE_HISTORY_LENGTH) {
    state.forceHistory.splice(0, state.forceHistory.length - FORCE_HISTORY_LENGTH);
  }
}

export function isStalled(state: ViewerState, nowMs: number): boolean {
  return state.snapshot !== null
    && nowMs - state.lastSnapshotAtMs > STALL_TIMEOUT_MS;
}

/**
 * Gate for outbound pose messages: connected, and at most poseRateHz per
 * second. Records the send time when it returns true.
 */
export function shouldSendPose(state: ViewerState, nowMs: number): boolean {
  if (state.connection !== "connected") return false;
  if (nowMs - state.lastPoseSentAtMs < 1000 / state.poseRateHz) return false;
  state.lastPoseSentAtMs = nowMs;
  return true;
}
