/**
 * Viewer entry point. Connects to the session server (host/port from URL
 * parameters), renders streamed snapshots, and maps mouse input to instrument
 * poses: move = steer, wheel = depth, hold left = close jaw, right click or
 * space = toggle activation, middle-drag = orbit, keys 1..9 = switch tool.
 */

import { DEFAULT_ORBIT, orbitDrag, orbitRig, orbitZoom } from "./camera.js";
import {
  DEFAULT_INPUT_CONFIG,
  inputToPose,
  rampJaw,
  stepDepth,
  type PointerState,
} from "./input.js";
import {
  decodeSnapshot,
  encodePose,
  encodeSelectTool,
  parseServerText,
} from "./protocol.js";
import {
  createState,
  currentTool,
  isStalled,
  onConnected,
  onDisconnected,
  onSnapshot,
  selectTool,
  shouldSendPose,
} from "./state.js";
import { Renderer } from "./render.js";

const params = new URLSearchParams(window.location.search);
const host = params.get("host") ?? window.location.hostname ?? "127.0.0.1";
const port = params.get("port") ?? "8765";
const url = `ws://${host}:${port}`;

const canvas = document.querySelector("#view") as HTMLCanvasElement;
const hud = document.querySelector("#hud") as HTMLElement;
const statusEl = hud.querySelector("#status") as HTMLElement;
const toolEl = hud.querySelector("#tool") as HTMLElement;

const renderer = new Renderer(canvas, hud);
const state = createState();
const orbit = { ...DEFAULT_ORBIT, target: [...DEFAULT_ORBIT.target] as [number, number, number] };
const inputCfg = DEFAULT_INPUT_CONFIG;
const pointer: PointerState = { ndcX: 0, ndcY: 0, depth: 0.16, jaw: 1, active: false };
let jawHeld = false;
let orbitDragActive = false;
let lastTick = performance.now();

const ws = new WebSocket(url);
ws.binaryType = "arraybuffer";
statusEl.textContent = `connecting to ${url}`;

ws.onmessage = (ev: MessageEvent) => {
  if (typeof ev.data === "string") {
    const msg = parseServerText(ev.data);
    if (msg.type === "hello") {
      onConnected(state, msg.tools);
      renderer.addTools(msg.tools);
      statusEl.textContent = `connected: ${msg.scenario}`;
      updateToolLabel();
    } else {
      console.warn("server error:", msg.detail);
    }
    return;
  }
  onSnapshot(state, decodeSnapshot(ev.data as ArrayBuffer), performance.now());
};
ws.onclose = () => {
  onDisconnected(state);
  statusEl.textContent = "disconnected";
};

function updateToolLabel(): void {
  const tool = currentTool(state);
  toolEl.textContent = tool ? `${tool.id} (${tool.kind})` : "no tool";
}

canvas.addEventListener("pointermove", (ev) => {
  const rect = canvas.getBoundingClientRect();
  if (orbitDragActive) {
    orbitDrag(orbit, ev.movementX, ev.movementY);
    return;
  }
  pointer.ndcX = ((ev.clientX - rect.left) / rect.width) * 2 - 1;
  pointer.ndcY = -(((ev.clientY - rect.top) / rect.height) * 2 - 1);
});
canvas.addEventListener("pointerdown", (ev) => {
  if (ev.button === 0) jawHeld = true;
  if (ev.button === 1) orbitDragActive = true;
  if (ev.button === 2) pointer.active = !pointer.active;
  ev.preventDefault();
});
window.addEventListener("pointerup", (ev) => {
  if (ev.button === 0) jawHeld = false;
  if (ev.button === 1) orbitDragActive = false;
});
canvas.addEventListener("contextmenu", (ev) => ev.preventDefault());
canvas.addEventListener("wheel", (ev) => {
  if (ev.shiftKey) {
    orbitZoom(orbit, ev.deltaY > 0 ? 1.1 : 0.9);
  } else {
    pointer.depth = stepDepth(pointer.depth, ev.deltaY > 0 ? 1 : -1, inputCfg);
  }
  ev.preventDefault();
});
window.addEventListener("keydown", (ev) => {
  if (ev.key === " ") pointer.active = !pointer.active;
  const num = Number.parseInt(ev.key, 10);
  if (num >= 1 && num <= state.tools.length) {
    const tool = selectTool(state, num - 1);
    if (tool && ws.readyState === WebSocket.OPEN) {
      ws.send(encodeSelectTool(tool.id));
      updateToolLabel();
    }
  }
});

function tick(): void {
  const now = performance.now();
  const dt = Math.min(0.1, (now - lastTick) / 1000);
  lastTick = now;
  pointer.jaw = rampJaw(pointer.jaw, jawHeld, dt, inputCfg);

  const rig = orbitRig(orbit, (50 * Math.PI) / 180,
                       canvas.clientWidth / Math.max(1, canvas.clientHeight));
  const pose = inputToPose(rig, pointer);
  const tool = currentTool(state);
  if (tool && shouldSendPose(state, now) && ws.readyState === WebSocket.OPEN) {
    ws.send(encodePose(tool.id, pose, now));
  }

  const snap = state.snapshot;
  if (snap) {
    renderer.updateTissue(snap, state.triangles, state.geometryDirty);
    state.geometryDirty = false;
    state.tools.forEach((info, i) => {
      if (info.id === tool?.id) {
        renderer.setToolPose(info.id, pose);
      } else if (snap.tools[i]) {
        renderer.setToolPose(info.id, snap.tools[i]);
      }
    });
    const reading = snap.tools[state.currentTool];
    renderer.setForce(reading ? reading.force : 0);
  }
  renderer.setStalled(isStalled(state, now));
  renderer.render(rig);
  requestAnimationFrame(tick);
}

requestAnimationFrame(tick);
