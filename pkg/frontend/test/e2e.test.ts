/**
 * End-to-end interactive loop against the real session server: pressing the
 * tissue with the grasper must show a force readout within 100 ms, and a cut
 * event must bump the topology version and replace the index list.
 */

import { spawn, type ChildProcess } from "node:child_process";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import { afterAll, beforeAll, describe, expect, it } from "vitest";
import WebSocket from "ws";

import { decodeSnapshot, encodePose, parseServerText, type Snapshot } from "../src/protocol.js";

const here = dirname(fileURLToPath(import.meta.url));
const repoRoot = join(here, "..", "..");
const PORT = 18931;
const DOWN: [number, number, number, number] = [1, 0, 0, 0];

let server: ChildProcess;

function connect(): Promise<WebSocket> {
  return new Promise((resolve, reject) => {
    const deadline = Date.now() + 30000;
    const attempt = () => {
      const ws = new WebSocket(`ws://127.0.0.1:${PORT}`);
      ws.binaryType = "arraybuffer";
      ws.once("open", () => resolve(ws));
      ws.once("error", () => {
        ws.close();
        if (Date.now() > deadline) reject(new Error("server never came up"));
        else setTimeout(attempt, 250);
      });
    };
    attempt();
  });
}

interface Feed {
  ws: WebSocket;
  hello: any;
  nextSnapshot(filter?: (s: Snapshot) => boolean, timeoutMs?: number): Promise<Snapshot>;
}

function makeFeed(ws: WebSocket): Promise<Feed> {
  return new Promise((resolve, reject) => {
    const waiters: Array<{ filter: (s: Snapshot) => boolean; resolve: (s: Snapshot) => void }> = [];
    ws.on("message", (data: Buffer | ArrayBuffer, isBinary: boolean) => {
      if (!isBinary) {
        const msg = parseServerText(data.toString());
        if (msg.type === "hello") {
          resolve({
            ws,
            hello: msg,
            nextSnapshot: (filter = () => true, timeoutMs = 10000) =>
              new Promise((res, rej) => {
                const timer = setTimeout(
                  () => rej(new Error("timed out waiting for snapshot")), timeoutMs);
                waiters.push({
                  filter,
                  resolve: (s) => {
                    clearTimeout(timer);
                    res(s);
                  },
                });
              }),
          });
        }
        return;
      }
      const buf = data instanceof ArrayBuffer
        ? data
        : data.buffer.slice(data.byteOffset, data.byteOffset + data.byteLength);
      const snap = decodeSnapshot(buf as ArrayBuffer);
      for (let i = waiters.length - 1; i >= 0; i -= 1) {
        if (waiters[i].filter(snap)) {
          const w = waiters.splice(i, 1)[0];
          w.resolve(snap);
        }
      }
    });
    ws.once("close", () => reject(new Error("connection closed before hello")));
  });
}

beforeAll(async () => {
  server = spawn("python3", [
    "-m", "surgsim.cli", "serve", "scenarios/interactive.yaml",
    "--port", String(PORT), "--snapshot-hz", "60",
  ], { cwd: repoRoot, stdio: "ignore" });
}, 60000);

afterAll(() => {
  server?.kill();
});

describe("interactive loop", () => {
  it("press -> force readout within 100 ms; cut -> topology change", async () => {
    const ws = await connect();
    const feed = await makeFeed(ws);
    const toolIds = feed.hello.tools.map((t: any) => t.id);
    const grasperIdx = toolIds.indexOf("grasper");
    const scissorsIdx = toolIds.indexOf("scissors");
    expect(grasperIdx).toBeGreaterThanOrEqual(0);
    expect(scissorsIdx).toBeGreaterThanOrEqual(0);

    // wait for a first (topology-bearing) snapshot at rest
    const first = await feed.nextSnapshot((s) => s.triangles !== null);
    const baseVersion = first.topologyVersion;
    const baseTris = first.triangles!.length / 3;
    expect(baseTris).toBeGreaterThan(0);
    expect(first.tools[grasperIdx].force).toBe(0);

    // press the grasper into the slab top (surface z = 0.015)
    const pressAt = Date.now();
    ws.send(encodePose("grasper", {
      position: [0.045, 0.045, 0.024], quaternion: DOWN, jaw: 1.0, active: false,
    }, pressAt));
    const withForce = await feed.nextSnapshot((s) => s.tools[grasperIdx].force > 0);
    const latencyMs = Date.now() - pressAt;
    expect(withForce.tools[grasperIdx].force).toBeGreaterThan(0);
    expect(latencyMs).toBeLessThan(100);

    // scissor closure over the tissue: jaw 1 -> 0 while active triggers a cut
    ws.send(encodePose("scissors", {
      position: [0.045, 0.045, 0.017], quaternion: DOWN, jaw: 1.0, active: true,
    }, Date.now()));
    await feed.nextSnapshot();
    await feed.nextSnapshot();
    ws.send(encodePose("scissors", {
      position: [0.045, 0.045, 0.017], quaternion: DOWN, jaw: 0.02, active: true,
    }, Date.now()));
    const afterCut = await feed.nextSnapshot(
      (s) => s.topologyVersion > baseVersion && s.triangles !== null);
    expect(afterCut.topologyVersion).toBe(baseVersion + 1);
    expect(afterCut.triangles!.length / 3).not.toBe(baseTris);
    // the rebuilt index list stays consistent with its vertex block
    let maxIndex = 0;
    for (const v of afterCut.triangles!) maxIndex = Math.max(maxIndex, v);
    expect(maxIndex).toBeLessThan(afterCut.positions.length / 3);

    // round-trip sanity: the commanded pose echoes back in the snapshot's
    // tool state within protocol (f32) precision
    const echo = afterCut.tools[scissorsIdx];
    expect(echo.position[0]).toBeCloseTo(0.045, 6);
    expect(echo.position[1]).toBeCloseTo(0.045, 6);
    expect(echo.position[2]).toBeCloseTo(0.017, 6);
    expect(echo.jaw).toBeCloseTo(0.02, 6);
    expect(echo.active).toBe(true);

    ws.close();
  }, 60000);
});
