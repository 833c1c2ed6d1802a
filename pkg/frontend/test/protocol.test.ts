import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import { describe, expect, it } from "vitest";

import {
  ProtocolError,
  decodeSnapshot,
  encodePose,
  encodeReset,
  parseServerText,
} from "../src/protocol.js";

const here = dirname(fileURLToPath(import.meta.url));

function loadFixture(name: string): ArrayBuffer {
  const buf = readFileSync(join(here, "fixtures", name));
  return buf.buffer.slice(buf.byteOffset, buf.byteOffset + buf.byteLength);
}

const meta = JSON.parse(
  readFileSync(join(here, "fixtures", "snapshot_meta.json"), "utf-8"),
);

describe("decodeSnapshot", () => {
  it("decodes the server-generated full snapshot exactly", () => {
    const snap = decodeSnapshot(loadFixture("snapshot_full.bin"));
    expect(snap.frameIndex).toBe(meta.frameIndex);
    expect(snap.simTime).toBe(meta.simTime); // f64, exact
    expect(snap.topologyVersion).toBe(meta.topologyVersion);
    expect(Array.from(snap.positions)).toHaveLength(meta.positions.length);
    for (let i = 0; i < meta.positions.length; i += 1) {
      expect(snap.positions[i]).toBeCloseTo(meta.positions[i], 6);
    }
    expect(Array.from(snap.triangles!)).toEqual(meta.triangles);
    expect(Array.from(snap.coagFlags)).toEqual(meta.coagFlags);
    expect(snap.volumeRatio).toBe(meta.volumeRatio); // value exact in f32
    expect(snap.contactCount).toBe(meta.contactCount);
    expect(snap.tools).toHaveLength(meta.tools.length);
    meta.tools.forEach((tool: any, i: number) => {
      expect(snap.tools[i].jaw).toBeCloseTo(tool.jaw, 6);
      expect(snap.tools[i].active).toBe(tool.active);
      expect(snap.tools[i].force).toBeCloseTo(tool.force, 6);
      tool.position.forEach((c: number, k: number) => {
        expect(snap.tools[i].position[k]).toBeCloseTo(c, 6);
      });
    });
  });

  it("delta snapshots omit the index list but keep flags", () => {
    const snap = decodeSnapshot(loadFixture("snapshot_delta.bin"));
    expect(snap.triangles).toBeNull();
    expect(Array.from(snap.coagFlags)).toEqual(meta.coagFlags);
  });

  it("rejects truncated payloads without partial state", () => {
    const full = loadFixture("snapshot_full.bin");
    for (const cut of [0, 10, 43, full.byteLength - 1]) {
      expect(() => decodeSnapshot(full.slice(0, cut))).toThrow(ProtocolError);
    }
    const padded = new Uint8Array(full.byteLength + 1);
    padded.set(new Uint8Array(full));
    expect(() => decodeSnapshot(padded.buffer)).toThrow(ProtocolError);
  });

  it("rejects a bad magic tag", () => {
    const bytes = new Uint8Array(loadFixture("snapshot_full.bin"));
    bytes[0] = 0x58;
    expect(() => decodeSnapshot(bytes.buffer)).toThrow(ProtocolError);
  });
});

describe("control messages", () => {
  it("encodes a pose message with all fields", () => {
    const text = encodePose("g1", {
      position: [0.1, 0.2, 0.3],
      quaternion: [0, 0, 0, 1],
      jaw: 0.5,
      active: true,
    }, 125.5);
    const parsed = JSON.parse(text);
    expect(parsed).toEqual({
      type: "pose", tool: "g1", position: [0.1, 0.2, 0.3],
      quaternion: [0, 0, 0, 1], jaw: 0.5, active: true, t: 125.5,
    });
  });

  it("encodes reset", () => {
    expect(JSON.parse(encodeReset())).toEqual({ type: "reset" });
  });

  it("parses hello and enforces the protocol version", () => {
    const hello = parseServerText(JSON.stringify({
      type: "hello", version: "1", scenario: "s", frame_dt: 0.016,
      snapshot_hz: 30, tools: [{ id: "g1", kind: "grasper" }],
    }));
    expect(hello.type).toBe("hello");
    expect(() => parseServerText('{"type": "hello", "version": "999"}')).toThrow(
      ProtocolError,
    );
    expect(() => parseServerText("garbage")).toThrow(ProtocolError);
  });

  it("passes error frames through", () => {
    const err = parseServerText('{"type": "error", "detail": "nope"}');
    expect(err.type).toBe("error");
  });
});
