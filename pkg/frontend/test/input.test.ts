import { describe, expect, it } from "vitest";

import { DEFAULT_ORBIT, orbitRig } from "../src/camera.js";
import {
  DEFAULT_INPUT_CONFIG,
  inputToPose,
  mouseRay,
  quatFromForward,
  rampJaw,
  rayDepthPoint,
  stepDepth,
  type CameraRig,
  type Vec3,
} from "../src/input.js";

const cam: CameraRig = {
  position: [0, 0, 1],
  forward: [0, 0, -1],
  up: [0, 1, 0],
  right: [1, 0, 0],
  fovY: Math.PI / 2,
  aspect: 2.0,
};

function rotate(q: [number, number, number, number], v: Vec3): Vec3 {
  // quaternion rotation via the sandwich product, independent implementation
  const [x, y, z, w] = q;
  const uv: Vec3 = [
    2 * (y * v[2] - z * v[1]),
    2 * (z * v[0] - x * v[2]),
    2 * (x * v[1] - y * v[0]),
  ];
  return [
    v[0] + w * uv[0] + (y * uv[2] - z * uv[1]),
    v[1] + w * uv[1] + (z * uv[0] - x * uv[2]),
    v[2] + w * uv[2] + (x * uv[1] - y * uv[0]),
  ];
}

describe("mouse ray", () => {
  it("centered mouse gives the camera axis", () => {
    expect(mouseRay(cam, 0, 0)).toEqual([0, 0, -1]);
  });

  it("right edge tilts by fov/2 * aspect", () => {
    const dir = mouseRay(cam, 1, 0);
    // tan(fov/2) = 1, aspect 2 -> offset of 2 along right per unit forward
    expect(dir[0] / -dir[2]).toBeCloseTo(2.0, 12);
    expect(Math.hypot(...dir)).toBeCloseTo(1.0, 12);
  });

  it("centered pose lands on the camera axis at the current depth", () => {
    const pose = inputToPose(cam, { ndcX: 0, ndcY: 0, depth: 0.3, jaw: 1, active: false });
    expect(pose.position[0]).toBeCloseTo(0, 12);
    expect(pose.position[1]).toBeCloseTo(0, 12);
    expect(pose.position[2]).toBeCloseTo(0.7, 12);
  });

  it("depth plane intersection stays at the commanded depth along the axis", () => {
    const dir = mouseRay(cam, 0.7, -0.4);
    const p = rayDepthPoint(cam, dir, 0.25);
    // the plane is perpendicular to forward at depth 0.25
    const along = (p[0] - cam.position[0]) * cam.forward[0]
      + (p[1] - cam.position[1]) * cam.forward[1]
      + (p[2] - cam.position[2]) * cam.forward[2];
    expect(along).toBeCloseTo(0.25, 12);
  });
});

describe("orientation", () => {
  it("aligns the tool +z to the ray", () => {
    for (const ndc of [[0, 0], [0.5, 0.3], [-0.8, 0.9]] as const) {
      const dir = mouseRay(cam, ndc[0], ndc[1]);
      const q = quatFromForward(dir);
      const rotated = rotate(q, [0, 0, 1]);
      expect(rotated[0]).toBeCloseTo(dir[0], 10);
      expect(rotated[1]).toBeCloseTo(dir[1], 10);
      expect(rotated[2]).toBeCloseTo(dir[2], 10);
      expect(Math.hypot(...q)).toBeCloseTo(1.0, 10);
    }
  });

  it("handles the antiparallel case", () => {
    const q = quatFromForward([0, 0, -1]);
    const rotated = rotate(q, [0, 0, 1]);
    expect(rotated[2]).toBeCloseTo(-1, 10);
  });
});

describe("depth and jaw controls", () => {
  it("one scroll tick moves depth by exactly the configured step", () => {
    const cfg = { ...DEFAULT_INPUT_CONFIG, depthStep: 0.004 };
    expect(stepDepth(0.2, 1, cfg) - 0.2).toBeCloseTo(cfg.depthStep, 12);
    expect(stepDepth(0.2, -2, cfg) - 0.2).toBeCloseTo(-2 * cfg.depthStep, 12);
  });

  it("depth clamps to the configured range", () => {
    const cfg = { ...DEFAULT_INPUT_CONFIG, minDepth: 0.05, maxDepth: 0.5 };
    expect(stepDepth(0.05, -1, cfg)).toBe(0.05);
    expect(stepDepth(0.5, 1, cfg)).toBe(0.5);
  });

  it("holding the button ramps the jaw 1 -> 0 linearly in one second", () => {
    const cfg = { ...DEFAULT_INPUT_CONFIG, closingSpeed: 1.0 };
    let jaw = 1.0;
    for (let i = 0; i < 10; i += 1) {
      jaw = rampJaw(jaw, true, 0.1, cfg);
      expect(jaw).toBeCloseTo(1.0 - 0.1 * (i + 1), 10);
    }
    expect(jaw).toBeCloseTo(0, 10);
    jaw = rampJaw(jaw, true, 0.1, cfg);
    expect(jaw).toBe(0); // clamped
    jaw = rampJaw(jaw, false, 0.25, cfg);
    expect(jaw).toBeCloseTo(0.25, 10); // reopens when released
  });
});

describe("orbit camera", () => {
  it("produces an orthonormal rig looking at the target", () => {
    const rig = orbitRig(DEFAULT_ORBIT, Math.PI / 4, 1.5);
    const dot = (a: Vec3, b: Vec3) => a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    expect(Math.hypot(...rig.forward)).toBeCloseTo(1, 10);
    expect(Math.hypot(...rig.right)).toBeCloseTo(1, 10);
    expect(Math.hypot(...rig.up)).toBeCloseTo(1, 10);
    expect(dot(rig.forward, rig.right)).toBeCloseTo(0, 10);
    expect(dot(rig.forward, rig.up)).toBeCloseTo(0, 10);
    // looking at the target from `distance` away
    const toTarget: Vec3 = [
      DEFAULT_ORBIT.target[0] - rig.position[0],
      DEFAULT_ORBIT.target[1] - rig.position[1],
      DEFAULT_ORBIT.target[2] - rig.position[2],
    ];
    expect(Math.hypot(...toTarget)).toBeCloseTo(DEFAULT_ORBIT.distance, 10);
    expect(dot(toTarget, rig.forward)).toBeCloseTo(DEFAULT_ORBIT.distance, 10);
  });
});
