/** Orbit camera around a fixed point on the tissue; pure math, render-free. */

import type { CameraRig, Vec3 } from "./input.js";
import { normalize } from "./input.js";

export interface OrbitParams {
  target: Vec3;
  yaw: number;     // radians about world z
  pitch: number;   // radians above the horizontal plane
  distance: number;
}

export const DEFAULT_ORBIT: OrbitParams = {
  target: [0.045, 0.045, 0.01],
  yaw: -Math.PI / 2,
  pitch: 0.9,
  distance: 0.16,
};

export function orbitDrag(orbit: OrbitParams, dxPixels: number, dyPixels: number): void {
  orbit.yaw -= dxPixels * 0.005;
  orbit.pitch = Math.min(1.45, Math.max(0.05, orbit.pitch + dyPixels * 0.005));
}

export function orbitZoom(orbit: OrbitParams, factor: number): void {
  orbit.distance = Math.min(1.0, Math.max(0.03, orbit.distance * factor));
}

/** Camera rig (position + orthonormal basis) for the orbit parameters. */
export function orbitRig(orbit: OrbitParams, fovY: number, aspect: number): CameraRig {
  const cp = Math.cos(orbit.pitch);
  const offset: Vec3 = [
    cp * Math.cos(orbit.yaw) * orbit.distance,
    cp * Math.sin(orbit.yaw) * orbit.distance,
    Math.sin(orbit.pitch) * orbit.distance,
  ];
  const position: Vec3 = [
    orbit.target[0] + offset[0],
    orbit.target[1] + offset[1],
    orbit.target[2] + offset[2],
  ];
  const forward = normalize([-offset[0], -offset[1], -offset[2]]);
  const worldUp: Vec3 = [0, 0, 1];
  const right = normalize([
    forward[1] * worldUp[2] - forward[2] * worldUp[1],
    forward[2] * worldUp[0] - forward[0] * worldUp[2],
    forward[0] * worldUp[1] - forward[1] * worldUp[0],
  ]);
  const up: Vec3 = [
    right[1] * forward[2] - right[2] * forward[1],
    right[2] * forward[0] - right[0] * forward[2],
    right[0] * forward[1] - right[1] * forward[0],
  ];
  return { position, forward, up, right, fovY, aspect };
}
