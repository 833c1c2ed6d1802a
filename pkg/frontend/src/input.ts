/**
 * Mouse-to-instrument mapping: a ray through the cursor intersected with a
 * depth plane (scroll-controlled distance along the view axis) gives the tool
 * tip; the tool is oriented along the ray. A held button closes the jaw at a
 * fixed rate, a toggle drives activation.
 */

export type Vec3 = [number, number, number];
export type Quat = [number, number, number, number]; // (x, y, z, w)

export interface CameraRig {
  position: Vec3;
  forward: Vec3; // unit
  up: Vec3;      // unit, orthogonal to forward
  right: Vec3;   // unit, forward x up basis
  fovY: number;  // radians
  aspect: number;
}

export interface InputConfig {
  depthStep: number;      // m per scroll tick
  closingSpeed: number;   // jaw units per second while the button is held
  minDepth: number;
  maxDepth: number;
}

export const DEFAULT_INPUT_CONFIG: InputConfig = {
  depthStep: 0.005,
  closingSpeed: 1.0,
  minDepth: 0.02,
  maxDepth: 1.0,
};

const add = (a: Vec3, b: Vec3): Vec3 => [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
const scale = (a: Vec3, s: number): Vec3 => [a[0] * s, a[1] * s, a[2] * s];
const dot = (a: Vec3, b: Vec3): number => a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
const cross = (a: Vec3, b: Vec3): Vec3 => [
  a[1] * b[2] - a[2] * b[1],
  a[2] * b[0] - a[0] * b[2],
  a[0] * b[1] - a[1] * b[0],
];

export function normalize(v: Vec3): Vec3 {
  const n = Math.hypot(v[0], v[1], v[2]);
  if (n < 1e-12) throw new Error("cannot normalize a zero vector");
  return [v[0] / n, v[1] / n, v[2] / n];
}

/** Unit ray direction through normalized device coordinates (each in [-1, 1]). */
export function mouseRay(cam: CameraRig, ndcX: number, ndcY: number): Vec3 {
  const tan = Math.tan(cam.fovY / 2);
  return normalize(add(
    cam.forward,
    add(scale(cam.right, ndcX * tan * cam.aspect), scale(cam.up, ndcY * tan)),
  ));
}

/**
 * Intersect the ray with the plane perpendicular to the view axis at
 * `depth` meters in front of the camera.
 */
export function rayDepthPoint(cam: CameraRig, dir: Vec3, depth: number): Vec3 {
  const t = depth / dot(dir, cam.forward);
  return add(cam.position, scale(dir, t));
}

/** Shortest-arc quaternion rotating the tool's +z axis onto `dir`. */
export function quatFromForward(dir: Vec3): Quat {
  const z: Vec3 = [0, 0, 1];
  const d = dot(z, dir);
  if (d < -0.999999) {
    return [1, 0, 0, 0]; // antiparallel: 180 degrees about x
  }
  const axis = cross(z, dir);
  const q: Quat = [axis[0], axis[1], axis[2], 1 + d];
  const n = Math.hypot(q[0], q[1], q[2], q[3]);
  return [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
}

/** Scroll moves the depth plane by an exact step per tick, clamped. */
export function stepDepth(depth: number, ticks: number, cfg: InputConfig): number {
  const next = depth + ticks * cfg.depthStep;
  return Math.min(cfg.maxDepth, Math.max(cfg.minDepth, next));
}

/** Jaw ramps toward 0 while held, back toward 1 when released. */
export function rampJaw(jaw: number, held: boolean, dtSeconds: number,
                        cfg: InputConfig): number {
  const delta = cfg.closingSpeed * dtSeconds;
  const next = held ? jaw - delta : jaw + delta;
  return Math.min(1, Math.max(0, next));
}

export interface PointerState {
  ndcX: number;
  ndcY: number;
  depth: number;
  jaw: number;
  active: boolean;
}

export interface MappedPose {
  position: Vec3;
  quaternion: Quat;
  jaw: number;
  active: boolean;
}

/** Full mapping from pointer state to an instrument pose. */
export function inputToPose(cam: CameraRig, input: PointerState): MappedPose {
  const dir = mouseRay(cam, input.ndcX, input.ndcY);
  return {
    position: rayDepthPoint(cam, dir, input.depth),
    quaternion: quatFromForward(dir),
    jaw: input.jaw,
    active: input.active,
  };
}
