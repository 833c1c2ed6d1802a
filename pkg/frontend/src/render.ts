/**
 * three.js rendering: shaded tissue surface with coagulated triangles tinted,
 * instrument proxies, a live force bar, and a stalled-stream indicator.
 */

import * as THREE from "three";

import type { CameraRig } from "./input.js";
import type { MappedPose } from "./input.js";
import type { Snapshot, ToolInfo } from "./protocol.js";

const TISSUE_COLOR = new THREE.Color(0.85, 0.45, 0.45);
const COAG_COLOR = new THREE.Color(0.35, 0.18, 0.12);
const FORCE_BAR_FULL_N = 2.0;

export class Renderer {
  private renderer: THREE.WebGLRenderer;
  private scene: THREE.Scene;
  private camera: THREE.PerspectiveCamera;
  private tissue: THREE.Mesh;
  private geometry: THREE.BufferGeometry;
  private toolGroups = new Map<string, THREE.Group>();
  private forceBar: HTMLElement;
  private forceLabel: HTMLElement;
  private stalledBadge: HTMLElement;
  private capacity = 0;

  constructor(canvas: HTMLCanvasElement, hud: HTMLElement) {
    this.renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
    this.renderer.setSize(canvas.clientWidth, canvas.clientHeight, false);
    this.scene = new THREE.Scene();
    this.scene.background = new THREE.Color(0x1a1016);
    this.camera = new THREE.PerspectiveCamera(50, 16 / 9, 0.005, 10);

    const hemi = new THREE.HemisphereLight(0xffe8e0, 0x402020, 0.9);
    const key = new THREE.DirectionalLight(0xffffff, 1.4);
    key.position.set(0.2, 0.1, 0.5);
    this.scene.add(hemi, key);

    this.geometry = new THREE.BufferGeometry();
    const material = new THREE.MeshStandardMaterial({
      vertexColors: true, roughness: 0.55, metalness: 0.02,
      side: THREE.DoubleSide, flatShading: true,
    });
    this.tissue = new THREE.Mesh(this.geometry, material);
    this.scene.add(this.tissue);

    this.forceBar = hud.querySelector("#force-fill") as HTMLElement;
    this.forceLabel = hud.querySelector("#force-label") as HTMLElement;
    this.stalledBadge = hud.querySelector("#stalled") as HTMLElement;
  }

  addTools(tools: ToolInfo[]): void {
    for (const tool of tools) {
      const group = new THREE.Group();
      const shaft = new THREE.Mesh(
        new THREE.CylinderGeometry(0.0025, 0.0025, 0.12, 12),
        new THREE.MeshStandardMaterial({ color: 0x8a8f98, roughness: 0.3 }),
      );
      // cylinder axis is +y; the tool points along +z with the tip at origin
      shaft.rotation.x = Math.PI / 2;
      shaft.position.z = -0.06;
      const tipColor = tool.kind === "diathermy" ? 0xe0b020
        : tool.kind === "scissors" ? 0xc03030 : 0x3070d0;
      const tip = new THREE.Mesh(
        new THREE.ConeGeometry(0.003, 0.012, 12),
        new THREE.MeshStandardMaterial({ color: tipColor, roughness: 0.4 }),
      );
      tip.rotation.x = Math.PI / 2;
      tip.position.z = 0.006;
      group.add(shaft, tip);
      this.scene.add(group);
      this.toolGroups.set(tool.id, group);
    }
  }

  /** Rebuild or refresh the non-indexed tissue geometry from a snapshot. */
  updateTissue(snapshot: Snapshot, triangles: Uint32Array | null,
               rebuild: boolean): void {
    if (!triangles) return;
    const triCount = triangles.length / 3;
    const vertCount = triCount * 3;
    if (rebuild || vertCount > this.capacity) {
      this.capacity = Math.max(vertCount, 1);
      this.geometry.setAttribute(
        "position", new THREE.BufferAttribute(new Float32Array(this.capacity * 3), 3));
      this.geometry.setAttribute(
        "color", new THREE.BufferAttribute(new Float32Array(this.capacity * 3), 3));
    }
    const pos = this.geometry.getAttribute("position") as THREE.BufferAttribute;
    const col = this.geometry.getAttribute("color") as THREE.BufferAttribute;
    const src = snapshot.positions;
    for (let t = 0; t < triCount; t += 1) {
      const tint = snapshot.coagFlags[t] & 1 ? COAG_COLOR : TISSUE_COLOR;
      for (let c = 0; c < 3; c += 1) {
        const v = triangles[t * 3 + c];
        const dst = t * 3 + c;
        pos.setXYZ(dst, src[v * 3], src[v * 3 + 1], src[v * 3 + 2]);
        col.setXYZ(dst, tint.r, tint.g, tint.b);
      }
    }
    this.geometry.setDrawRange(0, vertCount);
    pos.needsUpdate = true;
    col.needsUpdate = true;
    this.geometry.computeVertexNormals();
  }

  /** Place a tool proxy; the commanded pose for the steered tool, snapshot
   * poses for the rest. */
  setToolPose(id: string, pose: MappedPose | Snapshot["tools"][number]): void {
    const group = this.toolGroups.get(id);
    if (!group) return;
    group.position.set(pose.position[0], pose.position[1], pose.position[2]);
    group.quaternion.set(
      pose.quaternion[0], pose.quaternion[1], pose.quaternion[2], pose.quaternion[3]);
  }

  setForce(newtons: number): void {
    const frac = Math.min(1, newtons / FORCE_BAR_FULL_N);
    this.forceBar.style.height = `${(frac * 100).toFixed(1)}%`;
    this.forceLabel.textContent = `${newtons.toFixed(2)} N`;
  }

  setStalled(stalled: boolean): void {
    this.stalledBadge.style.display = stalled ? "block" : "none";
  }

  render(rig: CameraRig): void {
    const canvas = this.renderer.domElement;
    const aspect = canvas.clientWidth / Math.max(1, canvas.clientHeight);
    if (canvas.width !== canvas.clientWidth || canvas.height !== canvas.clientHeight) {
      this.renderer.setSize(canvas.clientWidth, canvas.clientHeight, false);
    }
    this.camera.aspect = aspect;
    this.camera.fov = (rig.fovY * 180) / Math.PI;
    this.camera.position.set(rig.position[0], rig.position[1], rig.position[2]);
    this.camera.up.set(rig.up[0], rig.up[1], rig.up[2]);
    this.camera.lookAt(
      rig.position[0] + rig.forward[0],
      rig.position[1] + rig.forward[1],
      rig.position[2] + rig.forward[2],
    );
    this.camera.updateProjectionMatrix();
    this.renderer.render(this.scene, this.camera);
  }
}
