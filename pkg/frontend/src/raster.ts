/**
 * Client-side rasterization of an annotation into a label map, kept in
 * lockstep with the service's rasterizer so the canvas preview is the map
 * the server will actually use: even-odd scanline fill sampling pixel
 * centers (x + 0.5, y + 0.5), crossings collected under the half-open rule
 * min(y) <= yc < max(y).
 */

import { Annotation, Region, Vertex, regionProblem } from "./annotation.js";

export interface LabelMap {
  readonly width: number;
  readonly height: number;
  /** row-major, values 0..K */
  readonly labels: Uint8Array;
}

export function fillPolygon(
  vertices: ReadonlyArray<Vertex>, height: number, width: number,
): Uint8Array {
  const mask = new Uint8Array(height * width);
  const n = vertices.length;
  for (let row = 0; row < height; row++) {
    const yc = row + 0.5;
    const crossings: number[] = [];
    for (let i = 0; i < n; i++) {
      const [x0, y0] = vertices[i];
      const [x1, y1] = vertices[(i + 1) % n];
      if (y0 === y1) continue;
      if (Math.min(y0, y1) <= yc && yc < Math.max(y0, y1)) {
        const t = (yc - y0) / (y1 - y0);
        crossings.push(x0 + t * (x1 - x0));
      }
    }
    crossings.sort((a, b) => a - b);
    for (let k = 0; k + 1 < crossings.length; k += 2) {
      const lo = Math.max(0, Math.ceil(crossings[k] - 0.5));
      const hi = Math.min(width, Math.ceil(crossings[k + 1] - 0.5));
      for (let x = lo; x < hi; x++) mask[row * width + x] = 1;
    }
  }
  return mask;
}

/** Paint regions in order onto a fresh label map; throws on invalid regions. */
export function rasterizeAnnotation(
  a: Annotation, numDirections: number,
): LabelMap {
  const labels = new Uint8Array(a.height * a.width);
  a.regions.forEach((region: Region, idx: number) => {
    const problem = regionProblem(region, idx, a.width, a.height,
      numDirections);
    if (problem) throw new Error(problem);
    const mask = fillPolygon(region.vertices, a.height, a.width);
    for (let i = 0; i < labels.length; i++) {
      if (mask[i]) labels[i] = region.label;
    }
  });
  return { width: a.width, height: a.height, labels };
}

/** Degrees of the sector center in image coordinates (y down), 0 = +x. */
export function sectorCenterDegrees(label: number, numDirections: number,
): number {
  if (label < 1 || label > numDirections) {
    throw new Error(`label ${label} out of range for ${numDirections} directions`);
  }
  return (((315 - (label - 1) * (360 / numDirections)) % 360) + 360) % 360;
}

export interface LegendEntry {
  readonly label: number;
  readonly name: string;
  readonly color: string;
  /** unicode arrow for the sector center, screen orientation */
  readonly arrow: string;
}

const ARROWS = ["→", "↗", "↑", "↖",
  "←", "↙", "↓", "↘"];

function arrowFor(degrees: number): string {
  // sector angles live in image coordinates (y down); flip to screen-up
  // orientation so label 1 (315 deg) renders as up-right
  const screen = (360 - degrees) % 360;
  return ARROWS[Math.round(screen / 45) % 8];
}

export function labelColor(label: number, numDirections: number): string {
  if (label === 0) return "#9aa0a6";
  const hue = sectorCenterDegrees(label, numDirections);
  return `hsl(${hue}, 75%, 55%)`;
}

export function buildLegend(numDirections: number): LegendEntry[] {
  const entries: LegendEntry[] = [
    { label: 0, name: "static", color: labelColor(0, numDirections), arrow: "·" },
  ];
  for (let l = 1; l <= numDirections; l++) {
    const deg = sectorCenterDegrees(l, numDirections);
    entries.push({
      label: l,
      name: `${deg.toFixed(1)} deg`,
      color: labelColor(l, numDirections),
      arrow: arrowFor(deg),
    });
  }
  return entries;
}
