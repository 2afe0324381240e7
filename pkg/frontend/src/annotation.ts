/**
 * Annotation model: labelled polygons over a fixed canvas, an undo stack,
 * and (de)serialization to the line-based text record the service accepts.
 *
 * The record grammar, one statement per line (blank lines ignored):
 *
 *     annotation v1
 *     canvas <width> <height>
 *     region <label> <x0> <y0> <x1> <y1> ...
 *
 * Later regions paint over earlier ones; unpainted pixels are static (0).
 */

export const ANNOTATION_HEADER = "annotation v1";

export type Vertex = readonly [number, number];

export interface Region {
  readonly label: number;
  readonly vertices: ReadonlyArray<Vertex>;
}

export interface Annotation {
  readonly width: number;
  readonly height: number;
  readonly regions: ReadonlyArray<Region>;
}

function orient(
  ax: number, ay: number, bx: number, by: number, cx: number, cy: number,
): number {
  return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
}

function segmentsProperlyCross(
  p0: Vertex, p1: Vertex, q0: Vertex, q1: Vertex,
): boolean {
  const d1 = orient(p0[0], p0[1], p1[0], p1[1], q0[0], q0[1]);
  const d2 = orient(p0[0], p0[1], p1[0], p1[1], q1[0], q1[1]);
  const d3 = orient(q0[0], q0[1], q1[0], q1[1], p0[0], p0[1]);
  const d4 = orient(q0[0], q0[1], q1[0], q1[1], p1[0], p1[1]);
  return (
    (d1 > 0) !== (d2 > 0) && (d3 > 0) !== (d4 > 0) &&
    d1 !== 0 && d2 !== 0 && d3 !== 0 && d4 !== 0
  );
}

/** Proper interior crossings only; adjacent edges sharing a vertex are fine. */
export function polygonIsSimple(vertices: ReadonlyArray<Vertex>): boolean {
  const n = vertices.length;
  for (let i = 0; i < n; i++) {
    for (let j = i + 1; j < n; j++) {
      if (j === i + 1 || (i === 0 && j === n - 1)) continue;
      const p0 = vertices[i];
      const p1 = vertices[(i + 1) % n];
      const q0 = vertices[j];
      const q1 = vertices[(j + 1) % n];
      if (segmentsProperlyCross(p0, p1, q0, q1)) return false;
    }
  }
  return true;
}

/**
 * Validate one region against a canvas; returns an error message in the
 * same "region <idx>: ..." shape the service uses, or null when valid.
 */
export function regionProblem(
  region: Region, idx: number, width: number, height: number,
  numDirections: number,
): string | null {
  const v = region.vertices;
  if (v.length < 3) {
    return `region ${idx}: polygon needs at least 3 vertices`;
  }
  for (const [x, y] of v) {
    if (!Number.isFinite(x) || !Number.isFinite(y)) {
      return `region ${idx}: non-finite vertex coordinates`;
    }
  }
  if (!Number.isInteger(region.label) || region.label < 0 ||
      region.label > numDirections) {
    return `region ${idx}: label ${region.label} invalid for ` +
      `${numDirections} directions`;
  }
  for (const [x, y] of v) {
    if (x < 0 || x > width || y < 0 || y > height) {
      return `region ${idx}: vertices leave the canvas`;
    }
  }
  if (!polygonIsSimple(v)) {
    return `region ${idx}: polygon is self-intersecting`;
  }
  return null;
}

/** Label of the 180-degree opposite sector; static stays static. */
export function invertLabel(label: number, numDirections: number): number {
  if (label === 0) return 0;
  return ((label - 1 + numDirections / 2) % numDirections) + 1;
}

export function serializeAnnotation(a: Annotation): string {
  const lines = [ANNOTATION_HEADER, `canvas ${a.width} ${a.height}`];
  for (const region of a.regions) {
    const coords = region.vertices.flatMap((v) => [String(v[0]), String(v[1])]);
    lines.push(`region ${region.label} ${coords.join(" ")}`);
  }
  return lines.join("\n") + "\n";
}

export function parseAnnotation(text: string): Annotation {
  const raw = text.split(/\r?\n/);
  const stripped: Array<[number, string]> = [];
  raw.forEach((line, i) => {
    const s = line.trim();
    if (s) stripped.push([i + 1, s]);
  });
  if (!stripped.length || stripped[0][1] !== ANNOTATION_HEADER) {
    throw new Error(`annotation record must start with '${ANNOTATION_HEADER}'`);
  }
  if (stripped.length < 2 || !stripped[1][1].startsWith("canvas ")) {
    throw new Error("annotation record missing canvas line");
  }
  const canvasParts = stripped[1][1].split(/\s+/);
  if (canvasParts.length !== 3) {
    throw new Error(
      `line ${stripped[1][0]}: canvas line must be 'canvas <width> <height>'`);
  }
  const width = Number(canvasParts[1]);
  const height = Number(canvasParts[2]);
  if (!Number.isInteger(width) || !Number.isInteger(height)) {
    throw new Error(`line ${stripped[1][0]}: canvas dimensions must be integers`);
  }
  if (width <= 0 || height <= 0) {
    throw new Error(`line ${stripped[1][0]}: canvas size must be positive`);
  }
  const regions: Region[] = [];
  for (const [lineno, line] of stripped.slice(2)) {
    const parts = line.split(/\s+/);
    if (parts[0] !== "region") {
      throw new Error(`line ${lineno}: expected a region line, got '${parts[0]}'`);
    }
    if (parts.length < 2) {
      throw new Error(`line ${lineno}: region line missing label`);
    }
    const label = Number(parts[1]);
    const coords = parts.slice(2).map(Number);
    if (!Number.isInteger(label) || coords.some((c) => Number.isNaN(c))) {
      throw new Error(`line ${lineno}: malformed region numbers`);
    }
    if (coords.length % 2 !== 0) {
      throw new Error(`line ${lineno}: region has an odd coordinate count`);
    }
    if (coords.length < 6) {
      throw new Error(`line ${lineno}: region needs at least 3 vertices`);
    }
    const vertices: Vertex[] = [];
    for (let i = 0; i < coords.length; i += 2) {
      vertices.push([coords[i], coords[i + 1]]);
    }
    regions.push({ label, vertices });
  }
  return { width, height, regions };
}

/**
 * The editing surface: an annotation plus an undo history and the active
 * brush label. Every mutation returns a new state object, so the whole UI
 * can be reproduced from (image id, serialized record) with no hidden state.
 */
export class CanvasAnnotation {
  private constructor(
    readonly width: number,
    readonly height: number,
    readonly numDirections: number,
    readonly regions: ReadonlyArray<Region>,
    readonly brush: number,
    private readonly undoStack: ReadonlyArray<ReadonlyArray<Region>>,
  ) {}

  static empty(width: number, height: number, numDirections: number,
  ): CanvasAnnotation {
    return new CanvasAnnotation(width, height, numDirections, [], 1, []);
  }

  static fromRecord(text: string, numDirections: number): CanvasAnnotation {
    const a = parseAnnotation(text);
    a.regions.forEach((r, i) => {
      const problem = regionProblem(r, i, a.width, a.height, numDirections);
      if (problem) throw new Error(problem);
    });
    return new CanvasAnnotation(a.width, a.height, numDirections,
      a.regions, 1, []);
  }

  get annotation(): Annotation {
    return { width: this.width, height: this.height, regions: this.regions };
  }

  withBrush(label: number): CanvasAnnotation {
    if (!Number.isInteger(label) || label < 0 || label > this.numDirections) {
      throw new Error(`brush label ${label} invalid for ` +
        `${this.numDirections} directions`);
    }
    return new CanvasAnnotation(this.width, this.height, this.numDirections,
      this.regions, label, this.undoStack);
  }

  /** Append a closed polygon painted with the given (or active) label. */
  paintRegion(vertices: ReadonlyArray<Vertex>, label?: number,
  ): CanvasAnnotation {
    const region: Region = { label: label ?? this.brush, vertices };
    const problem = regionProblem(region, this.regions.length, this.width,
      this.height, this.numDirections);
    if (problem) throw new Error(problem);
    return new CanvasAnnotation(this.width, this.height, this.numDirections,
      [...this.regions, region], this.brush,
      [...this.undoStack, this.regions]);
  }

  get canUndo(): boolean {
    return this.undoStack.length > 0;
  }

  undo(): CanvasAnnotation {
    if (!this.undoStack.length) return this;
    const prior = this.undoStack[this.undoStack.length - 1];
    return new CanvasAnnotation(this.width, this.height, this.numDirections,
      prior, this.brush, this.undoStack.slice(0, -1));
  }

  /** Invert every region label (quadrant I <-> III, II <-> IV). */
  flipDirections(): CanvasAnnotation {
    const flipped = this.regions.map((r) => ({
      label: invertLabel(r.label, this.numDirections),
      vertices: r.vertices,
    }));
    return new CanvasAnnotation(this.width, this.height, this.numDirections,
      flipped, this.brush, [...this.undoStack, this.regions]);
  }

  serialize(): string {
    return serializeAnnotation(this.annotation);
  }
}
