/**
 * Thin typed client for the decomposition service. All requests for one
 * image id are serialized through a per-id promise chain, so a double
 * click cannot interleave two decompose jobs.
 */

export interface GuidanceInfo {
  num_directions: number;
  static_threshold: number;
}

export interface HealthResponse {
  status: string;
  version: string;
  guidance: GuidanceInfo;
  t: number;
  predictor_loaded: boolean;
}

export interface UploadResponse {
  id: string;
  height: number;
  width: number;
  guidance: GuidanceInfo;
  blurry_url: string;
}

export interface Proposal {
  index: number;
  url: string;
  static_fraction: number;
}

export interface ProposalsResponse {
  id: string;
  n: number;
  seed: number;
  proposals: Proposal[];
  legend: Record<string, string>;
  guidance: GuidanceInfo;
}

export interface ReversalSimilarity {
  compared_job: number;
  per_frame_psnr: Array<number | null>;
  mean_psnr: number | null;
}

export interface JobRecord {
  id: string;
  job: number;
  frames: string[];
  guidance_url: string;
  guidance: GuidanceInfo;
  reversal_similarity?: ReversalSimilarity;
}

export interface DecomposeRequest {
  annotation?: string;
  labels?: number[][];
  invert?: boolean;
  compare_with?: number;
}

export class ServiceError extends Error {
  constructor(readonly status: number, readonly detail: string) {
    super(`HTTP ${status}: ${detail}`);
    this.name = "ServiceError";
  }
}

async function errorFrom(response: Response): Promise<ServiceError> {
  let detail = response.statusText;
  try {
    const body = await response.json();
    if (typeof body.error === "string") detail = body.error;
    else if (body.detail !== undefined) detail = JSON.stringify(body.detail);
  } catch {
    // non-JSON error body; keep the status text
  }
  return new ServiceError(response.status, detail);
}

export class Client {
  private chains = new Map<string, Promise<unknown>>();

  constructor(readonly base: string) {}

  fileUrl(path: string): string {
    return this.base + path;
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await fetch(this.base + path, init);
    if (!response.ok) throw await errorFrom(response);
    return response.json() as Promise<T>;
  }

  /** Chain a request behind any in-flight request for the same image id. */
  private serialized<T>(imageId: string, run: () => Promise<T>): Promise<T> {
    const prior = this.chains.get(imageId) ?? Promise.resolve();
    const next = prior.then(run, run);
    this.chains.set(imageId, next.catch(() => undefined));
    return next;
  }

  health(): Promise<HealthResponse> {
    return this.json<HealthResponse>("/healthz");
  }

  uploadImage(png: ArrayBuffer | Uint8Array): Promise<UploadResponse> {
    // copy into a fresh buffer: a Node Buffer is a view into a shared pool,
    // and slice() on one aliases rather than copies, so png.buffer could
    // carry unrelated pool bytes into the request body
    const body = png instanceof Uint8Array
      ? new Uint8Array(png).buffer
      : png;
    return this.json<UploadResponse>("/images", {
      method: "POST",
      headers: { "content-type": "image/png" },
      body,
    });
  }

  proposals(imageId: string, n = 3, seed = 0): Promise<ProposalsResponse> {
    return this.serialized(imageId, () => this.json<ProposalsResponse>(
      `/images/${imageId}/guidance-proposals?n=${n}&seed=${seed}`));
  }

  decompose(imageId: string, request: DecomposeRequest): Promise<JobRecord> {
    return this.serialized(imageId, () => this.json<JobRecord>(
      `/images/${imageId}/decompose`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(request),
      }));
  }
}
