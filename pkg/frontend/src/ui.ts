/**
 * Canvas annotation app. One image per page session: upload, paint
 * direction regions (click to add vertices, double-click or Enter to
 * close), preview the exact label map the server will rasterize, request
 * decompositions, scrub/loop the frames, and explore the mirrored motion
 * mode via flip-directions. No hidden state: everything the server needs
 * is (image id, annotation record), and both are shown on screen.
 */

import { CanvasAnnotation, Vertex, invertLabel } from "./annotation.js";
import { Client, JobRecord } from "./client.js";
import { LabelMap, buildLegend, fillPolygon, labelColor, rasterizeAnnotation } from "./raster.js";

const SCALE = 8;

interface Job {
  record: JobRecord;
  title: string;
  images: HTMLImageElement[];
}

interface AppState {
  client: Client;
  numDirections: number;
  t: number;
  predictorLoaded: boolean;
  imageId: string | null;
  imageWidth: number;
  imageHeight: number;
  blurry: HTMLImageElement | null;
  ann: CanvasAnnotation | null;
  pending: Vertex[];
  /** label map a clicked proposal seeded the canvas with */
  baseLabels: Uint8Array | null;
  highlightRegion: number | null;
  jobs: Job[];
  activeJob: number | null;
  frameIndex: number;
  looping: boolean;
  loopTimer: number | null;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K, className?: string, text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function loadImage(url: string): Promise<HTMLImageElement> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = () => reject(new Error(`failed to load ${url}`));
    img.src = url;
  });
}

/** Read a grayscale label-map PNG back into raw label values. */
async function decodeLabelMap(
  url: string, width: number, height: number,
): Promise<Uint8Array> {
  const img = await loadImage(url);
  const canvas = document.createElement("canvas");
  canvas.width = width;
  canvas.height = height;
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("2d canvas unavailable");
  ctx.drawImage(img, 0, 0);
  const rgba = ctx.getImageData(0, 0, width, height).data;
  const labels = new Uint8Array(width * height);
  for (let i = 0; i < labels.length; i++) labels[i] = rgba[i * 4];
  return labels;
}

/** The label map the server will use: painted regions over the seed map. */
function effectiveLabels(state: AppState): LabelMap {
  const ann = state.ann;
  if (!ann) throw new Error("no annotation loaded");
  const raster = rasterizeAnnotation(ann.annotation, state.numDirections);
  if (!state.baseLabels) return raster;
  // repaint region by region with coverage masks so an explicitly painted
  // static region also overwrites the proposal seed underneath it
  const merged = new Uint8Array(state.baseLabels);
  for (const region of ann.regions) {
    const mask = fillPolygon(region.vertices, ann.height, ann.width);
    for (let i = 0; i < merged.length; i++) {
      if (mask[i]) merged[i] = region.label;
    }
  }
  return { width: raster.width, height: raster.height, labels: merged };
}

function labelsToRows(map: LabelMap): number[][] {
  const rows: number[][] = [];
  for (let y = 0; y < map.height; y++) {
    rows.push(Array.from(map.labels.subarray(y * map.width,
      (y + 1) * map.width)));
  }
  return rows;
}

export function mount(root: HTMLElement, baseUrl: string): void {
  const state: AppState = {
    client: new Client(baseUrl),
    numDirections: 4,
    t: 0,
    predictorLoaded: false,
    imageId: null,
    imageWidth: 0,
    imageHeight: 0,
    blurry: null,
    ann: null,
    pending: [],
    baseLabels: null,
    highlightRegion: null,
    jobs: [],
    activeJob: null,
    frameIndex: 0,
    looping: false,
    loopTimer: null,
  };

  root.innerHTML = "";
  const status = el("div", "status", "connecting...");
  const errorBox = el("div", "error");
  const uploadRow = el("div", "row");
  const fileInput = el("input");
  fileInput.type = "file";
  fileInput.accept = "image/png";
  uploadRow.append(fileInput);

  const legendBox = el("div", "legend");
  const canvas = el("canvas", "paint");
  const annotationText = el("pre", "record");
  const controls = el("div", "row");
  const undoButton = el("button", "", "undo");
  const clearButton = el("button", "", "clear");
  const decomposeButton = el("button", "", "decompose");
  const flipButton = el("button", "", "flip directions");
  const proposalsButton = el("button", "", "proposals");
  controls.append(undoButton, clearButton, decomposeButton, flipButton,
    proposalsButton);

  const gallery = el("div", "gallery");
  const viewer = el("div", "viewer");
  const frameCanvas = el("canvas", "frame");
  const scrubber = el("input");
  scrubber.type = "range";
  scrubber.min = "0";
  scrubber.value = "0";
  const loopButton = el("button", "", "loop");
  const scoreBox = el("div", "score");
  const jobTabs = el("div", "tabs");
  viewer.append(frameCanvas, scrubber, loopButton, scoreBox, jobTabs);

  root.append(status, errorBox, uploadRow, legendBox, canvas, controls,
    annotationText, gallery, viewer);

  function showError(err: unknown): void {
    const message = err instanceof Error ? err.message : String(err);
    errorBox.textContent = message;
    const match = /region (\d+)/.exec(message);
    state.highlightRegion = match ? Number(match[1]) : null;
    drawCanvas();
  }

  function clearError(): void {
    errorBox.textContent = "";
    state.highlightRegion = null;
  }

  function drawLegend(): void {
    legendBox.innerHTML = "";
    for (const entry of buildLegend(state.numDirections)) {
      const chip = el("button", "chip", `${entry.arrow} ${entry.label}`);
      chip.style.borderColor = entry.color;
      chip.title = entry.name;
      if (state.ann && state.ann.brush === entry.label) {
        chip.style.background = entry.color;
      }
      chip.onclick = () => {
        if (!state.ann) return;
        state.ann = state.ann.withBrush(entry.label);
        drawLegend();
      };
      legendBox.append(chip);
    }
  }

  function drawCanvas(): void {
    if (!state.blurry) return;
    canvas.width = state.imageWidth * SCALE;
    canvas.height = state.imageHeight * SCALE;
    const ctx = canvas.getContext("2d");
    if (!ctx) return;
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(state.blurry, 0, 0, canvas.width, canvas.height);
    if (!state.ann) return;
    try {
      const map = effectiveLabels(state);
      ctx.globalAlpha = 0.45;
      for (let y = 0; y < map.height; y++) {
        for (let x = 0; x < map.width; x++) {
          const label = map.labels[y * map.width + x];
          if (!label) continue;
          ctx.fillStyle = labelColor(label, state.numDirections);
          ctx.fillRect(x * SCALE, y * SCALE, SCALE, SCALE);
        }
      }
      ctx.globalAlpha = 1.0;
    } catch {
      // a half-painted polygon can be momentarily invalid; outlines below
    }
    state.ann.regions.forEach((region, idx) => {
      ctx.strokeStyle = idx === state.highlightRegion ? "#ff1744" : "#ffffff";
      ctx.lineWidth = idx === state.highlightRegion ? 3 : 1;
      ctx.beginPath();
      region.vertices.forEach(([x, y], i) => {
        if (i === 0) ctx.moveTo(x * SCALE, y * SCALE);
        else ctx.lineTo(x * SCALE, y * SCALE);
      });
      ctx.closePath();
      ctx.stroke();
    });
    if (state.pending.length) {
      ctx.strokeStyle = "#ffd600";
      ctx.lineWidth = 2;
      ctx.beginPath();
      state.pending.forEach(([x, y], i) => {
        if (i === 0) ctx.moveTo(x * SCALE, y * SCALE);
        else ctx.lineTo(x * SCALE, y * SCALE);
      });
      ctx.stroke();
    }
    annotationText.textContent = state.ann.serialize();
  }

  function closePendingPolygon(): void {
    if (!state.ann || state.pending.length < 3) return;
    try {
      clearError();
      state.ann = state.ann.paintRegion(state.pending.slice());
      state.pending = [];
      drawCanvas();
    } catch (err) {
      showError(err);
    }
  }

  canvas.onclick = (event) => {
    if (!state.ann) return;
    const rect = canvas.getBoundingClientRect();
    const x = (event.clientX - rect.left) / SCALE;
    const y = (event.clientY - rect.top) / SCALE;
    state.pending.push([Math.min(state.imageWidth, Math.max(0, x)),
      Math.min(state.imageHeight, Math.max(0, y))]);
    drawCanvas();
  };
  canvas.ondblclick = closePendingPolygon;
  document.addEventListener("keydown", (event) => {
    if (event.key === "Enter") closePendingPolygon();
    if (event.key === "Escape") {
      state.pending = [];
      drawCanvas();
    }
  });

  undoButton.onclick = () => {
    if (!state.ann) return;
    state.ann = state.ann.undo();
    clearError();
    drawCanvas();
  };
  clearButton.onclick = () => {
    if (!state.ann) return;
    state.ann = CanvasAnnotation.empty(state.imageWidth, state.imageHeight,
      state.numDirections);
    state.baseLabels = null;
    state.pending = [];
    clearError();
    drawCanvas();
  };

  function setFrame(index: number): void {
    const job = state.activeJob === null ? null : state.jobs[state.activeJob];
    if (!job || !job.images.length) return;
    state.frameIndex = ((index % job.images.length) + job.images.length)
      % job.images.length;
    scrubber.max = String(job.images.length - 1);
    scrubber.value = String(state.frameIndex);
    const img = job.images[state.frameIndex];
    frameCanvas.width = state.imageWidth * SCALE;
    frameCanvas.height = state.imageHeight * SCALE;
    const ctx = frameCanvas.getContext("2d");
    if (!ctx) return;
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(img, 0, 0, frameCanvas.width, frameCanvas.height);
  }

  function stopLoop(): void {
    if (state.loopTimer !== null) window.clearInterval(state.loopTimer);
    state.loopTimer = null;
    state.looping = false;
    loopButton.textContent = "loop";
  }

  loopButton.onclick = () => {
    if (state.looping) {
      stopLoop();
      return;
    }
    state.looping = true;
    loopButton.textContent = "stop";
    state.loopTimer = window.setInterval(() => {
      setFrame(state.frameIndex + 1);
    }, 150);
  };
  scrubber.oninput = () => {
    stopLoop();
    setFrame(Number(scrubber.value));
  };

  function renderJobTabs(): void {
    jobTabs.innerHTML = "";
    state.jobs.forEach((job, idx) => {
      const tab = el("button", "tab", job.title);
      if (idx === state.activeJob) tab.style.fontWeight = "bold";
      tab.onclick = () => {
        state.activeJob = idx;
        renderJobTabs();
        showScore(job);
        setFrame(0);
      };
      jobTabs.append(tab);
    });
  }

  function showScore(job: Job): void {
    const sim = job.record.reversal_similarity;
    if (!sim) {
      scoreBox.textContent = "";
      return;
    }
    const mean = sim.mean_psnr === null ? "inf" : sim.mean_psnr.toFixed(2);
    const perFrame = sim.per_frame_psnr
      .map((p) => (p === null ? "inf" : p.toFixed(1))).join(" ");
    scoreBox.textContent = `reversal similarity vs job ${sim.compared_job}: ` +
      `${mean} dB (per frame: ${perFrame})`;
  }

  async function addJob(record: JobRecord, title: string): Promise<void> {
    const images = await Promise.all(
      record.frames.map((path) => loadImage(state.client.fileUrl(path))));
    state.jobs.push({ record, title, images });
    state.activeJob = state.jobs.length - 1;
    renderJobTabs();
    showScore(state.jobs[state.activeJob]);
    setFrame(0);
  }

  // the flip path inverts labels client-side (the overlay has to recolor
  // anyway), so the request body never sets the server-side invert flag
  async function requestDecompose(compareWithLast: boolean): Promise<void> {
    if (!state.imageId || !state.ann) return;
    clearError();
    try {
      const body = state.baseLabels
        ? { labels: labelsToRows(effectiveLabels(state)) }
        : { annotation: state.ann.serialize() };
      const lastJob = state.jobs.length
        ? state.jobs[state.jobs.length - 1].record.job : null;
      const record = await state.client.decompose(state.imageId,
        compareWithLast && lastJob !== null
          ? { ...body, compare_with: lastJob }
          : body);
      await addJob(record, compareWithLast ? `job ${record.job} (flipped)`
        : `job ${record.job}`);
    } catch (err) {
      showError(err);
    }
  }

  decomposeButton.onclick = () => void requestDecompose(false);
  flipButton.onclick = () => {
    if (!state.ann) return;
    // show the mirrored mode next to the current one: invert the painted
    // labels, re-request, and let the server score the reversal
    state.ann = state.ann.flipDirections();
    if (state.baseLabels) {
      const flipped = new Uint8Array(state.baseLabels.length);
      for (let i = 0; i < flipped.length; i++) {
        flipped[i] = invertLabel(state.baseLabels[i], state.numDirections);
      }
      state.baseLabels = flipped;
    }
    drawCanvas();
    void requestDecompose(true);
  };

  proposalsButton.onclick = async () => {
    if (!state.imageId) return;
    clearError();
    try {
      const response = await state.client.proposals(state.imageId, 3);
      gallery.innerHTML = "";
      for (const proposal of response.proposals) {
        const card = el("button", "card");
        const img = await loadImage(state.client.fileUrl(proposal.url));
        img.width = state.imageWidth * 2;
        img.height = state.imageHeight * 2;
        card.append(img, el("div", "",
          `static ${(proposal.static_fraction * 100).toFixed(0)}%`));
        card.onclick = async () => {
          state.baseLabels = await decodeLabelMap(
            state.client.fileUrl(proposal.url),
            state.imageWidth, state.imageHeight);
          state.ann = CanvasAnnotation.empty(state.imageWidth,
            state.imageHeight, state.numDirections);
          drawCanvas();
        };
        gallery.append(card);
      }
    } catch (err) {
      showError(err);
    }
  };

  fileInput.onchange = async () => {
    const file = fileInput.files && fileInput.files[0];
    if (!file) return;
    clearError();
    try {
      const uploaded = await state.client.uploadImage(
        await file.arrayBuffer());
      state.imageId = uploaded.id;
      state.imageWidth = uploaded.width;
      state.imageHeight = uploaded.height;
      state.numDirections = uploaded.guidance.num_directions;
      state.blurry = await loadImage(
        state.client.fileUrl(uploaded.blurry_url));
      state.ann = CanvasAnnotation.empty(uploaded.width, uploaded.height,
        state.numDirections);
      state.baseLabels = null;
      state.jobs = [];
      state.activeJob = null;
      gallery.innerHTML = "";
      status.textContent = `image ${uploaded.id} ` +
        `(${uploaded.width}x${uploaded.height})`;
      drawLegend();
      drawCanvas();
    } catch (err) {
      showError(err);
    }
  };

  state.client.health().then((health) => {
    state.numDirections = health.guidance.num_directions;
    state.t = health.t;
    state.predictorLoaded = health.predictor_loaded;
    proposalsButton.disabled = !health.predictor_loaded;
    status.textContent = `service ${health.version}, ` +
      `${health.guidance.num_directions} directions, t=${health.t}`;
    drawLegend();
  }, showError);
}
