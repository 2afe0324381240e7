"""HTTP service around a loaded decomposer (and optionally a predictor).

The service holds immutable model parameters and a filesystem store; each
uploaded image gets an id, and every decomposition runs as a numbered job
under that id, so repeated requests simply supersede older job numbers.
Handlers are plain sync functions (the framework runs them on a thread
pool); inference only reads model state, so concurrent requests are safe.
Frames and label maps are written as PNGs and referenced by URL rather
than inlined into responses.
"""

import io
import json
import os
import threading

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse
from PIL import Image

from . import __version__, dataio
from .evalkit import psnr
from .guidance import (MotionGuidance, invert_labels, parse_annotation,
                       rasterize_annotation, sector_center_degrees)
from .predictor import predict_multimodal
from .scenegen import BlurryImage


def _json_error(status, message):
    return JSONResponse(status_code=status, content={"error": message})


def _finite_or_none(value):
    return float(value) if np.isfinite(value) else None


def _legend(config):
    legend = {"0": "static"}
    for label, deg in enumerate(sector_center_degrees(config), start=1):
        legend[str(label)] = "%.1f deg" % deg
    return legend


class _Store:
    """Filesystem image store with sequential ids and job numbers."""

    def __init__(self, root):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self._lock = threading.Lock()
        self._images = {}

    def add_image(self, array):
        with self._lock:
            image_id = "img-%04d" % len(self._images)
            self._images[image_id] = {"shape": array.shape, "jobs": 0}
        image_dir = os.path.join(self.root, image_id)
        os.makedirs(image_dir, exist_ok=True)
        dataio.save_image(os.path.join(image_dir, "blurry.png"), array)
        np.save(os.path.join(image_dir, "blurry.npy"), array)
        return image_id

    def get(self, image_id):
        return self._images.get(image_id)

    def image_dir(self, image_id):
        return os.path.join(self.root, image_id)

    def load_blurry(self, image_id):
        return np.load(os.path.join(self.image_dir(image_id), "blurry.npy"))

    def next_job(self, image_id):
        with self._lock:
            job = self._images[image_id]["jobs"]
            self._images[image_id]["jobs"] = job + 1
        return job


def create_app(decomposer, predictor=None, store_dir=None):
    """Build the application; models are shared read-only across requests."""
    if store_dir is None:
        raise ValueError("store_dir is required")
    decomposer.eval()
    if predictor is not None:
        predictor.eval()
        if (predictor.config.guidance.to_dict()
                != decomposer.config.guidance.to_dict()):
            raise ValueError("predictor and decomposer guidance configs differ")
    app = FastAPI(title="blurdecomp", version=__version__)
    store = _Store(store_dir)
    gconf = decomposer.config.guidance
    gdict = gconf.to_dict()

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "version": __version__, "guidance": gdict,
                "t": decomposer.config.t,
                "predictor_loaded": predictor is not None}

    @app.post("/images")
    async def upload_image(request: Request):
        raw = await request.body()
        if not raw:
            return _json_error(400, "empty request body; send PNG bytes")
        try:
            with Image.open(io.BytesIO(raw)) as im:
                array = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except Exception:
            return _json_error(400, "request body is not a decodable image")
        h, w = array.shape[:2]
        if h % 4 != 0 or w % 4 != 0:
            return _json_error(
                422, "image size %dx%d is not divisible by 4" % (h, w))
        image_id = store.add_image(array)
        return {"id": image_id, "height": h, "width": w, "guidance": gdict,
                "blurry_url": "/images/%s/files/blurry.png" % image_id}

    @app.get("/images/{image_id}/guidance-proposals")
    def guidance_proposals(image_id: str, n: int = 3, seed: int = 0):
        if store.get(image_id) is None:
            return _json_error(404, "unknown image id %r" % image_id)
        if predictor is None:
            return _json_error(409, "no predictor checkpoint is loaded")
        if n < 1:
            return _json_error(400, "n must be at least 1")
        blurry = BlurryImage(store.load_blurry(image_id))
        samples = predict_multimodal(blurry, n, predictor, seed=seed)
        image_dir = store.image_dir(image_id)
        proposals = []
        for i, guid in enumerate(samples):
            name = "proposal_%03d.png" % i
            dataio.save_label_map(os.path.join(image_dir, name), guid.labels)
            proposals.append({
                "index": i,
                "url": "/images/%s/files/%s" % (image_id, name),
                "static_fraction": float((guid.labels == 0).mean()),
            })
        return {"id": image_id, "n": n, "seed": seed, "proposals": proposals,
                "legend": _legend(gconf), "guidance": gdict}

    def _guidance_from_request(image_id, payload):
        """Returns (MotionGuidance, error response or None)."""
        has_annotation = "annotation" in payload
        has_labels = "labels" in payload
        if has_annotation == has_labels:
            return None, _json_error(
                400, "body must carry exactly one of 'annotation' or 'labels'")
        shape = store.get(image_id)["shape"]
        if has_annotation:
            try:
                overlay = parse_annotation(payload["annotation"])
                guid = rasterize_annotation(overlay, gconf)
            except ValueError as exc:
                return None, _json_error(400, "invalid annotation: %s" % exc)
            if guid.labels.shape != shape[:2]:
                return None, _json_error(
                    409, "annotation canvas %sx%s does not match image %sx%s"
                    % (guid.labels.shape[1], guid.labels.shape[0],
                       shape[1], shape[0]))
            return guid, None
        try:
            labels = np.asarray(payload["labels"], dtype=np.float64)
        except (TypeError, ValueError):
            return None, _json_error(400, "labels must be a 2-d integer map")
        if labels.ndim != 2 or not np.all(labels == np.round(labels)):
            return None, _json_error(400, "labels must be a 2-d integer map")
        if labels.shape != shape[:2]:
            return None, _json_error(
                409, "label map %s does not match image size %s"
                % (labels.shape, shape[:2]))
        if labels.min() < 0 or labels.max() > gconf.num_directions:
            return None, _json_error(
                409, "label values exceed the loaded %d-direction config"
                % gconf.num_directions)
        return MotionGuidance(labels.astype(np.uint8), gconf), None

    @app.post("/images/{image_id}/decompose")
    def decompose_image(image_id: str, payload: dict):
        if store.get(image_id) is None:
            return _json_error(404, "unknown image id %r" % image_id)
        guid, err = _guidance_from_request(image_id, payload)
        if err is not None:
            return err
        if payload.get("invert", False):
            guid = invert_labels(guid)
        blurry = BlurryImage(store.load_blurry(image_id))
        sequence = decomposer.decompose(blurry, guid)
        job = store.next_job(image_id)
        job_name = "job_%03d" % job
        job_dir = os.path.join(store.image_dir(image_id), job_name)
        os.makedirs(job_dir, exist_ok=True)
        frames = []
        for t in range(len(sequence)):
            name = "frame_%03d.png" % t
            dataio.save_image(os.path.join(job_dir, name), sequence.frames[t])
            frames.append("/images/%s/files/%s/%s" % (image_id, job_name, name))
        np.save(os.path.join(job_dir, "frames.npy"), sequence.frames)
        dataio.save_label_map(os.path.join(job_dir, "guidance.png"), guid.labels)
        record = {"id": image_id, "job": job, "frames": frames,
                  "guidance_url": "/images/%s/files/%s/guidance.png"
                                  % (image_id, job_name),
                  "guidance": gdict}
        if "compare_with" in payload:
            try:
                compare_job = int(payload["compare_with"])
            except (TypeError, ValueError):
                return _json_error(400, "compare_with must be a job number")
            other_dir = os.path.join(store.image_dir(image_id),
                                     "job_%03d" % compare_job)
            other_path = os.path.join(other_dir, "frames.npy")
            if not os.path.exists(other_path):
                return _json_error(404, "compare_with job %r not found"
                                   % payload["compare_with"])
            other = np.load(other_path)
            per_frame = [
                _finite_or_none(psnr(sequence.frames[t],
                                     other[len(other) - 1 - t]))
                for t in range(len(sequence))
            ]
            finite = [p for p in per_frame if p is not None]
            record["reversal_similarity"] = {
                "compared_job": compare_job,
                "per_frame_psnr": per_frame,
                "mean_psnr": float(np.mean(finite)) if finite else None,
            }
        with open(os.path.join(job_dir, "record.json"), "w") as fh:
            json.dump(record, fh, indent=1)
        return record

    @app.get("/images/{image_id}/files/{file_path:path}")
    def get_file(image_id: str, file_path: str):
        if store.get(image_id) is None:
            return _json_error(404, "unknown image id %r" % image_id)
        full = os.path.realpath(os.path.join(store.image_dir(image_id),
                                             file_path))
        image_root = os.path.realpath(store.image_dir(image_id))
        if not full.startswith(image_root + os.sep) or not os.path.isfile(full):
            return _json_error(404, "no such file for image %r" % image_id)
        return FileResponse(full)

    return app
