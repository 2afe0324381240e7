"""On-disk layout for triplet datasets.

A dataset root holds one directory per split, one directory per scene:

    <root>/<split>/<scene_id>/
        blurry.png          gamma-encoded observation, 8-bit
        sharp_000.png ...   sampled sharp targets, 8-bit
        guidance.png        label map stored directly as 8-bit grayscale
        flows.bin           exact sampled-step flows, binary (see below)
        meta.json           gamma, frame counts, guidance config, scene notes

flows.bin is a 16-byte magic header, four little-endian uint32 dims
(T-1, H, W, 2), then float32 little-endian data in that order.  PNGs
quantize image values to 8 bits; label maps and flows survive exactly.
"""

import json
import os

import numpy as np
from PIL import Image

from . import guidance as guidance_mod
from . import scenegen

FLOWS_MAGIC = b"blurflows-v1\x00\x00\x00\x00"


def save_image(path, image):
    """Write a float image in [0, 1] as 8-bit PNG (round half up)."""
    arr = np.asarray(image)
    data = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_image(path):
    """Read an 8-bit PNG back to float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_label_map(path, labels):
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path)


def load_label_map(path):
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.uint8)


def save_flows(path, flows):
    """Serialize a list of FlowField (or (H, W, 2) arrays) to flows.bin."""
    arrays = [np.asarray(getattr(f, "flow", f), dtype="<f4") for f in flows]
    if not arrays:
        raise ValueError("cannot save an empty flow list")
    h, w = arrays[0].shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLOWS_MAGIC)
        header = np.array([len(arrays), h, w, 2], dtype="<u4")
        fh.write(header.tobytes())
        for a in arrays:
            if a.shape != (h, w, 2):
                raise ValueError("flow shapes disagree within one file")
            fh.write(a.tobytes())


def load_flows(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(FLOWS_MAGIC))
        if magic != FLOWS_MAGIC:
            raise ValueError("%s is not a flows file (bad magic)" % path)
        dims = np.frombuffer(fh.read(16), dtype="<u4")
        count, h, w, two = (int(d) for d in dims)
        if two != 2:
            raise ValueError("flows file has unexpected vector width %d" % two)
        data = np.frombuffer(fh.read(count * h * w * 2 * 4), dtype="<f4")
    if data.size != count * h * w * 2:
        raise ValueError("flows file is truncated")
    data = data.reshape(count, h, w, 2)
    return [scenegen.FlowField(data[i].copy()) for i in range(count)]


def save_triplet(scene_dir, triplet, meta=None):
    """Write one triplet into scene_dir, creating it if needed."""
    os.makedirs(scene_dir, exist_ok=True)
    save_image(os.path.join(scene_dir, "blurry.png"), triplet.blurry.image)
    for i in range(len(triplet.sharp)):
        save_image(os.path.join(scene_dir, "sharp_%03d.png" % i), triplet.sharp.frames[i])
    save_label_map(os.path.join(scene_dir, "guidance.png"), triplet.guidance.labels)
    save_flows(os.path.join(scene_dir, "flows.bin"), triplet.flows)
    record = {
        "gamma": triplet.blurry.gamma,
        "source_count": triplet.blurry.source_count,
        "t": len(triplet.sharp),
        "guidance": triplet.guidance.config.to_dict(),
    }
    if meta:
        record.update(meta)
    with open(os.path.join(scene_dir, "meta.json"), "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)


def load_triplet(scene_dir):
    """Read a triplet back; images carry 8-bit quantization, flows are exact."""
    with open(os.path.join(scene_dir, "meta.json")) as fh:
        meta = json.load(fh)
    config = guidance_mod.GuidanceConfig.from_dict(meta["guidance"])
    blurry = scenegen.BlurryImage(
        load_image(os.path.join(scene_dir, "blurry.png")),
        gamma=meta["gamma"],
        source_count=meta["source_count"],
    )
    frames = []
    for i in range(meta["t"]):
        frames.append(load_image(os.path.join(scene_dir, "sharp_%03d.png" % i)))
    sharp = scenegen.SharpSequence(np.stack(frames))
    labels = load_label_map(os.path.join(scene_dir, "guidance.png"))
    g = guidance_mod.MotionGuidance(labels, config)
    flows = load_flows(os.path.join(scene_dir, "flows.bin"))
    return scenegen.TrainingTriplet(blurry=blurry, guidance=g, sharp=sharp, flows=flows), meta


def list_scenes(split_dir):
    """Scene directories under one split, sorted by name."""
    if not os.path.isdir(split_dir):
        return []
    out = []
    for name in sorted(os.listdir(split_dir)):
        path = os.path.join(split_dir, name)
        if os.path.isdir(path) and os.path.exists(os.path.join(path, "meta.json")):
            out.append(path)
    return out


def load_split(root, split):
    """Load every triplet of a split; returns (triplets, metas)."""
    triplets = []
    metas = []
    for scene_dir in list_scenes(os.path.join(root, split)):
        t, m = load_triplet(scene_dir)
        triplets.append(t)
        metas.append(m)
    return triplets, metas
