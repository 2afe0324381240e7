"""Motion-guided blur decomposition network and its training loop.

The model maps a blurry image plus a quantized motion-guidance map to the
sequence of sharp frames whose average reproduces the blur. It runs in two
stages: a coarse encoder-decoder sees the blurry image and the encoded
guidance, and a refinement stage sees the same evidence plus the coarse
estimate and adds a residual correction. The refinement head starts at
zero, so at initialization the model is exactly its coarse stage.
"""

import csv
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from . import netcore
from .guidance import GuidanceConfig, MotionGuidance, encode_guidance, flip_labels, invert_labels
from .scenegen import BlurryImage, SharpSequence


@dataclass
class DecomposerConfig:
    t: int = 7
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    widths: tuple = (32, 64, 128)
    n_res_blocks: int = 2
    one_stage: bool = False
    residual_from_input: bool = True
    learning_rate: float = 2e-4
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0
    inverse_augmentation: bool = True
    crop_size: int = 48
    flip_augmentation: bool = True
    zero_guidance: bool = False

    def validate(self):
        if self.t < 2:
            raise ValueError("need at least 2 output frames, got t=%d" % self.t)
        if self.crop_size % 4 != 0:
            raise ValueError("crop_size must be divisible by 4")
        if self.flip_augmentation and self.guidance.num_directions == 2:
            raise ValueError(
                "flip augmentation is undefined for 2-direction guidance; "
                "disable flip_augmentation"
            )
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        return self

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["guidance"] = self.guidance.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["guidance"] = GuidanceConfig.from_dict(d["guidance"])
        d["widths"] = tuple(d["widths"])
        return cls(**d).validate()


def matched_one_stage(config):
    """One-stage ablation config with roughly the two-stage parameter count.

    Dropping the refinement stage halves the parameters, so the remaining
    stage gets its channel widths scaled by sqrt(2). Counts land within a
    few percent, close enough for a capacity-matched comparison.
    """
    widths = tuple(max(1, round(w * math.sqrt(2.0))) for w in config.widths)
    d = config.to_dict()
    d["one_stage"] = True
    d["widths"] = widths
    return DecomposerConfig.from_dict(d)


class TwoStageDecomposer(torch.nn.Module):
    """Coarse stage plus residual refinement (or just the coarse stage)."""

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        c_guid = config.guidance.bit_width
        c_out = 3 * config.t
        # with the input residual the coarse head starts at zero, so an
        # untrained model reproduces the blurry image in every frame; detail
        # never has to squeeze through the downsampling bottleneck
        self.s1 = netcore.EncoderDecoderStage(
            3 + c_guid, c_out, widths=config.widths,
            n_res_blocks=config.n_res_blocks,
            zero_init_output=config.residual_from_input)
        if config.one_stage:
            self.s2 = None
        else:
            self.s2 = netcore.EncoderDecoderStage(
                3 + c_guid + c_out, c_out, widths=config.widths,
                n_res_blocks=config.n_res_blocks, zero_init_output=True)

    def forward(self, blurry, genc):
        """blurry (B,3,H,W), genc (B,bit_width,H,W) -> (B,3T,H,W) unclamped."""
        netcore.expect_shape(blurry, (None, 3, None, None), "blurry")
        netcore.expect_shape(
            genc, (blurry.shape[0], self.config.guidance.bit_width,
                   blurry.shape[2], blurry.shape[3]), "encoded guidance")
        if self.config.zero_guidance:
            genc = torch.zeros_like(genc)
        coarse = self.s1(torch.cat([blurry, genc], dim=1))
        if self.config.residual_from_input:
            coarse = coarse + blurry.repeat(1, self.config.t, 1, 1)
        if self.s2 is None:
            return coarse
        return coarse + self.s2(torch.cat([blurry, genc, coarse], dim=1))

    def decompose(self, blurry, guidance):
        """Run inference on one image; returns a SharpSequence in [0,1]."""
        if not isinstance(blurry, BlurryImage):
            raise TypeError("expected a BlurryImage")
        if not isinstance(guidance, MotionGuidance):
            raise TypeError("expected a MotionGuidance")
        if guidance.config.to_dict() != self.config.guidance.to_dict():
            raise ValueError("guidance config does not match the model config")
        h, w = blurry.image.shape[:2]
        if guidance.labels.shape != (h, w):
            raise ValueError("guidance shape %r does not match image %r"
                             % (guidance.labels.shape, (h, w)))
        if h % 4 != 0 or w % 4 != 0:
            raise ValueError("image size %dx%d not divisible by 4" % (h, w))
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                bt = torch.from_numpy(
                    blurry.image.astype(np.float32).transpose(2, 0, 1)[None])
                genc = encode_guidance(guidance)
                gt = torch.from_numpy(
                    np.ascontiguousarray(genc.transpose(2, 0, 1))[None])
                out = self(bt, gt).clamp(0.0, 1.0)
        finally:
            self.train(was_training)
        frames = out[0].reshape(self.config.t, 3, h, w).permute(0, 2, 3, 1)
        return SharpSequence(frames.numpy().copy())


def build_decomposer(config):
    model = TwoStageDecomposer(config)
    netcore.init_parameters(model, torch.Generator().manual_seed(config.seed))
    return model


def save_decomposer(path, model):
    netcore.save_checkpoint(path, model, config={"kind": "decomposer",
                                                 "config": model.config.to_dict()})


def load_decomposer(path):
    state, header = netcore.load_checkpoint(path)
    if header.get("kind") != "decomposer":
        raise ValueError("%s is not a decomposer checkpoint" % path)
    model = TwoStageDecomposer(DecomposerConfig.from_dict(header["config"]))
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# training


def _triplet_arrays(triplet):
    blurry = triplet.blurry.image.astype(np.float32)
    frames = triplet.sharp.frames.astype(np.float32)
    labels = triplet.guidance.labels
    return blurry, frames, labels


def _augmented_sample(triplet, config, rng):
    """Crop/flip/inverse-augment one triplet into network arrays."""
    blurry, frames, labels = _triplet_arrays(triplet)
    gconf = config.guidance
    h, w = labels.shape
    c = min(config.crop_size, h, w)
    c -= c % 4
    y0 = int(rng.integers(0, h - c + 1))
    x0 = int(rng.integers(0, w - c + 1))
    blurry = blurry[y0:y0 + c, x0:x0 + c]
    frames = frames[:, y0:y0 + c, x0:x0 + c]
    labels = labels[y0:y0 + c, x0:x0 + c]
    guid = MotionGuidance(np.ascontiguousarray(labels), gconf)
    if config.flip_augmentation:
        if rng.random() < 0.5:
            blurry = blurry[:, ::-1]
            frames = frames[:, :, ::-1]
            guid = flip_labels(guid, "horizontal")
        if rng.random() < 0.5:
            blurry = blurry[::-1]
            frames = frames[:, ::-1]
            guid = flip_labels(guid, "vertical")
    if config.inverse_augmentation and rng.random() < 0.5:
        frames = frames[::-1]
        guid = invert_labels(guid)
    genc = encode_guidance(guid)
    x_b = np.ascontiguousarray(blurry.transpose(2, 0, 1))
    x_g = np.ascontiguousarray(genc.transpose(2, 0, 1))
    y = np.ascontiguousarray(frames.transpose(0, 3, 1, 2)).reshape(-1, c, c)
    return x_b, x_g, y


def _center_crop_batch(triplets, config):
    """Deterministic center-crop tensors for validation."""
    xs_b, xs_g, ys = [], [], []
    for triplet in triplets:
        blurry, frames, labels = _triplet_arrays(triplet)
        h, w = labels.shape
        c = min(config.crop_size, h, w)
        c -= c % 4
        y0, x0 = (h - c) // 2, (w - c) // 2
        blurry = blurry[y0:y0 + c, x0:x0 + c]
        frames = frames[:, y0:y0 + c, x0:x0 + c]
        labels = labels[y0:y0 + c, x0:x0 + c]
        genc = encode_guidance(MotionGuidance(np.ascontiguousarray(labels),
                                              config.guidance))
        xs_b.append(np.ascontiguousarray(blurry.transpose(2, 0, 1)))
        xs_g.append(np.ascontiguousarray(genc.transpose(2, 0, 1)))
        ys.append(np.ascontiguousarray(frames.transpose(0, 3, 1, 2)).reshape(-1, c, c))
    return (torch.from_numpy(np.stack(xs_b)),
            torch.from_numpy(np.stack(xs_g)),
            torch.from_numpy(np.stack(ys)))


def validation_loss(model, triplets, config):
    if not triplets:
        return float("nan")
    xb, xg, y = _center_crop_batch(triplets, config)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            losses = []
            for i in range(0, len(triplets), config.batch_size):
                pred = model(xb[i:i + config.batch_size], xg[i:i + config.batch_size])
                losses.append(F.mse_loss(pred, y[i:i + config.batch_size]).item()
                              * min(config.batch_size, len(triplets) - i))
    finally:
        model.train(was_training)
    return float(sum(losses) / len(triplets))


def train_decomposer(train_triplets, config, val_triplets=None, log_path=None,
                     quiet=True):
    """Train on triplets; returns (model, history).

    history is a list of per-epoch dicts (epoch, lr, train_loss, val_loss).
    Runs are bit-reproducible for a fixed config and single-threaded torch.
    """
    config.validate()
    if not train_triplets:
        raise ValueError("empty training set")
    for tri in train_triplets:
        if len(tri.sharp) != config.t:
            raise ValueError("triplet has %d frames, config expects %d"
                             % (len(tri.sharp), config.t))
        if tri.guidance.config.to_dict() != config.guidance.to_dict():
            raise ValueError("triplet guidance config does not match")
    torch.manual_seed(config.seed)
    model = build_decomposer(config)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_triplets))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            xs_b, xs_g, ys = [], [], []
            for i in batch_idx:
                x_b, x_g, y = _augmented_sample(train_triplets[i], config, rng)
                xs_b.append(x_b)
                xs_g.append(x_g)
                ys.append(y)
            xb = torch.from_numpy(np.stack(xs_b))
            xg = torch.from_numpy(np.stack(xs_g))
            y = torch.from_numpy(np.stack(ys))
            pred = model(xb, xg)
            loss = F.mse_loss(pred, y)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    "non-finite training loss at epoch %d step %d (lr %.2e)"
                    % (epoch, start // config.batch_size,
                       opt.param_groups[0]["lr"]))
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
        row = {
            "epoch": epoch,
            "lr": opt.param_groups[0]["lr"],
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": validation_loss(model, val_triplets or [], config),
        }
        sched.step()
        history.append(row)
        if not quiet:
            print("epoch %3d  lr %.2e  train %.6f  val %.6f"
                  % (row["epoch"], row["lr"], row["train_loss"], row["val_loss"]))
    if log_path is not None:
        write_history(log_path, history)
    return model, history


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0].keys()))
        writer.writeheader()
        writer.writerows(history)


def read_history(path):
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]
