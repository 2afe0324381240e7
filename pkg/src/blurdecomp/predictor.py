"""Multi-modal motion guidance prediction.

A blurry image usually admits several physically consistent motion
assignments (at minimum, every motion reversed). This module learns a
conditional sampler over quantized guidance maps: an encoder turns a ground
truth guidance map into a small latent code, a generator decodes a latent
plus the blurry image into per-pixel label logits, and a patch
discriminator pushes sampled maps toward the real label statistics.
Training combines the three usual terms (adversarial, reconstruction, KL);
reconstruction is per-pixel cross-entropy since labels are discrete.
"""

import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import netcore
from .guidance import GuidanceConfig, MotionGuidance, _encoding_table, invert_labels, flip_labels
from .scenegen import BlurryImage


@dataclass
class PredictorConfig:
    d_z: int = 8
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    widths: tuple = (32, 64, 128)
    n_res_blocks: int = 2
    encoder_width: int = 32
    disc_width: int = 32
    lambda_gan: float = 0.1
    lambda_vae: float = 10.0
    lambda_kl: float = 0.1
    tau_start: float = 1.0
    tau_end: float = 0.5
    learning_rate: float = 2e-4
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0
    crop_size: int = 32
    flip_augmentation: bool = False

    def validate(self):
        if self.d_z < 1:
            raise ValueError("d_z must be at least 1")
        if min(self.lambda_gan, self.lambda_vae, self.lambda_kl) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ValueError("Gumbel temperatures must be positive")
        if self.crop_size % 4 != 0:
            raise ValueError("crop_size must be divisible by 4")
        if self.flip_augmentation and self.guidance.num_directions == 2:
            raise ValueError("flips are undefined for 2-direction guidance")
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


def kl_divergence(mu, logvar):
    """KL(N(mu, diag(exp(logvar))) || N(0, I)) per sample, closed form."""
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=1)


def encoding_table_tensor(config):
    return torch.from_numpy(_encoding_table(config.num_directions).astype(np.float32))


def soft_encode(class_maps, table):
    """Map (B, K+1, H, W) class probabilities (or one-hots) to sign channels.

    A hard one-hot lands exactly on the same {-1,0,+1} code the real labels
    use, so the discriminator sees the two distributions on a common footing.
    """
    return torch.einsum("bkhw,kc->bchw", class_maps, table)


class GuidanceEncoder(nn.Module):
    """Guidance map -> (mu, logvar) of the latent code."""

    def __init__(self, in_channels, d_z, width=32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(width, width * 2, 4, stride=2, padding=1)
        self.conv3 = nn.Conv2d(width * 2, width * 2, 4, stride=2, padding=1)
        self.fc_mu = nn.Linear(width * 2, d_z)
        self.fc_logvar = nn.Linear(width * 2, d_z)

    def forward(self, genc):
        h = F.relu(self.conv1(genc))
        h = F.relu(self.conv2(h))
        h = F.relu(self.conv3(h))
        h = h.mean(dim=(2, 3))
        return self.fc_mu(h), self.fc_logvar(h)


class GuidanceGenerator(nn.Module):
    """(z, blurry) -> per-pixel logits over num_directions + 1 classes."""

    def __init__(self, config):
        super().__init__()
        self.d_z = config.d_z
        self.stage = netcore.EncoderDecoderStage(
            3 + config.d_z, config.guidance.num_directions + 1,
            widths=config.widths, n_res_blocks=config.n_res_blocks)

    def forward(self, blurry, z):
        netcore.expect_shape(z, (blurry.shape[0], self.d_z), "latent code")
        zmap = z[:, :, None, None].expand(-1, -1, blurry.shape[2], blurry.shape[3])
        return self.stage(torch.cat([blurry, zmap], dim=1))


class PatchDiscriminator(nn.Module):
    """Strided conv stack scoring (blurry, guidance-encoding) patches."""

    def __init__(self, in_channels, width=32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(width, width * 2, 4, stride=2, padding=1)
        self.conv3 = nn.Conv2d(width * 2, width * 2, 3, padding=1)
        self.head = nn.Conv2d(width * 2, 1, 3, padding=1)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        h = F.leaky_relu(self.conv3(h), 0.2)
        return self.head(h)


class PredictorModel(nn.Module):
    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        bw = config.guidance.bit_width
        self.encoder = GuidanceEncoder(bw, config.d_z, config.encoder_width)
        self.generator = GuidanceGenerator(config)
        self.discriminator = PatchDiscriminator(3 + bw, config.disc_width)


def build_predictor(config):
    model = PredictorModel(config)
    netcore.init_parameters(model, torch.Generator().manual_seed(config.seed))
    return model


def save_predictor(path, model):
    netcore.save_checkpoint(path, model, config={"kind": "predictor",
                                                 "config": model.config.to_dict()})


def load_predictor(path):
    state, header = netcore.load_checkpoint(path)
    if header.get("kind") != "predictor":
        raise ValueError("%s is not a predictor checkpoint" % path)
    model = PredictorModel(PredictorConfig.from_dict(header["config"]))
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# inference API on domain objects


def _blurry_tensor(blurry):
    if not isinstance(blurry, BlurryImage):
        raise TypeError("expected a BlurryImage")
    h, w = blurry.image.shape[:2]
    if h % 4 != 0 or w % 4 != 0:
        raise ValueError("image size %dx%d not divisible by 4" % (h, w))
    return torch.from_numpy(blurry.image.astype(np.float32).transpose(2, 0, 1)[None])


def _guidance_tensor(guidance, config):
    if guidance.config.to_dict() != config.to_dict():
        raise ValueError("guidance config does not match the model config")
    table = _encoding_table(config.num_directions)
    return torch.from_numpy(
        np.ascontiguousarray(table[guidance.labels].transpose(2, 0, 1))[None])


def encode_latent(guidance, model):
    """Posterior parameters for one guidance map: (mu, logvar), each (d_z,)."""
    genc = _guidance_tensor(guidance, model.config.guidance)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            mu, logvar = model.encoder(genc)
    finally:
        model.train(was_training)
    return mu[0].numpy().copy(), logvar[0].numpy().copy()


def sample_guidance(blurry, z, model):
    """Decode one latent against a blurry image.

    Returns (MotionGuidance, logits) where logits is (K+1, H, W); labels are
    the per-pixel argmax.
    """
    z = np.asarray(z, dtype=np.float32)
    if z.shape != (model.config.d_z,):
        raise ValueError("latent must have shape (%d,), got %s"
                         % (model.config.d_z, z.shape))
    bt = _blurry_tensor(blurry)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model.generator(bt, torch.from_numpy(z)[None])
    finally:
        model.train(was_training)
    labels = logits[0].argmax(dim=0).numpy().astype(np.uint8)
    return (MotionGuidance(labels, model.config.guidance),
            logits[0].numpy().copy())


def predict_multimodal(blurry, n, model, seed=0):
    """n guidance samples from independent standard-normal latents.

    Latents are drawn sequentially from one seeded stream, so the first
    samples of a larger n reproduce a smaller n exactly.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    gen = torch.Generator().manual_seed(seed)
    zs = torch.randn(n, model.config.d_z, generator=gen)
    bt = _blurry_tensor(blurry)
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for i in range(n):
                logits = model.generator(bt, zs[i:i + 1])
                labels = logits[0].argmax(dim=0).numpy().astype(np.uint8)
                out.append(MotionGuidance(labels, model.config.guidance))
    finally:
        model.train(was_training)
    return out


# ---------------------------------------------------------------------------
# training


def class_weights(label_maps, num_classes):
    """Inverse-frequency weights, normalized to mean 1 over present classes."""
    counts = np.zeros(num_classes, dtype=np.float64)
    for labels in label_maps:
        counts += np.bincount(labels.ravel(), minlength=num_classes)
    present = counts > 0
    weights = np.zeros(num_classes, dtype=np.float64)
    weights[present] = counts[present].sum() / (present.sum() * counts[present])
    if weights[present].size:
        weights[present] /= weights[present].mean()
    return torch.from_numpy(weights.astype(np.float32))


def _predictor_pairs(triplets, config):
    """Blurry/label training pairs with both time directions per scene."""
    pairs = []
    for tri in triplets:
        if tri.guidance.config.to_dict() != config.guidance.to_dict():
            raise ValueError("triplet guidance config does not match")
        blurry = tri.blurry.image.astype(np.float32)
        pairs.append((blurry, tri.guidance.labels.copy()))
        pairs.append((blurry, invert_labels(tri.guidance).labels))
    return pairs


def _crop_flip(blurry, labels, config, rng):
    h, w = labels.shape
    c = min(config.crop_size, h, w)
    c -= c % 4
    y0 = int(rng.integers(0, h - c + 1))
    x0 = int(rng.integers(0, w - c + 1))
    blurry = blurry[y0:y0 + c, x0:x0 + c]
    labels = labels[y0:y0 + c, x0:x0 + c]
    if config.flip_augmentation:
        guid = MotionGuidance(np.ascontiguousarray(labels), config.guidance)
        if rng.random() < 0.5:
            blurry = blurry[:, ::-1]
            guid = flip_labels(guid, "horizontal")
        if rng.random() < 0.5:
            blurry = blurry[::-1]
            guid = flip_labels(guid, "vertical")
        labels = guid.labels
    return (np.ascontiguousarray(blurry.transpose(2, 0, 1)),
            np.ascontiguousarray(labels))


def gumbel_temperature(epoch, config):
    if config.epochs <= 1:
        return config.tau_end
    frac = epoch / (config.epochs - 1)
    return config.tau_start + (config.tau_end - config.tau_start) * frac


def train_predictor(train_triplets, config, val_triplets=None, log_path=None,
                    quiet=True):
    """Train the sampler on triplets; returns (model, history).

    Every scene contributes both time directions, so each blurry image has
    at least two valid guidance labelings in the data. History rows carry
    the three loss components plus discriminator stats per epoch.
    """
    config.validate()
    if not train_triplets:
        raise ValueError("empty training set")
    pairs = _predictor_pairs(train_triplets, config)
    val_pairs = _predictor_pairs(val_triplets or [], config)
    k1 = config.guidance.num_directions + 1
    weights = class_weights([p[1] for p in pairs], k1)
    torch.manual_seed(config.seed)
    model = build_predictor(config)
    model.train()
    table = encoding_table_tensor(config.guidance)
    g_params = list(model.encoder.parameters()) + list(model.generator.parameters())
    opt_g = torch.optim.Adam(g_params, lr=config.learning_rate)
    opt_d = torch.optim.Adam(model.discriminator.parameters(),
                             lr=config.learning_rate)
    noise = torch.Generator().manual_seed(config.seed + 1)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        tau = gumbel_temperature(epoch, config)
        order = rng.permutation(len(pairs))
        sums = {"ce": 0.0, "kl": 0.0, "gan_g": 0.0, "gan_d": 0.0, "d_acc": 0.0}
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xs, ys = [], []
            for i in idx:
                xb, lab = _crop_flip(pairs[i][0], pairs[i][1], config, rng)
                xs.append(xb)
                ys.append(lab)
            xb = torch.from_numpy(np.stack(xs))
            labels = torch.from_numpy(np.stack(ys).astype(np.int64))
            real_enc = soft_encode(
                F.one_hot(labels, k1).permute(0, 3, 1, 2).float(), table)
            mu, logvar = model.encoder(real_enc)
            eps = torch.randn(mu.shape, generator=noise)
            z = mu + torch.exp(0.5 * logvar) * eps
            logits = model.generator(xb, z)
            ce = F.cross_entropy(logits, labels, weight=weights)
            kl = kl_divergence(mu, logvar).mean()
            gan_g = torch.zeros(())
            d_loss = torch.zeros(())
            d_acc = 0.0
            if config.lambda_gan > 0:
                # the adversarial pair uses a prior draw: inference samples
                # z from N(0,1), so that is the map distribution the
                # discriminator needs to police
                z_prior = torch.randn(mu.shape, generator=noise)
                prior_logits = model.generator(xb, z_prior)
                fake_onehot = netcore.gumbel_softmax(prior_logits,
                                                     temperature=tau,
                                                     hard=True, generator=noise)
                fake_enc = soft_encode(fake_onehot, table)
                d_real = model.discriminator(torch.cat([xb, real_enc], dim=1))
                d_fake = model.discriminator(
                    torch.cat([xb, fake_enc.detach()], dim=1))
                d_loss = 0.5 * (((d_real - 1.0) ** 2).mean()
                                + (d_fake ** 2).mean())
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
                d_acc = 0.5 * ((d_real > 0.5).float().mean().item()
                               + (d_fake < 0.5).float().mean().item())
                gan_g = ((model.discriminator(
                    torch.cat([xb, fake_enc], dim=1)) - 1.0) ** 2).mean()
            total = (config.lambda_gan * gan_g + config.lambda_vae * ce
                     + config.lambda_kl * kl)
            if not torch.isfinite(total):
                raise RuntimeError(
                    "non-finite predictor loss at epoch %d step %d "
                    "(ce %.3g kl %.3g gan %.3g)"
                    % (epoch, start // config.batch_size, ce.item(),
                       kl.item(), gan_g.item()))
            opt_g.zero_grad()
            total.backward()
            opt_g.step()
            sums["ce"] += ce.item()
            sums["kl"] += kl.item()
            sums["gan_g"] += gan_g.item()
            sums["gan_d"] += d_loss.item()
            sums["d_acc"] += d_acc
            n_batches += 1
        row = {k: v / n_batches for k, v in sums.items()}
        row["epoch"] = epoch
        row["tau"] = tau
        row["val_ce"] = _validation_ce(model, val_pairs, config, weights, table)
        if config.lambda_gan > 0 and row["d_acc"] >= 1.0:
            row["collapse_warning"] = 1
            warnings.warn("discriminator at 100%% accuracy through epoch %d; "
                          "generator gradients may vanish" % epoch)
        else:
            row["collapse_warning"] = 0
        history.append(row)
        if not quiet:
            print("epoch %3d  ce %.4f  kl %.3f  gan_g %.3f  d_acc %.2f  val_ce %s"
                  % (epoch, row["ce"], row["kl"], row["gan_g"], row["d_acc"],
                     "%.4f" % row["val_ce"] if val_pairs else "-"))
    if log_path is not None:
        from .decomposer import write_history
        write_history(log_path, history)
    return model, history


def _validation_ce(model, val_pairs, config, weights, table):
    """Posterior-path reconstruction cross-entropy on held-out pairs."""
    if not val_pairs:
        return float("nan")
    was_training = model.training
    model.eval()
    total = 0.0
    try:
        with torch.no_grad():
            for blurry, labels in val_pairs:
                h, w = labels.shape
                c = min(config.crop_size, h, w)
                c -= c % 4
                y0, x0 = (h - c) // 2, (w - c) // 2
                xb = torch.from_numpy(np.ascontiguousarray(
                    blurry[y0:y0 + c, x0:x0 + c].transpose(2, 0, 1))[None])
                lab = torch.from_numpy(np.ascontiguousarray(
                    labels[y0:y0 + c, x0:x0 + c]).astype(np.int64))[None]
                k1 = config.guidance.num_directions + 1
                real_enc = soft_encode(
                    F.one_hot(lab, k1).permute(0, 3, 1, 2).float(), table)
                mu, _ = model.encoder(real_enc)
                logits = model.generator(xb, mu)
                total += F.cross_entropy(logits, lab, weight=weights).item()
    finally:
        model.train(was_training)
    return total / len(val_pairs)
