"""Shared neural building blocks.

Both trainable models in this package (the frame decomposer and the guidance
predictor) are assembled from the same parts: an encoder-decoder stage with
two stride-2 levels and a residual bottleneck, Gumbel-Softmax sampling for
discrete label maps, deterministic parameter initialization, a finite
difference gradient checker, and a small self-describing checkpoint format.
"""

import json
import math
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"BLURDECOMP-CKPT1"


def expect_shape(tensor, shape, name="tensor"):
    """Check a tensor against a shape template where None means "any size"."""
    if tensor.dim() != len(shape):
        raise ValueError(
            "%s: expected %d dims %r, got shape %r"
            % (name, len(shape), shape, tuple(tensor.shape))
        )
    for i, want in enumerate(shape):
        if want is not None and tensor.shape[i] != want:
            raise ValueError(
                "%s: expected shape %r, got %r" % (name, shape, tuple(tensor.shape))
            )
    return tensor


class ResidualBlock(nn.Module):
    """conv-bn-relu-conv-bn with an additive skip, relu on the way out."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(x + h)


class EncoderDecoderStage(nn.Module):
    """Encoder-decoder stage preserving spatial size.

    Structure: a 3x3 stem, two stride-2 downsampling convolutions, a
    bottleneck of residual blocks, two stride-2 transposed convolutions
    back up, and a 3x3 output head. Batch norm and relu follow every
    convolution except the output head.

    Input height and width must be divisible by 4 so the two stride-2
    levels invert exactly; anything else raises instead of silently
    padding. With zero_init_output the head starts at zero, so a stage
    used as an additive refinement begins as the identity.
    """

    def __init__(self, in_channels, out_channels, widths=(32, 64, 128),
                 n_res_blocks=2, zero_init_output=False):
        super().__init__()
        if len(widths) != 3 or any(w <= 0 for w in widths):
            raise ValueError("widths must be three positive channel counts")
        if n_res_blocks < 1:
            raise ValueError("need at least one residual block")
        d0, d1, d2 = widths
        self.stem = nn.Conv2d(in_channels, d0, 3, padding=1)
        self.stem_bn = nn.BatchNorm2d(d0)
        self.down1 = nn.Conv2d(d0, d1, 4, stride=2, padding=1)
        self.down1_bn = nn.BatchNorm2d(d1)
        self.down2 = nn.Conv2d(d1, d2, 4, stride=2, padding=1)
        self.down2_bn = nn.BatchNorm2d(d2)
        self.blocks = nn.ModuleList(ResidualBlock(d2) for _ in range(n_res_blocks))
        self.up1 = nn.ConvTranspose2d(d2, d1, 4, stride=2, padding=1)
        self.up1_bn = nn.BatchNorm2d(d1)
        self.up2 = nn.ConvTranspose2d(d1, d0, 4, stride=2, padding=1)
        self.up2_bn = nn.BatchNorm2d(d0)
        self.head = nn.Conv2d(d0, out_channels, 3, padding=1)
        self.zero_init_output = zero_init_output
        if zero_init_output:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        expect_shape(x, (None, self.stem.in_channels, None, None), "stage input")
        h, w = x.shape[-2], x.shape[-1]
        if h % 4 != 0 or w % 4 != 0:
            raise ValueError(
                "spatial size %dx%d not divisible by 4; crop or pad the input first"
                % (h, w)
            )
        y = F.relu(self.stem_bn(self.stem(x)))
        y = F.relu(self.down1_bn(self.down1(y)))
        y = F.relu(self.down2_bn(self.down2(y)))
        for block in self.blocks:
            y = block(y)
        y = F.relu(self.up1_bn(self.up1(y)))
        y = F.relu(self.up2_bn(self.up2(y)))
        return self.head(y)


def init_parameters(module, generator):
    """Reinitialize conv and norm layers with an explicit RNG.

    Convolutions get fan-in scaled uniform weights (the usual torch range),
    norm layers reset to weight 1 / bias 0. Driving every draw through the
    supplied generator makes two same-seed builds bit-identical regardless
    of construction order elsewhere in the process. Output heads that were
    zero-initialized stay at zero.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            w = m.weight
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = w.shape[0] * w.shape[2] * w.shape[3]
            else:
                fan_in = w.shape[1] * w.shape[2] * w.shape[3]
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                w.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(m, nn.BatchNorm2d):
            m.reset_parameters()
            m.reset_running_stats()
    # restore any zero-initialized heads the uniform pass overwrote
    for m in module.modules():
        if isinstance(m, EncoderDecoderStage) and m.zero_init_output:
            with torch.no_grad():
                m.head.weight.zero_()
                m.head.bias.zero_()
    return module


def gumbel_softmax(logits, temperature=1.0, hard=False, dim=1, noise=True,
                   generator=None):
    """Sample from a categorical relaxation of per-pixel class logits.

    Soft mode returns rows on the probability simplex. Hard mode returns
    exact one-hot vectors in the forward pass while gradients flow through
    the soft relaxation (straight-through). noise=False skips the Gumbel
    perturbation, which turns the call into a plain (or hardened) softmax.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive, got %r" % (temperature,))
    scores = logits
    if noise:
        u = torch.rand(logits.shape, dtype=logits.dtype, device=logits.device,
                       generator=generator)
        tiny = torch.finfo(logits.dtype).tiny
        neg_log_u = (-torch.log(u.clamp_min(tiny))).clamp_min(tiny)
        scores = logits - torch.log(neg_log_u)
    y = torch.softmax(scores / temperature, dim=dim)
    if hard:
        index = y.argmax(dim=dim, keepdim=True)
        y_hard = torch.zeros_like(y).scatter_(dim, index, 1.0)
        # parentheses matter: the soft term must cancel exactly so the
        # forward value is a true one-hot
        y = y_hard + (y - y.detach())
    return y


def grad_check(f, params, epsilon=1e-5, max_evals=None):
    """Compare autograd gradients of a scalar loss to central differences.

    f is a zero-argument callable returning a scalar tensor; it must be
    deterministic (freeze any noise source before calling). params are the
    float64 leaf tensors to probe. Returns the maximum relative error
    |analytic - numeric| / (|analytic| + |numeric| + 1e-8) over the probed
    coordinates. max_evals caps the probed coordinates per tensor, spread
    evenly, for when exhaustive probing is too slow.
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("grad_check requires float64 parameters")
        p.requires_grad_(True)
        p.grad = None
    loss = f()
    if not torch.isfinite(loss):
        raise ValueError("loss is not finite: %r" % loss)
    loss.backward()
    analytic = [
        (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for p in params
    ]
    worst = 0.0
    with torch.no_grad():
        for p, grad in zip(params, analytic):
            flat = p.reshape(-1)
            grad_flat = grad.reshape(-1)
            n = flat.numel()
            if max_evals is not None and n > max_evals:
                idx = np.linspace(0, n - 1, max_evals).round().astype(int)
                idx = np.unique(idx)
            else:
                idx = range(n)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                hi = float(f())
                flat[i] = orig - epsilon
                lo = float(f())
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * epsilon)
                a = float(grad_flat[i])
                rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-8)
                worst = max(worst, rel)
    return worst


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout: 16-byte magic, uint32 little-endian header length, JSON header,
# then the raw tensor blobs back to back. The header records the config
# dict and, per tensor, name/shape/dtype/offset. Floats are stored as
# float32 little-endian; integer buffers (batch-norm step counters) as
# int64.

_DTYPE_CODES = {"f4": (np.dtype("<f4"), torch.float32),
                "i8": (np.dtype("<i8"), torch.int64)}


def save_checkpoint(path, module_or_state, config=None):
    """Write named parameter arrays plus a config header to one file."""
    if isinstance(module_or_state, nn.Module):
        state = module_or_state.state_dict()
    else:
        state = dict(module_or_state)
    entries = []
    blobs = []
    offset = 0
    for name, tensor in state.items():
        t = tensor.detach().cpu()
        if t.dtype.is_floating_point:
            code = "f4"
            arr = t.to(torch.float32).numpy().astype("<f4")
        else:
            code = "i8"
            arr = t.to(torch.int64).numpy().astype("<i8")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": code,
                        "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": config or {}, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint back as (state_dict, config)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("%s: not a checkpoint file (bad magic)" % path)
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    state = {}
    for entry in header["tensors"]:
        np_dtype, torch_dtype = _DTYPE_CODES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * np_dtype.itemsize
        if end > len(payload):
            raise ValueError("%s: truncated checkpoint" % path)
        arr = np.frombuffer(payload[start:end], dtype=np_dtype).reshape(shape)
        state[entry["name"]] = torch.from_numpy(arr.copy()).to(torch_dtype)
    return state, header["config"]
