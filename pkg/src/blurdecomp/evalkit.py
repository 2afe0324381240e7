"""Metrics and paired evaluation protocols.

Covers the standing experiment questions for this project: how good are
best-of-N multi-modal decompositions, how much does guidance help training,
and how gracefully does a trained decomposer tolerate sloppy guidance
regions. Everything is deterministic under fixed seeds; runs iterate over
samples one by one (a desk-scale corpus does not justify worker pools) and
assemble one report per protocol at the end.

LPIPS is deliberately not reported: it needs a pretrained perceptual
network, which this codebase avoids depending on.
"""

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .decomposer import train_decomposer
from .guidance import invert_labels, perturb_guidance
from .predictor import predict_multimodal

LPIPS_NOTE = "LPIPS not reported (needs a pretrained perceptual network)"

_LUMA = np.array([0.299, 0.587, 0.114])
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for [0,1] images of any shape.

    Identical inputs return +inf (the zero-MSE sentinel); callers doing
    arithmetic on aggregates should expect it.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch: %s vs %s" % (a.shape, b.shape))
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size=_SSIM_WINDOW, sigma=_SSIM_SIGMA):
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    w = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def _filter_valid(image, window):
    """Separable 2-D correlation keeping only fully covered windows."""
    pad = len(window) - 1
    rows = np.apply_along_axis(np.convolve, 1, image, window[::-1], mode="valid")
    return np.apply_along_axis(np.convolve, 0, rows, window[::-1], mode="valid")


def _to_luma(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[2] == 3:
        return image @ _LUMA
    if image.ndim == 2:
        return image
    raise ValueError("expected (H, W) or (H, W, 3), got %s" % (image.shape,))


def ssim(a, b):
    """Mean structural similarity over luma, 11x11 Gaussian window.

    Border pixels without a full window are excluded rather than padded,
    so the score reflects only honestly computed neighborhoods.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("shape mismatch: %s vs %s" % (a.shape, b.shape))
    la, lb = _to_luma(a), _to_luma(b)
    if min(la.shape) < _SSIM_WINDOW:
        raise ValueError("image %s smaller than the %dx%d window"
                         % (la.shape, _SSIM_WINDOW, _SSIM_WINDOW))
    w = _gaussian_window()
    mu_a = _filter_valid(la, w)
    mu_b = _filter_valid(lb, w)
    var_a = _filter_valid(la * la, w) - mu_a ** 2
    var_b = _filter_valid(lb * lb, w) - mu_b ** 2
    cov = _filter_valid(la * lb, w) - mu_a * mu_b
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def sequence_metrics(frames_a, frames_b):
    """(mean PSNR, mean SSIM) across paired frames of two (T,H,W,3) stacks."""
    if frames_a.shape != frames_b.shape:
        raise ValueError("shape mismatch: %s vs %s"
                         % (frames_a.shape, frames_b.shape))
    ps = [psnr(fa, fb) for fa, fb in zip(frames_a, frames_b)]
    ss = [ssim(fa, fb) for fa, fb in zip(frames_a, frames_b)]
    return float(np.mean(ps)), float(np.mean(ss))


def config_fingerprint(*config_dicts):
    """Short stable digest of one or more config dicts."""
    blob = json.dumps(config_dicts, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class EvalReport:
    """One protocol's scores over a dataset.

    per_sequence holds one row per input ({index, psnr, ssim, chosen});
    the aggregate fields are plain means over those rows.
    """

    protocol: str
    per_sequence: list
    psnr: float
    ssim: float
    fingerprint: str
    runtime_seconds: float
    notes: str = LPIPS_NOTE

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_text(self):
        lines = ["protocol %s  (config %s)" % (self.protocol, self.fingerprint),
                 "%5s  %8s  %7s  %s" % ("seq", "psnr", "ssim", "chosen")]
        for row in self.per_sequence:
            lines.append("%5d  %8.3f  %7.4f  %d"
                         % (row["index"], row["psnr"], row["ssim"], row["chosen"]))
        lines.append("mean   %8.3f  %7.4f   over %d sequences  (%.1fs)"
                     % (self.psnr, self.ssim, len(self.per_sequence),
                        self.runtime_seconds))
        lines.append(self.notes)
        return "\n".join(lines)


def write_reports(path, reports):
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=1)


def read_reports(path):
    with open(path) as fh:
        return [EvalReport.from_dict(d) for d in json.load(fh)]


def _evaluate_candidates(decomposer, dataset, candidates_for, protocol,
                         fingerprint):
    """Score each input against its best candidate guidance.

    candidates_for(index, triplet) returns the guidance maps to try; the
    best per input (by sequence PSNR) is kept, mirroring a user picking the
    most convincing decomposition out of several proposals.
    """
    if not dataset:
        raise ValueError("empty dataset")
    t0 = time.time()
    rows = []
    for i, tri in enumerate(dataset):
        best = None
        for j, guid in enumerate(candidates_for(i, tri)):
            seq = decomposer.decompose(tri.blurry, guid)
            p, s = sequence_metrics(seq.frames, tri.sharp.frames)
            if best is None or p > best[0]:
                best = (p, s, j)
        rows.append({"index": i, "psnr": best[0], "ssim": best[1],
                     "chosen": best[2]})
    return EvalReport(
        protocol=protocol,
        per_sequence=rows,
        psnr=float(np.mean([r["psnr"] for r in rows])),
        ssim=float(np.mean([r["ssim"] for r in rows])),
        fingerprint=fingerprint,
        runtime_seconds=time.time() - t0,
    )


def evaluate_best_of(decomposer, predictor, dataset, n, seed=0):
    """Best-of-n decomposition quality with sampled guidance.

    Latent draws are prefix-nested per input (sample i of a larger n equals
    sample i of a smaller n under the same seed), so best-of-n scores are
    non-decreasing in n by construction.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    fp = config_fingerprint(decomposer.config.to_dict(),
                            predictor.config.to_dict())

    def candidates(i, tri):
        return predict_multimodal(tri.blurry, n, predictor, seed=seed + i)

    return _evaluate_candidates(decomposer, dataset, candidates,
                                "P%d" % n, fp)


def evaluate_oracle(decomposer, dataset):
    """Decompose every input with its ground-truth guidance map."""
    fp = config_fingerprint(decomposer.config.to_dict())
    return _evaluate_candidates(decomposer, dataset,
                                lambda i, tri: [tri.guidance], "oracle", fp)


def evaluate_forward_reverse(decomposer, dataset):
    """Best of the ground-truth guidance and its time reversal.

    Generic two-candidate scoring; useful for parity with methods that are
    only defined up to the direction of time.
    """
    fp = config_fingerprint(decomposer.config.to_dict())

    def candidates(i, tri):
        return [tri.guidance, invert_labels(tri.guidance)]

    return _evaluate_candidates(decomposer, dataset, candidates,
                                "forward-reverse", fp)


def evaluate_fixed_guidance(decomposer, dataset, guidances, protocol):
    """Score one externally supplied guidance map per input."""
    if len(guidances) != len(dataset):
        raise ValueError("need one guidance per dataset entry")
    fp = config_fingerprint(decomposer.config.to_dict())
    return _evaluate_candidates(decomposer, dataset,
                                lambda i, tri: [guidances[i]], protocol, fp)


# ---------------------------------------------------------------------------
# guidance-vs-no-guidance training comparison


def convergence_compare(train_triplets, val_triplets, config):
    """Train twice from the same seed, with and without guidance channels.

    The without-arm zeroes the guidance input while keeping the exact same
    architecture, parameter count, data order, and budget, so the loss gap
    isolates what guidance contributes. Returns both epoch histories and the
    final validation loss ratio (with / without); a ratio well below 1 means
    the model actually uses guidance to resolve motion ambiguity.
    """
    with_config = dataclasses.replace(config, zero_guidance=False)
    without_config = dataclasses.replace(config, zero_guidance=True)
    _, hist_with = train_decomposer(train_triplets, with_config,
                                    val_triplets=val_triplets)
    _, hist_without = train_decomposer(train_triplets, without_config,
                                       val_triplets=val_triplets)
    ratio = hist_with[-1]["val_loss"] / hist_without[-1]["val_loss"]
    return {"with_guidance": hist_with,
            "without_guidance": hist_without,
            "final_ratio": ratio}


# ---------------------------------------------------------------------------
# guidance region robustness


def robustness_sweep(decomposer, dataset, radii, modes=("dilate", "erode")):
    """Evaluate with progressively perturbed ground-truth guidance.

    Returns {(mode, radius): EvalReport}. Expectation on scenes with sharp
    static surroundings: dilation hurts less than erosion, because spilling
    motion labels onto static pixels still lets the model recover them,
    while erasing labels on moving pixels removes the disambiguation where
    it is needed.
    """
    out = {}
    for mode in modes:
        for radius in radii:
            guidances = [perturb_guidance(tri.guidance, mode, radius)
                         for tri in dataset]
            out[(mode, radius)] = evaluate_fixed_guidance(
                decomposer, dataset, guidances,
                "%s-r%d" % (mode, radius))
    return out
