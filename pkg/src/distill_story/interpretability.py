"""Explanation methods over trained models.

Two families share this module. Gradient-based methods (Grad-CAM, Grad-CAM++,
attention maps) read activations and gradients out of a model; the
model-agnostic method (LIME) sees the model only through a black-box
``predict_fn`` and fits a locally weighted linear surrogate over segment
perturbations. Everything downstream consumes the same ``Heatmap`` record, so
the storytelling layer does not care where a map came from.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage
from scipy import ndimage

from .errors import (
    ContractError,
    DomainError,
    ExplanationError,
    ShapeError,
)
from .imageops import bilinear_resize

PROVENANCES = ("gradcam", "gradcampp", "attention", "lime")


# ---------------------------------------------------------------------------
# heatmap record


@dataclass(frozen=True)
class Heatmap:
    """A spatial attribution map plus where it came from.

    ``values`` holds the raw map at image resolution. Gradient and attention
    maps are nonnegative by construction; LIME maps carry signed segment
    weights. ``display()`` gives the normalized view used for rendering.
    """

    values: np.ndarray
    provenance: str
    target: int

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise DomainError(
                f"heatmap provenance {self.provenance!r} not in {PROVENANCES}"
            )
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"heatmap values must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DomainError("heatmap values must be finite")
        if self.provenance != "lime" and np.any(v < 0):
            raise DomainError(f"{self.provenance} heatmap has negative values")
        object.__setattr__(self, "values", v)

    def display(self) -> np.ndarray:
        return normalize_for_display(self.values)

    @property
    def raw_min(self) -> float:
        return float(self.values.min())

    @property
    def raw_max(self) -> float:
        return float(self.values.max())


def normalize_for_display(values: np.ndarray) -> np.ndarray:
    """Clip negatives and scale so the maximum is 1 (all-zero maps stay zero)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, None)
    peak = v.max() if v.size else 0.0
    if peak > 0:
        v = v / peak
    return v


# ---------------------------------------------------------------------------
# class activation maps


def cam_combine(activations: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """ReLU-rectified weighted sum of activation maps.

    ``activations`` is (K, h, w), ``weights`` is (K,); the result is the
    h x w map max(0, sum_k w_k * A^k). This is the core both CAM variants
    share, kept separate so it can be checked against hand-worked values.
    """
    a = np.asarray(activations, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if a.ndim != 3:
        raise ShapeError(f"activations must be (K, h, w), got shape {a.shape}")
    if w.shape != (a.shape[0],):
        raise ShapeError(
            f"weights shape {w.shape} does not match {a.shape[0]} activation maps"
        )
    return np.maximum(np.tensordot(w, a, axes=1), 0.0)


def gradcam_weights(gradients: np.ndarray) -> np.ndarray:
    """Per-map weights: spatial global average of the class-logit gradients."""
    g = np.asarray(gradients, dtype=np.float64)
    if g.ndim != 3:
        raise ShapeError(f"gradients must be (K, h, w), got shape {g.shape}")
    return g.mean(axis=(1, 2))


def gradcampp_weights(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """Per-map weights with per-pixel second-order coefficients.

    Uses the closed form in which higher derivatives of a rectified network
    reduce to powers of the first: alpha_ij = g^2 / (2 g^2 + (sum A) g^3),
    and the map weight is sum_ij alpha_ij * relu(g_ij). Pixels with a zero
    denominator contribute nothing.
    """
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    if a.shape != g.shape or a.ndim != 3:
        raise ShapeError(
            f"activations {a.shape} and gradients {g.shape} must both be (K, h, w)"
        )
    g2 = g * g
    g3 = g2 * g
    denom = 2.0 * g2 + a.sum(axis=(1, 2), keepdims=True) * g3
    alpha = np.where(np.abs(denom) > 1e-12, g2 / np.where(denom == 0, 1.0, denom), 0.0)
    return (alpha * np.maximum(g, 0.0)).sum(axis=(1, 2))


def _class_logits(model: torch.nn.Module, x: torch.Tensor) -> torch.Tensor:
    out = model(x)
    if hasattr(out, "class_logits"):
        out = out.class_logits
    if not torch.is_tensor(out) or out.ndim != 2:
        raise ContractError("model did not produce a (batch, classes) logit tensor")
    return out


def _default_cam_layer(model: torch.nn.Module) -> torch.nn.Module:
    encoder = getattr(model, "encoder", None)
    blocks = getattr(encoder, "blocks", None)
    if not blocks:
        raise ContractError(
            "model has no encoder.blocks to target; pass layer= explicitly"
        )
    return blocks[-1]


def _cam_tensors(
    model: torch.nn.Module,
    image: np.ndarray,
    target_class: int,
    layer: torch.nn.Module | None,
) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Run one image through the model and return (activations, gradients)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"grad_cam expects a 2-D grayscale image, got {img.shape}")
    layer = layer if layer is not None else _default_cam_layer(model)
    captured: list[torch.Tensor] = []

    def hook(_mod, _inp, out):
        captured.append(out)

    handle = layer.register_forward_hook(hook)
    try:
        was_training = model.training
        model.eval()
        x = torch.from_numpy(img).float().unsqueeze(0).unsqueeze(0)
        logits = _class_logits(model, x)
        if not 0 <= target_class < logits.shape[1]:
            raise DomainError(
                f"target class {target_class} out of range for {logits.shape[1]} classes"
            )
        if not captured:
            raise ContractError("target layer was never executed by the forward pass")
        acts = captured[-1]
        if acts.ndim != 4:
            raise ContractError(
                f"target layer output is not spatial (shape {tuple(acts.shape)})"
            )
        grads = torch.autograd.grad(logits[0, target_class], acts)[0]
        if was_training:
            model.train()
    finally:
        handle.remove()
    a = acts.detach()[0].numpy().astype(np.float64)
    g = grads.detach()[0].numpy().astype(np.float64)
    return a, g, img.shape


def _cam_heatmap(
    map_small: np.ndarray, size: tuple[int, int], provenance: str, target: int
) -> Heatmap:
    up = bilinear_resize(map_small, size[0], size[1])
    return Heatmap(values=np.maximum(up, 0.0), provenance=provenance, target=target)


def grad_cam(
    model: torch.nn.Module,
    image: np.ndarray,
    target_class: int,
    layer: torch.nn.Module | None = None,
) -> Heatmap:
    """Gradient-weighted class activation map for one class logit.

    Weights are global-average-pooled gradients of the raw class logit with
    respect to the target convolutional stack; the rectified weighted sum is
    bilinearly upsampled to image size.
    """
    a, g, size = _cam_tensors(model, image, target_class, layer)
    small = cam_combine(a, gradcam_weights(g))
    return _cam_heatmap(small, size, "gradcam", target_class)


def grad_cam_pp(
    model: torch.nn.Module,
    image: np.ndarray,
    target_class: int,
    layer: torch.nn.Module | None = None,
) -> Heatmap:
    """Grad-CAM++ variant: per-pixel weighted gradients sharpen small regions."""
    a, g, size = _cam_tensors(model, image, target_class, layer)
    small = cam_combine(a, gradcampp_weights(a, g))
    return _cam_heatmap(small, size, "gradcampp", target_class)


# ---------------------------------------------------------------------------
# segmentation of the input into interpretable components


@dataclass(frozen=True)
class SegmentMap:
    """Row-major rectangular partition of an image into S segments."""

    ids: np.ndarray
    n_segments: int

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 2:
            raise ShapeError(f"segment ids must be 2-D, got shape {ids.shape}")
        present = np.unique(ids)
        if present[0] != 0 or present[-1] != self.n_segments - 1 or len(
            present
        ) != self.n_segments:
            raise ContractError(
                f"segment ids must cover 0..{self.n_segments - 1} contiguously"
            )
        object.__setattr__(self, "ids", ids.astype(np.int64))


def _band_sizes(length: int, n: int) -> list[int]:
    base, rem = divmod(length, n)
    return [base + 1 if i < rem else base for i in range(n)]


def segment_grid(image: np.ndarray, n: int) -> SegmentMap:
    """Partition an image into an n x n grid of near-equal rectangles.

    Remainder pixels go to the earliest rows/columns, so a 10-wide image cut
    three ways gets bands of (4, 3, 3). Ids increase row-major.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ShapeError(f"segment_grid expects a 2-D image, got shape {img.shape}")
    h, w = img.shape
    if n < 2 or n > min(h, w):
        raise DomainError(f"grid size {n} must be in [2, {min(h, w)}]")
    row_ids = np.repeat(np.arange(n), _band_sizes(h, n))
    col_ids = np.repeat(np.arange(n), _band_sizes(w, n))
    ids = row_ids[:, None] * n + col_ids[None, :]
    return SegmentMap(ids=ids, n_segments=n * n)


# ---------------------------------------------------------------------------
# LIME


@dataclass(frozen=True)
class LimeConfig:
    """Perturbation and surrogate-fit settings.

    ``kernel_width`` defaults to 0.25 * sqrt(S) when left as None, where S is
    the number of segments; ``fill_value`` replaces switched-off segments.
    ``top_k`` only limits what gets rendered, never the fit itself.
    """

    n_samples: int = 500
    kernel_width: float | None = None
    ridge_lambda: float = 1e-3
    top_k: int = 5
    fill_value: float = 0.0
    seed: int = 0

    def validate(self) -> "LimeConfig":
        if self.n_samples < 1:
            raise DomainError(f"lime n_samples {self.n_samples} must be positive")
        if self.kernel_width is not None and not self.kernel_width > 0:
            raise DomainError(f"lime kernel_width {self.kernel_width} must be > 0")
        if self.ridge_lambda < 0:
            raise DomainError(f"lime ridge_lambda {self.ridge_lambda} must be >= 0")
        if self.top_k < 1:
            raise DomainError(f"lime top_k {self.top_k} must be positive")
        return self

    def resolved_width(self, n_segments: int) -> float:
        if self.kernel_width is not None:
            return self.kernel_width
        return 0.25 * math.sqrt(n_segments)


@dataclass(frozen=True)
class LimeExplanation:
    """Weighted-ridge surrogate fit over segment indicators."""

    weights: np.ndarray
    intercept: float
    r2: float
    config: LimeConfig

    def top_segments(self) -> list[tuple[int, float]]:
        """(segment id, weight) pairs, largest |weight| first, top_k of them."""
        order = np.argsort(-np.abs(self.weights), kind="stable")
        return [(int(i), float(self.weights[i])) for i in order[: self.config.top_k]]

    def to_json(self) -> str:
        payload = {
            "weights": [round(float(w), 10) for w in self.weights],
            "intercept": round(float(self.intercept), 10),
            "r2": round(float(self.r2), 10),
            "config": {
                "n_samples": self.config.n_samples,
                "kernel_width": self.config.kernel_width,
                "ridge_lambda": self.config.ridge_lambda,
                "top_k": self.config.top_k,
                "fill_value": self.config.fill_value,
                "seed": self.config.seed,
            },
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def perturb_samples(
    image: np.ndarray, segmap: SegmentMap, config: LimeConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Draw segment on/off patterns and the images they induce.

    Row 0 is all-ones (the unperturbed image); remaining rows are i.i.d.
    Bernoulli(0.5) under the config seed. Off segments are replaced by the
    fill value. Rows are independent, so callers may evaluate them in
    parallel as long as results are gathered back in row order.
    """
    config.validate()
    img = np.asarray(image, dtype=np.float64)
    if img.shape != segmap.ids.shape:
        raise ShapeError(
            f"image shape {img.shape} does not match segment map {segmap.ids.shape}"
        )
    rng = np.random.default_rng(config.seed)
    z = rng.integers(0, 2, size=(config.n_samples, segmap.n_segments), dtype=np.int64)
    z[0, :] = 1
    keep = z[:, segmap.ids]
    images = np.where(keep == 1, img[None, :, :], config.fill_value)
    return z, images


def _kernel_weights(z: np.ndarray, width: float) -> np.ndarray:
    """Exponential kernel on cosine distance from the all-ones row."""
    s = z.shape[1]
    norms = np.sqrt(z.sum(axis=1).astype(np.float64))
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(norms > 0, z.sum(axis=1) / (norms * math.sqrt(s)), 0.0)
    d = 1.0 - cos
    return np.exp(-(d**2) / (width**2))


def weighted_ridge(
    z: np.ndarray, y: np.ndarray, pi: np.ndarray, lam: float
) -> tuple[np.ndarray, float]:
    """Sample-weighted ridge regression with an unpenalized intercept.

    Centering by the weighted means folds the intercept out of the penalized
    solve, so only the segment weights feel the ridge term.
    """
    w_total = pi.sum()
    if not w_total > 0:
        raise ExplanationError("all kernel weights are zero; cannot fit surrogate")
    x_mean = (pi[:, None] * z).sum(axis=0) / w_total
    y_mean = float((pi * y).sum() / w_total)
    xc = z - x_mean
    yc = y - y_mean
    a = (pi[:, None] * xc).T @ xc + lam * np.eye(z.shape[1])
    b = (pi[:, None] * xc).T @ yc
    try:
        coef = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise ExplanationError(f"surrogate design is singular: {exc}") from exc
    intercept = y_mean - float(x_mean @ coef)
    return coef, intercept


def lime_explain(
    predict_fn,
    image: np.ndarray,
    segmap: SegmentMap,
    config: LimeConfig,
) -> LimeExplanation:
    """Fit a locally weighted linear surrogate to a black-box score.

    ``predict_fn`` maps a batch of images (n, h, w) to a score vector (n,);
    the model is touched only through it. The fit solves a kernel-weighted
    ridge regression over the binary segment indicators; ``top_k`` truncation
    happens at rendering, the returned weight vector is always full length.
    """
    config.validate()
    z, images = perturb_samples(image, segmap, config)
    if np.all(z == z[0]):
        raise ExplanationError(
            "degenerate perturbation design: all rows identical; "
            "increase n_samples or segments"
        )
    y = np.asarray(predict_fn(images), dtype=np.float64).reshape(-1)
    if y.shape[0] != z.shape[0]:
        raise ShapeError(
            f"predict_fn returned {y.shape[0]} scores for {z.shape[0]} images"
        )
    if not np.all(np.isfinite(y)):
        raise ExplanationError("predict_fn produced non-finite scores")
    pi = _kernel_weights(z, config.resolved_width(segmap.n_segments))
    coef, intercept = weighted_ridge(
        z.astype(np.float64), y, pi, config.ridge_lambda
    )
    fitted = z @ coef + intercept
    y_mean = float((pi * y).sum() / pi.sum())
    ss_res = float((pi * (y - fitted) ** 2).sum())
    ss_tot = float((pi * (y - y_mean) ** 2).sum())
    scale = float(pi.sum()) * (1.0 + y_mean * y_mean)
    r2 = 1.0 if ss_tot <= 1e-12 * scale else 1.0 - ss_res / ss_tot
    return LimeExplanation(weights=coef, intercept=intercept, r2=r2, config=config)


def lime_heatmap(explanation: LimeExplanation, segmap: SegmentMap) -> Heatmap:
    """Paint per-segment weights onto the image grid (signed values kept)."""
    if explanation.weights.shape[0] != segmap.n_segments:
        raise ShapeError(
            f"{explanation.weights.shape[0]} weights for {segmap.n_segments} segments"
        )
    values = explanation.weights[segmap.ids]
    return Heatmap(values=values, provenance="lime", target=-1)


# ---------------------------------------------------------------------------
# attention maps


def attention_heatmaps(
    step_attention: np.ndarray,
    grid: tuple[int, int],
    image_size: tuple[int, int],
) -> list[Heatmap]:
    """One heatmap per decoding step from the decoder's attention rows.

    Each row must be a distribution over the backbone grid cells; it is
    reshaped to the grid and bilinearly upsampled to image size.
    """
    att = np.asarray(step_attention, dtype=np.float64)
    if att.ndim != 2:
        raise ShapeError(f"attention must be (steps, cells), got shape {att.shape}")
    gh, gw = grid
    if att.shape[1] != gh * gw:
        raise ShapeError(
            f"attention rows have {att.shape[1]} cells, grid {grid} needs {gh * gw}"
        )
    sums = att.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-3):
        worst = int(np.argmax(np.abs(sums - 1.0)))
        raise ContractError(
            f"attention row {worst} sums to {sums[worst]:.6f}, expected 1"
        )
    if np.any(att < 0):
        raise ContractError("attention rows must be nonnegative")
    maps = []
    for t in range(att.shape[0]):
        up = bilinear_resize(att[t].reshape(gh, gw), image_size[0], image_size[1])
        maps.append(Heatmap(values=np.maximum(up, 0.0), provenance="attention", target=t))
    return maps


# ---------------------------------------------------------------------------
# rendering and persistence


_CMAP_ANCHORS = (
    (0.00, (13, 8, 135)),
    (0.25, (126, 3, 168)),
    (0.50, (204, 71, 120)),
    (0.75, (248, 149, 64)),
    (1.00, (240, 249, 33)),
)

CMAP_TOP = _CMAP_ANCHORS[-1][1]


def colormap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to RGB float colors via piecewise-linear anchors."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    out = np.zeros(v.shape + (3,), dtype=np.float64)
    for (p0, c0), (p1, c1) in zip(_CMAP_ANCHORS[:-1], _CMAP_ANCHORS[1:]):
        mask = (v >= p0) & (v <= p1)
        t = np.where(mask, (v - p0) / (p1 - p0), 0.0)
        for ch in range(3):
            out[..., ch] = np.where(mask, c0[ch] + t * (c1[ch] - c0[ch]), out[..., ch])
    return out


def overlay(
    image: np.ndarray, heatmap: Heatmap | np.ndarray, blend: float = 0.6
) -> np.ndarray:
    """Alpha-blend a colormapped heatmap over the grayscale image.

    The per-pixel alpha is blend * heat, so zero-heat pixels show the plain
    image and the hottest pixel shows the top-of-colormap color at the blend
    weight. Returns an (h, w, 3) uint8 array.
    """
    img = np.asarray(image, dtype=np.float64)
    heat = heatmap.display() if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    if img.shape != heat.shape:
        raise ShapeError(
            f"image shape {img.shape} does not match heatmap shape {heat.shape}"
        )
    if not 0.0 <= blend <= 1.0:
        raise DomainError(f"blend {blend} must be in [0, 1]")
    gray = np.clip(img, 0.0, 1.0)[..., None] * 255.0
    color = colormap(heat)
    alpha = (blend * heat)[..., None]
    mixed = (1.0 - alpha) * gray + alpha * color
    return np.round(mixed).astype(np.uint8)


def write_rgb_png(path: str | Path, rgb: np.ndarray) -> None:
    PILImage.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path)


def write_heatmaps(heatmaps: dict[str, Heatmap], outdir: str | Path) -> Path:
    """Persist heatmaps as 8-bit PNGs plus one metadata file.

    Each named map becomes ``<name>.png`` holding the display-normalized map;
    ``heatmap_meta.json`` records provenance, target, and the raw min/max so
    the normalization is invertible.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    meta = {}
    for name in sorted(heatmaps):
        hm = heatmaps[name]
        png = np.round(hm.display() * 255.0).astype(np.uint8)
        PILImage.fromarray(png, mode="L").save(outdir / f"{name}.png")
        meta[name] = {
            "provenance": hm.provenance,
            "target": hm.target,
            "raw_min": round(hm.raw_min, 10),
            "raw_max": round(hm.raw_max, 10),
        }
    meta_path = outdir / "heatmap_meta.json"
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return meta_path


def localization_hit(
    heatmap: Heatmap | np.ndarray,
    region_mask: np.ndarray,
    dilation_frac: float = 0.25,
) -> bool:
    """Whether the heatmap argmax lands inside the dilated true region.

    The region is grown by dilation_frac of the image width (Euclidean
    radius) before the check, which forgives coarse-grid blur while still
    failing maps that point at the wrong side of the image.
    """
    heat = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    mask = np.asarray(region_mask, dtype=bool)
    if heat.shape != mask.shape:
        raise ShapeError(
            f"heatmap shape {heat.shape} does not match region shape {mask.shape}"
        )
    if not mask.any():
        raise DomainError("region mask is empty; nothing to localize against")
    radius = dilation_frac * mask.shape[1]
    dilated = ndimage.distance_transform_edt(~mask) <= radius
    flat = int(np.argmax(heat))
    r, c = divmod(flat, heat.shape[1])
    return bool(dilated[r, c])
