"""Teacher and student networks.

Three single-task teachers (classifier, segmenter, captioner) share one
convolutional encoder design; the student pairs a smaller encoder with all
three heads. The caption decoder attends over encoder cells with scaled
dot-product attention, and both encoders downsample by 8 so teacher and
student attention grids line up.

Construction is seeded: every model sets torch.manual_seed(seed) before
creating parameters, so identical configs give identical initial weights.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ContractError, DomainError, ShapeError
from .synthetic import BOS_ID, EOS_ID, PAD_ID

TASKS = ("report", "abnormality", "segmentation")


def scaled_dot_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """softmax(q k^T / sqrt(d_k)) v over the last two dims.

    q: (..., Lq, d), k: (..., Lk, d), v: (..., Lk, dv). Returns the attended
    values (..., Lq, dv) and the attention weights (..., Lq, Lk), whose rows
    sum to 1.
    """
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise ShapeError("attention inputs need at least 2 dims (length, depth)")
    d_k = q.shape[-1]
    if d_k < 1:
        raise DomainError("attention key depth d_k must be >= 1")
    if k.shape[-1] != d_k:
        raise ShapeError(f"query depth {d_k} != key depth {k.shape[-1]}")
    if v.shape[-2] != k.shape[-2]:
        raise ShapeError(f"value count {v.shape[-2]} != key count {k.shape[-2]}")
    scores = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class ConvEncoder(nn.Module):
    """Stack of 3x3 conv + ReLU blocks; returns spatial features and a GAP vector.

    Inputs are [0, 1] images; the encoder centers them at zero before the
    first convolution, which plain SGD needs to get off the ground.
    """

    def __init__(self, widths: tuple[int, ...], strides: tuple[int, ...], in_channels: int = 1):
        super().__init__()
        if len(widths) != len(strides):
            raise ContractError("widths and strides must have equal length")
        blocks = []
        prev = in_channels
        for w, s in zip(widths, strides):
            blocks.append(nn.Sequential(nn.Conv2d(prev, w, 3, stride=s, padding=1), nn.ReLU()))
            prev = w
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = prev
        self.downsample = int(np.prod(strides))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.ndim != 4:
            raise ShapeError(f"encoder expects (B, C, H, W), got {tuple(x.shape)}")
        x = x - 0.5
        for block in self.blocks:
            x = block(x)
        if x.shape[-1] < 2 or x.shape[-2] < 2:
            raise ContractError(
                f"encoder output grid {tuple(x.shape[-2:])} too small; use larger images"
            )
        return x, x.mean(dim=(2, 3))


class ClassifierHead(nn.Module):
    """MLP over concatenated mean- and max-pooled features.

    Max pooling keeps small high-contrast patches visible; under mean pooling
    alone their contribution drowns in the cell average.
    """

    def __init__(self, in_channels: int, n_classes: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(2 * in_channels, hidden), nn.ReLU(), nn.Linear(hidden, n_classes)
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([features.mean(dim=(2, 3)), features.amax(dim=(2, 3))], dim=1)
        return self.net(pooled)


class SegmentationHead(nn.Module):
    """Per-pixel logits at input resolution via conv + bilinear upsampling."""

    def __init__(self, in_channels: int, hidden: int = 32):
        super().__init__()
        self.refine = nn.Sequential(nn.Conv2d(in_channels, hidden, 3, padding=1), nn.ReLU())
        self.project = nn.Sequential(
            nn.Conv2d(hidden, hidden // 2, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden // 2, 1, 1),
        )

    def forward(self, features: torch.Tensor, out_size: tuple[int, int]) -> torch.Tensor:
        x = self.refine(features)
        x = torch.nn.functional.interpolate(x, size=out_size, mode="bilinear", align_corners=False)
        return self.project(x).squeeze(1)


class AttentionDecoder(nn.Module):
    """GRU decoder that attends over encoder cells at every step."""

    def __init__(
        self,
        vocab_size: int,
        feature_dim: int,
        emb_dim: int = 32,
        att_dim: int = 32,
        hidden_dim: int = 64,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, emb_dim)
        # init on mean+max pooling: max keeps small patches visible
        self.init_h = nn.Linear(2 * feature_dim, hidden_dim)
        self.to_query = nn.Linear(hidden_dim, att_dim)
        self.to_key = nn.Linear(feature_dim, att_dim)
        self.cell = nn.GRUCell(emb_dim + feature_dim, hidden_dim)
        self.out = nn.Linear(hidden_dim + feature_dim, vocab_size)

    def _cells(self, features: torch.Tensor) -> torch.Tensor:
        b, c, h, w = features.shape
        return features.reshape(b, c, h * w).transpose(1, 2)  # (B, h*w, C)

    def _initial_hidden(self, features: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([features.mean(dim=(2, 3)), features.amax(dim=(2, 3))], dim=1)
        return torch.tanh(self.init_h(pooled))

    def _step(
        self, token: torch.Tensor, h: torch.Tensor, cells: torch.Tensor, keys: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        q = self.to_query(h).unsqueeze(1)
        context, attn = scaled_dot_attention(q, keys, cells)
        context = context.squeeze(1)
        h = self.cell(torch.cat([self.embed(token), context], dim=1), h)
        logits = self.out(torch.cat([h, context], dim=1))
        return logits, h, attn.squeeze(1)

    def forward(
        self, features: torch.Tensor, tokens: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Teacher-forced pass. tokens: (B, L) starting with BOS.

        Returns logits (B, L-1, V) predicting tokens[:, 1:] and attention
        weights (B, L-1, cells).
        """
        if tokens.ndim != 2 or tokens.shape[1] < 2:
            raise ShapeError(f"tokens must be (B, L>=2), got {tuple(tokens.shape)}")
        cells = self._cells(features)
        keys = self.to_key(cells)
        h = self._initial_hidden(features)
        steps, attns = [], []
        for t in range(tokens.shape[1] - 1):
            logits, h, attn = self._step(tokens[:, t], h, cells, keys)
            steps.append(logits)
            attns.append(attn)
        return torch.stack(steps, dim=1), torch.stack(attns, dim=1)

    @torch.no_grad()
    def greedy(
        self, features: torch.Tensor, max_len: int
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Greedy decode. Returns tokens (B, <=max_len) including BOS and, when
        reached within the budget, EOS; positions after EOS are PAD. Attention
        is (B, steps, cells) with one row per generated position.
        """
        if max_len < 2:
            raise DomainError(f"max_len must be >= 2, got {max_len}")
        b = features.shape[0]
        cells = self._cells(features)
        keys = self.to_key(cells)
        h = self._initial_hidden(features)
        token = torch.full((b,), BOS_ID, dtype=torch.long, device=features.device)
        out = [token]
        attns = []
        done = torch.zeros(b, dtype=torch.bool, device=features.device)
        for _ in range(max_len - 1):
            logits, h, attn = self._step(token, h, cells, keys)
            token = logits.argmax(dim=1)
            token = torch.where(done, torch.full_like(token, PAD_ID), token)
            out.append(token)
            attns.append(attn)
            done = done | (token == EOS_ID)
            if bool(done.all()):
                break
        return torch.stack(out, dim=1), torch.stack(attns, dim=1)


def he_uniform_init(module: nn.Module) -> None:
    """Fan-in uniform init with ReLU gain on conv/linear weights, zero biases.

    The framework default shrinks activations at every layer, which leaves a
    six-block encoder with near-constant outputs; this keeps the forward
    variance roughly flat so plain SGD gets a usable gradient.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass(frozen=True)
class EncoderSpec:
    widths: tuple[int, ...]
    strides: tuple[int, ...]


TEACHER_ENCODER = EncoderSpec(widths=(16, 16, 32, 32, 64, 64), strides=(2, 1, 2, 1, 2, 1))
STUDENT_ENCODER = EncoderSpec(widths=(16, 32, 64), strides=(2, 2, 2))


class TeacherClassifier(nn.Module):
    task = "abnormality"

    def __init__(self, n_classes: int, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.encoder = ConvEncoder(TEACHER_ENCODER.widths, TEACHER_ENCODER.strides)
        self.head = ClassifierHead(self.encoder.out_channels, n_classes)
        self.n_classes = n_classes
        he_uniform_init(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features, _ = self.encoder(x)
        return self.head(features)


class TeacherSegmenter(nn.Module):
    task = "segmentation"

    def __init__(self, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.encoder = ConvEncoder(TEACHER_ENCODER.widths, TEACHER_ENCODER.strides)
        self.head = SegmentationHead(self.encoder.out_channels)
        he_uniform_init(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features, _ = self.encoder(x)
        return self.head(features, x.shape[-2:])


class TeacherCaptioner(nn.Module):
    task = "report"

    def __init__(self, vocab_size: int, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.encoder = ConvEncoder(TEACHER_ENCODER.widths, TEACHER_ENCODER.strides)
        self.decoder = AttentionDecoder(vocab_size, self.encoder.out_channels)
        self.vocab_size = vocab_size
        he_uniform_init(self)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        features, _ = self.encoder(x)
        return self.decoder(features, tokens)

    def generate(self, x: torch.Tensor, max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
        features, _ = self.encoder(x)
        return self.decoder.greedy(features, max_len)


def build_teacher(task: str, n_classes: int, vocab_size: int, seed: int = 0) -> nn.Module:
    if task == "abnormality":
        return TeacherClassifier(n_classes, seed=seed)
    if task == "segmentation":
        return TeacherSegmenter(seed=seed)
    if task == "report":
        return TeacherCaptioner(vocab_size, seed=seed)
    raise DomainError(f"unknown task {task!r}; expected one of {TASKS}")


@dataclass
class StudentOutput:
    class_logits: torch.Tensor  # (B, C)
    mask_logits: torch.Tensor  # (B, H, W)
    caption_logits: torch.Tensor | None  # (B, L-1, V) when tokens given
    step_attention: torch.Tensor | None  # (B, L-1, cells)
    feature_grid: tuple[int, int]  # attention cell layout (h, w)


class MultiTaskStudent(nn.Module):
    """Shared encoder with classification, segmentation, and report heads."""

    def __init__(self, n_classes: int, vocab_size: int, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.encoder = ConvEncoder(STUDENT_ENCODER.widths, STUDENT_ENCODER.strides)
        self.classifier_head = ClassifierHead(self.encoder.out_channels, n_classes)
        self.segmentation_head = SegmentationHead(self.encoder.out_channels)
        self.report_head = AttentionDecoder(vocab_size, self.encoder.out_channels)
        self.n_classes = n_classes
        self.vocab_size = vocab_size
        he_uniform_init(self)

    def head_for(self, task: str) -> nn.Module:
        heads = {
            "abnormality": self.classifier_head,
            "segmentation": self.segmentation_head,
            "report": self.report_head,
        }
        if task not in heads:
            raise DomainError(f"unknown task {task!r}; expected one of {TASKS}")
        return heads[task]

    def forward(self, x: torch.Tensor, tokens: torch.Tensor | None = None) -> StudentOutput:
        features, _ = self.encoder(x)
        caption_logits = step_attention = None
        if tokens is not None:
            caption_logits, step_attention = self.report_head(features, tokens)
        return StudentOutput(
            class_logits=self.classifier_head(features),
            mask_logits=self.segmentation_head(features, x.shape[-2:]),
            caption_logits=caption_logits,
            step_attention=step_attention,
            feature_grid=(features.shape[-2], features.shape[-1]),
        )

    def generate(self, x: torch.Tensor, max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
        features, _ = self.encoder(x)
        return self.report_head.greedy(features, max_len)


@dataclass(frozen=True)
class MultiTaskOutput:
    """All three head outputs for one image from a single backbone pass."""

    class_logits: np.ndarray  # (C,)
    mask_logits: np.ndarray  # (H, W)
    tokens: tuple[int, ...]  # generated ids, ending at EOS or the length cap
    step_attention: np.ndarray  # (len(tokens), cells); rows are distributions
    feature_grid: tuple[int, int]


@torch.no_grad()
def student_forward(
    student: MultiTaskStudent, image: np.ndarray, max_len: int = 24
) -> MultiTaskOutput:
    """Run one image through every head, encoding exactly once.

    The decoded sequence starts after BOS and ends with EOS when the decoder
    emits one within the budget; each kept token keeps its attention row.
    """
    was_training = student.training
    student.eval()
    x = images_to_tensor(np.asarray(image, dtype=np.float64))
    features, _ = student.encoder(x)
    class_logits = student.classifier_head(features)[0].numpy().astype(np.float64)
    mask_logits = (
        student.segmentation_head(features, x.shape[-2:])[0].numpy().astype(np.float64)
    )
    token_rows, attn = student.report_head.greedy(features, max_len)
    generated = token_rows[0, 1:].tolist()
    keep = len(generated)
    for i, tok in enumerate(generated):
        if tok == EOS_ID:
            keep = i + 1
            break
    if was_training:
        student.train()
    return MultiTaskOutput(
        class_logits=class_logits,
        mask_logits=mask_logits,
        tokens=tuple(generated[:keep]),
        step_attention=attn[0, :keep].numpy().astype(np.float64),
        feature_grid=(features.shape[-2], features.shape[-1]),
    )


def images_to_tensor(images: list[np.ndarray] | np.ndarray) -> torch.Tensor:
    arr = np.stack(images) if isinstance(images, list) else np.asarray(images)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected (B, H, W) images, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr[:, None])).float()


def pad_reports(reports: list[list[int]], length: int) -> torch.Tensor:
    out = torch.full((len(reports), length), PAD_ID, dtype=torch.long)
    for i, r in enumerate(reports):
        if len(r) > length:
            raise ShapeError(f"report of length {len(r)} exceeds pad length {length}")
        out[i, : len(r)] = torch.as_tensor(r, dtype=torch.long)
    return out


# ---------------------------------------------------------------------------
# checkpoints: meta.json + one raw little-endian float64 file per parameter

CHECKPOINT_FORMAT = "raw-f64/1"


def parameter_checksum(model: nn.Module, only: list[str] | None = None) -> str:
    """sha256 over name-sorted parameter bytes (float64, little-endian)."""
    h = hashlib.sha256()
    state = model.state_dict()
    names = sorted(state) if only is None else sorted(only)
    for name in names:
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name].detach().numpy(), dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(model: nn.Module, outdir: str | Path, extra_meta: dict | None = None) -> Path:
    outdir = Path(outdir)
    (outdir / "params").mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model_class": type(model).__name__,
        "parameters": {name: list(t.shape) for name, t in sorted(state.items())},
        "checksum": parameter_checksum(model),
    }
    if extra_meta:
        meta.update(extra_meta)
    for name, t in state.items():
        raw = np.ascontiguousarray(t.detach().numpy(), dtype="<f8").tobytes()
        (outdir / "params" / f"{name}.f64").write_bytes(raw)
    (outdir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return outdir


def load_checkpoint(model: nn.Module, ckpt_dir: str | Path) -> dict:
    """Load raw-f64 parameters into model, validating names and shapes."""
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / "meta.json"
    if not meta_path.exists():
        raise CheckpointError(f"no meta.json under {ckpt_dir}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
    state = model.state_dict()
    saved = meta.get("parameters", {})
    if set(saved) != set(state):
        missing = sorted(set(state) - set(saved))
        extra = sorted(set(saved) - set(state))
        raise CheckpointError(
            f"parameter names do not match model (missing {missing[:3]}, extra {extra[:3]})"
        )
    new_state = {}
    for name, t in state.items():
        shape = tuple(saved[name])
        if shape != tuple(t.shape):
            raise CheckpointError(f"shape mismatch for {name}: saved {shape}, model {tuple(t.shape)}")
        raw = (ckpt_dir / "params" / f"{name}.f64").read_bytes()
        arr = np.frombuffer(raw, dtype="<f8")
        if arr.size != t.numel():
            raise CheckpointError(
                f"size mismatch for {name}: saved {arr.size} values, model needs {t.numel()}"
            )
        new_state[name] = torch.from_numpy(arr.reshape(shape).copy()).to(t.dtype)
    model.load_state_dict(new_state)
    return meta
