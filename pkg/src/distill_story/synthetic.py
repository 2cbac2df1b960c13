"""Deterministic synthetic chest-image generator with ground-truth provenance.

Scenes are parametric: two lung ellipses, a heart silhouette, and per-class
abnormality patches composited additively onto a flat background. Every
sample carries its generating scene, so labels, masks, and reports are
correct by construction. Sample i draws randomness from
SeedSequence(master_seed, spawn_key=(0, i)); per-class positive sets from
SeedSequence(master_seed, spawn_key=(1, class_id)).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigurationError, SceneError, VocabularyError

DEFAULT_CLASSES = ("infiltration", "consolidation", "pleural_effusion", "cardiomegaly")

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
BASE_WORDS = (
    "no", "acute", "findings", ".",
    "left", "right", "both", "lung", "lungs", "shows", "show", "heart",
)

LATERALITIES = ("left", "right", "bilateral", "cardiac")

# Longest grammar sentence is 5 tokens ("both lungs show <class> .").
MAX_SENTENCE_TOKENS = 5

_VALIDATION_GRID = 96


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class Ellipse:
    """Axis-aligned ellipse in relative image coordinates ([0, 1] x [0, 1])."""

    cx: float
    cy: float
    rx: float
    ry: float

    def contains(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return ((xs - self.cx) / self.rx) ** 2 + ((ys - self.cy) / self.ry) ** 2 <= 1.0

    def scaled(self, factor: float) -> "Ellipse":
        return Ellipse(self.cx, self.cy, self.rx * factor, self.ry * factor)

    def inside_unit_square(self) -> bool:
        return (
            self.cx - self.rx >= 0.0
            and self.cx + self.rx <= 1.0
            and self.cy - self.ry >= 0.0
            and self.cy + self.ry <= 1.0
        )


def _coord_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Relative coordinates of pixel centers: x along columns, y along rows."""
    centers = (np.arange(size, dtype=np.float64) + 0.5) / size
    xs = np.broadcast_to(centers[None, :], (size, size))
    ys = np.broadcast_to(centers[:, None], (size, size))
    return xs, ys


@dataclass(frozen=True)
class AbnormalitySpec:
    class_id: int
    region: Ellipse
    kind: str  # "ellipse" (hard patch) or "haze" (gaussian falloff)
    intensity_delta: float
    laterality: str

    def validate(self, n_classes: int) -> None:
        if not 0 <= self.class_id < n_classes:
            raise SceneError(f"abnormality class_id {self.class_id} outside [0, {n_classes})")
        if self.kind not in ("ellipse", "haze"):
            raise SceneError(f"unknown abnormality kind {self.kind!r}")
        if not 0.0 < self.intensity_delta <= 1.0:
            raise SceneError(f"intensity_delta {self.intensity_delta} outside (0, 1]")
        if self.laterality not in LATERALITIES:
            raise SceneError(f"unknown laterality {self.laterality!r}")


@dataclass(frozen=True)
class SceneSpec:
    left_lung: Ellipse
    right_lung: Ellipse
    heart: Ellipse
    abnormalities: tuple[AbnormalitySpec, ...] = ()
    background: float = 0.52
    lung_delta: float = -0.30
    heart_delta: float = 0.22
    noise_sigma: float = 0.0
    rng_seed: int = 0

    def validate(self, n_classes: int) -> None:
        for name, e in (("left_lung", self.left_lung), ("right_lung", self.right_lung)):
            if not e.inside_unit_square():
                raise SceneError(f"{name} ellipse leaves the image bounds: {e}")
        if not 0.0 <= self.noise_sigma <= 0.2:
            raise SceneError(f"noise_sigma {self.noise_sigma} outside [0, 0.2]")
        xs, ys = _coord_grid(_VALIDATION_GRID)
        left = self.left_lung.contains(xs, ys)
        right = self.right_lung.contains(xs, ys)
        heart = self.heart.contains(xs, ys)
        if np.any(left & right):
            raise SceneError("lung ellipses overlap")
        if not (np.any(heart & left) and np.any(heart & right)):
            raise SceneError("heart ellipse does not overlap both medial lung edges")
        lungs = left | right
        for ab in self.abnormalities:
            ab.validate(n_classes)
            if not ab.region.inside_unit_square():
                raise SceneError(f"abnormality region leaves the image bounds: {ab.region}")
            support = ab.region.contains(xs, ys)
            target = heart if ab.laterality == "cardiac" else lungs
            if not np.any(support & target):
                raise SceneError(
                    f"abnormality (class {ab.class_id}) region misses the "
                    f"{'heart' if ab.laterality == 'cardiac' else 'lung mask'}"
                )

    def present_classes(self) -> tuple[int, ...]:
        return tuple(sorted({ab.class_id for ab in self.abnormalities}))


def scene_to_dict(scene: SceneSpec) -> dict:
    return dataclasses.asdict(scene)


def scene_from_dict(d: dict) -> SceneSpec:
    abs_ = tuple(
        AbnormalitySpec(
            class_id=int(a["class_id"]),
            region=Ellipse(**a["region"]),
            kind=a["kind"],
            intensity_delta=float(a["intensity_delta"]),
            laterality=a["laterality"],
        )
        for a in d["abnormalities"]
    )
    return SceneSpec(
        left_lung=Ellipse(**d["left_lung"]),
        right_lung=Ellipse(**d["right_lung"]),
        heart=Ellipse(**d["heart"]),
        abnormalities=abs_,
        background=float(d["background"]),
        lung_delta=float(d["lung_delta"]),
        heart_delta=float(d["heart_delta"]),
        noise_sigma=float(d["noise_sigma"]),
        rng_seed=int(d["rng_seed"]),
    )


# ---------------------------------------------------------------------------
# rendering


def render_image(scene: SceneSpec, size: int, n_classes: int | None = None) -> np.ndarray:
    """Composite a scene into a size x size image with values in [0, 1].

    Composition is additive: background + lung fields + heart silhouette +
    abnormality deltas + gaussian noise, then clipped. Noise comes from
    scene.rng_seed only, so geometry is independent of the noise draw.
    Values are quantized to the 8-bit grid (multiples of 1/255) so that
    PNG round-trips reproduce the array bit-exactly.
    """
    scene.validate(n_classes if n_classes is not None else 1 << 30)
    xs, ys = _coord_grid(size)
    img = np.full((size, size), scene.background, dtype=np.float64)
    img += scene.lung_delta * scene.left_lung.contains(xs, ys)
    img += scene.lung_delta * scene.right_lung.contains(xs, ys)
    img += scene.heart_delta * scene.heart.contains(xs, ys)
    for ab in scene.abnormalities:
        r = ab.region
        if ab.kind == "ellipse":
            img += ab.intensity_delta * r.contains(xs, ys)
        else:
            q = ((xs - r.cx) / r.rx) ** 2 + ((ys - r.cy) / r.ry) ** 2
            img += ab.intensity_delta * np.exp(-q)
    if scene.noise_sigma > 0:
        rng = np.random.default_rng(scene.rng_seed)
        img += rng.normal(0.0, scene.noise_sigma, size=img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def rasterize_mask(scene: SceneSpec, size: int) -> np.ndarray:
    """Binary union of both lung ellipses, evaluated at pixel centers."""
    xs, ys = _coord_grid(size)
    mask = scene.left_lung.contains(xs, ys) | scene.right_lung.contains(xs, ys)
    return mask.astype(np.uint8)


def rasterize_region(ab: AbnormalitySpec, size: int) -> np.ndarray:
    """Support of one abnormality (the unit ellipse, for both patch kinds)."""
    xs, ys = _coord_grid(size)
    return ab.region.contains(xs, ys).astype(np.uint8)


# ---------------------------------------------------------------------------
# vocabulary and reports


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    class_names: tuple[str, ...]

    @classmethod
    def for_classes(cls, class_names: tuple[str, ...] | list[str]) -> "Vocabulary":
        class_names = tuple(class_names)
        tokens = RESERVED_TOKENS + BASE_WORDS + tuple(
            c for c in class_names if c not in BASE_WORDS
        )
        if len(tokens) != len(set(tokens)):
            raise VocabularyError("duplicate tokens in vocabulary")
        if len(tokens) > 64:
            raise VocabularyError(f"vocabulary size {len(tokens)} exceeds 64")
        return cls(tokens=tokens, class_names=class_names)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise VocabularyError(f"token {token!r} not in vocabulary") from None

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise VocabularyError(f"token id {idx} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[idx]

    def encode_words(self, words: list[str]) -> list[int]:
        return [self.id_of(w) for w in words]

    def decode(self, ids: list[int], strip_special: bool = True) -> str:
        words = []
        for i in ids:
            tok = self.token_of(int(i))
            if strip_special and tok in RESERVED_TOKENS:
                continue
            words.append(tok)
        return " ".join(words)

    def content_hash(self) -> str:
        import hashlib

        payload = json.dumps(
            {"tokens": list(self.tokens), "classes": list(self.class_names)},
            sort_keys=True,
        ).encode()
        return hashlib.sha256(payload).hexdigest()

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(
                {"tokens": list(self.tokens), "classes": list(self.class_names)},
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "Vocabulary":
        d = json.loads(Path(path).read_text())
        return cls(tokens=tuple(d["tokens"]), class_names=tuple(d["classes"]))


def report_sentences(scene: SceneSpec, class_names: tuple[str, ...]) -> list[str]:
    """Template sentences for the scene's findings, in class-id order."""
    by_class: dict[int, set[str]] = {}
    for ab in scene.abnormalities:
        sides = by_class.setdefault(ab.class_id, set())
        if ab.laterality == "bilateral":
            sides.update(("left", "right"))
        else:
            sides.add(ab.laterality)
    sentences = []
    for cid in sorted(by_class):
        name = class_names[cid]
        sides = by_class[cid]
        if "cardiac" in sides:
            sentences.append(f"heart shows {name} .")
        elif {"left", "right"} <= sides:
            sentences.append(f"both lungs show {name} .")
        elif "left" in sides:
            sentences.append(f"left lung shows {name} .")
        else:
            sentences.append(f"right lung shows {name} .")
    if not sentences:
        sentences.append("no acute findings .")
    return sentences


def make_report(scene: SceneSpec, vocab: Vocabulary, max_report_len: int) -> list[int]:
    """Tokenize the scene's template report: BOS-prefixed, EOS-terminated."""
    words: list[str] = []
    for s in report_sentences(scene, vocab.class_names):
        words.extend(s.split())
    ids = [BOS_ID] + vocab.encode_words(words) + [EOS_ID]
    if len(ids) > max_report_len:
        raise ConfigurationError(
            f"max_report_len: report needs {len(ids)} tokens but the limit is {max_report_len}"
        )
    return ids


# ---------------------------------------------------------------------------
# dataset config and sample container


@dataclass(frozen=True)
class DatasetConfig:
    n_samples: int = 600
    image_size: int = 64
    classes: tuple[str, ...] = DEFAULT_CLASSES
    class_prevalence: tuple[float, ...] = (0.3, 0.3, 0.3, 0.3)
    max_report_len: int = 24
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    master_seed: int = 20240

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ConfigurationError(f"n_samples: must be >= 1, got {self.n_samples}")
        if self.image_size < 16:
            raise ConfigurationError(f"image_size: must be >= 16, got {self.image_size}")
        if not self.classes:
            raise ConfigurationError("classes: must be nonempty")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigurationError("classes: names must be unique")
        for c in self.classes:
            if not c or any(ch.isspace() for ch in c):
                raise ConfigurationError(f"classes: invalid class name {c!r}")
        if len(self.class_prevalence) != len(self.classes):
            raise ConfigurationError(
                "class_prevalence: length "
                f"{len(self.class_prevalence)} != number of classes {len(self.classes)}"
            )
        for p in self.class_prevalence:
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"class_prevalence: value {p} outside [0, 1]")
        floor = 2 + MAX_SENTENCE_TOKENS * len(self.classes)
        if self.max_report_len < floor:
            raise ConfigurationError(
                f"max_report_len: must be >= {floor} for {len(self.classes)} classes, "
                f"got {self.max_report_len}"
            )
        if len(self.split_ratios) != 3:
            raise ConfigurationError("split_ratios: must have exactly 3 entries")
        if any(r < 0 for r in self.split_ratios):
            raise ConfigurationError(f"split_ratios: negative ratio in {self.split_ratios}")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigurationError(
                f"split_ratios: must sum to 1, got {sum(self.split_ratios)}"
            )
        if not 0 <= self.master_seed < 2**63:
            raise ConfigurationError(f"master_seed: {self.master_seed} outside [0, 2^63)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        kwargs = dict(d)
        for key in ("classes", "class_prevalence", "split_ratios"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class Sample:
    index: int
    image: np.ndarray  # (H, W) float in [0, 1]
    labels: np.ndarray  # (C,) uint8 multi-hot
    mask: np.ndarray  # (H, W) uint8 lung mask
    report: list[int]
    scene: SceneSpec


# ---------------------------------------------------------------------------
# scene sampling


def _sample_point_in_ellipse(rng: np.random.Generator, e: Ellipse, max_frac: float) -> tuple[float, float]:
    theta = rng.uniform(0.0, 2.0 * math.pi)
    r = max_frac * math.sqrt(rng.uniform(0.0, 1.0))
    return e.cx + r * e.rx * math.cos(theta), e.cy + r * e.ry * math.sin(theta)


def _build_abnormality(
    rng: np.random.Generator,
    class_id: int,
    class_name: str,
    left: Ellipse,
    right: Ellipse,
    heart: Ellipse,
    side: str,
) -> AbnormalitySpec:
    lung = left if side == "left" else right
    if class_name == "cardiomegaly":
        region = heart.scaled(rng.uniform(1.3, 1.5))
        return AbnormalitySpec(class_id, region, "ellipse", rng.uniform(0.18, 0.28), "cardiac")
    if class_name == "infiltration":
        cx, cy = _sample_point_in_ellipse(rng, lung, 0.45)
        region = Ellipse(cx, cy, rng.uniform(0.09, 0.13), rng.uniform(0.09, 0.13))
        return AbnormalitySpec(class_id, region, "haze", rng.uniform(0.25, 0.40), side)
    if class_name == "consolidation":
        cx, cy = _sample_point_in_ellipse(rng, lung, 0.5)
        region = Ellipse(cx, cy, rng.uniform(0.05, 0.075), rng.uniform(0.05, 0.075))
        return AbnormalitySpec(class_id, region, "ellipse", rng.uniform(0.35, 0.50), side)
    if class_name == "pleural_effusion":
        cy = lung.cy + lung.ry * rng.uniform(0.50, 0.62)
        region = Ellipse(
            lung.cx,
            cy,
            lung.rx * rng.uniform(0.75, 0.95),
            lung.ry * rng.uniform(0.14, 0.20),
        )
        return AbnormalitySpec(class_id, region, "ellipse", rng.uniform(0.30, 0.45), side)
    # fallback for extended class sets: a compact nodule with class-dependent size
    cx, cy = _sample_point_in_ellipse(rng, lung, 0.5)
    base = 0.045 + 0.012 * (class_id % 3)
    region = Ellipse(cx, cy, base * rng.uniform(0.9, 1.1), base * rng.uniform(0.9, 1.1))
    return AbnormalitySpec(class_id, region, "ellipse", 0.30 + 0.03 * (class_id % 5), side)


def build_scene(
    rng: np.random.Generator,
    present_class_ids: tuple[int, ...],
    class_names: tuple[str, ...],
    allow_bilateral: bool = True,
) -> SceneSpec:
    """Sample one valid scene containing exactly the given abnormality classes."""
    left = Ellipse(
        cx=rng.uniform(0.285, 0.315),
        cy=rng.uniform(0.42, 0.46),
        rx=rng.uniform(0.128, 0.152),
        ry=rng.uniform(0.24, 0.28),
    )
    right = Ellipse(
        cx=rng.uniform(0.685, 0.715),
        cy=rng.uniform(0.42, 0.46),
        rx=rng.uniform(0.128, 0.152),
        ry=rng.uniform(0.24, 0.28),
    )
    heart = Ellipse(
        cx=rng.uniform(0.49, 0.51),
        cy=rng.uniform(0.585, 0.615),
        rx=rng.uniform(0.12, 0.14),
        ry=rng.uniform(0.138, 0.162),
    )
    abnormalities: list[AbnormalitySpec] = []
    for cid in sorted(present_class_ids):
        name = class_names[cid]
        side = "left" if rng.uniform() < 0.5 else "right"
        bilateral = (
            allow_bilateral and name == "infiltration" and rng.uniform() < 0.15
        )
        if bilateral:
            for s in ("left", "right"):
                abnormalities.append(
                    _build_abnormality(rng, cid, name, left, right, heart, s)
                )
        else:
            abnormalities.append(
                _build_abnormality(rng, cid, name, left, right, heart, side)
            )
    scene = SceneSpec(
        left_lung=left,
        right_lung=right,
        heart=heart,
        abnormalities=tuple(abnormalities),
        background=rng.uniform(0.50, 0.54),
        lung_delta=-rng.uniform(0.28, 0.32),
        heart_delta=rng.uniform(0.20, 0.24),
        noise_sigma=rng.uniform(0.01, 0.04),
        rng_seed=int(rng.integers(0, 2**63 - 1)),
    )
    scene.validate(len(class_names))
    return scene


def sample_rng(master_seed: int, index: int) -> np.random.Generator:
    """Per-sample stream: SeedSequence(master_seed, spawn_key=(0, index))."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(0, index)))


def generate_dataset(config: DatasetConfig) -> tuple[list[Sample], Vocabulary]:
    """Render n_samples deterministic samples with per-class exact prevalence.

    Class c is present in exactly round(n * prevalence_c) samples, chosen by
    a seeded permutation, so empirical prevalence matches the config up to
    rounding regardless of n.
    """
    config.validate()
    vocab = Vocabulary.for_classes(config.classes)
    n = config.n_samples
    positives: list[np.ndarray] = []
    for cid, p in enumerate(config.class_prevalence):
        k = int(round(n * p))
        rng_c = np.random.default_rng(np.random.SeedSequence(config.master_seed, spawn_key=(1, cid)))
        chosen = rng_c.permutation(n)[:k]
        flags = np.zeros(n, dtype=bool)
        flags[chosen] = True
        positives.append(flags)
    samples: list[Sample] = []
    for i in range(n):
        rng = sample_rng(config.master_seed, i)
        present = tuple(cid for cid in range(len(config.classes)) if positives[cid][i])
        scene = build_scene(rng, present, config.classes)
        image = render_image(scene, config.image_size, n_classes=len(config.classes))
        mask = rasterize_mask(scene, config.image_size)
        labels = np.zeros(len(config.classes), dtype=np.uint8)
        labels[list(present)] = 1
        report = make_report(scene, vocab, config.max_report_len)
        samples.append(Sample(i, image, labels, mask, report, scene))
    return samples, vocab


def probe_scene(
    class_id: int,
    class_names: tuple[str, ...],
    seed: int,
) -> SceneSpec:
    """A scene with exactly one abnormality, for localization probes."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3, class_id)))
    return build_scene(rng, (class_id,), class_names, allow_bilateral=False)


# ---------------------------------------------------------------------------
# splitting


def _split_sizes(n: int, ratios: tuple[float, float, float]) -> list[int]:
    base = [int(math.floor(n * r)) for r in ratios]
    rem = n - sum(base)
    fracs = sorted(
        range(3), key=lambda i: (-(n * ratios[i] - base[i]), i)
    )
    for i in range(rem):
        base[fracs[i]] += 1
    return base


def split(
    samples: list[Sample],
    ratios: tuple[float, float, float],
    seed: int,
) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Deterministic label-pattern-stratified split into train/val/test.

    Within each multi-hot label pattern, samples are dealt greedily against
    the pattern's proportional quota, subject to exact global split sizes,
    which keeps per-class prevalence close to global in every split.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split_ratios: must sum to 1, got {sum(ratios)}")
    if any(r < 0 for r in ratios):
        raise ConfigurationError(f"split_ratios: negative ratio in {ratios}")
    n = len(samples)
    sizes = _split_sizes(n, ratios)
    caps = list(sizes)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    groups: dict[tuple[int, ...], list[int]] = {}
    for pos, s in enumerate(samples):
        groups.setdefault(tuple(int(v) for v in s.labels), []).append(pos)
    out: tuple[list[Sample], ...] = ([], [], [])
    for pattern in sorted(groups):
        members = groups[pattern]
        order = rng.permutation(len(members))
        desired = [len(members) * r for r in ratios]
        assigned = [0, 0, 0]
        for j in order:
            best = max(
                (s for s in range(3) if caps[s] > 0),
                key=lambda s: (desired[s] - assigned[s], -s),
            )
            out[best].append(members[j])
            assigned[best] += 1
            caps[best] -= 1
    result = tuple(sorted((samples[p] for p in part), key=lambda s: s.index) for part in out)
    for name, ratio, part in zip(("train", "val", "test"), ratios, result):
        if ratio > 0 and not part:
            raise ConfigurationError(f"split_ratios: {name} split is empty at ratio {ratio}")
    return result  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# on-disk dataset


def _to_png(path: Path, arr: np.ndarray) -> None:
    PILImage.fromarray(arr.astype(np.uint8), mode="L").save(path)


def write_dataset(
    samples: list[Sample],
    vocab: Vocabulary,
    config: DatasetConfig,
    outdir: str | Path,
) -> Path:
    """Write images/, masks/, manifest.jsonl, vocab.json, config.json."""
    outdir = Path(outdir)
    (outdir / "images").mkdir(parents=True, exist_ok=True)
    (outdir / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        _to_png(outdir / "images" / f"{s.index:06}.png", np.round(s.image * 255.0))
        _to_png(outdir / "masks" / f"{s.index:06}.png", s.mask * 255)
        record = {
            "index": s.index,
            "labels": [int(v) for v in s.labels],
            "report_tokens": list(s.report),
            "report_text": vocab.decode(s.report),
            "scene": scene_to_dict(s.scene),
        }
        lines.append(json.dumps(record, sort_keys=True, separators=(",", ":")))
    (outdir / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    vocab.to_json(outdir / "vocab.json")
    (outdir / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    return outdir


def load_dataset(path: str | Path) -> tuple[list[Sample], Vocabulary, DatasetConfig]:
    path = Path(path)
    if not (path / "manifest.jsonl").exists():
        raise ConfigurationError(f"dataset: no manifest.jsonl under {path}")
    config = DatasetConfig.from_dict(json.loads((path / "config.json").read_text()))
    vocab = Vocabulary.from_json(path / "vocab.json")
    samples = []
    for line in (path / "manifest.jsonl").read_text().splitlines():
        rec = json.loads(line)
        idx = int(rec["index"])
        img = np.asarray(PILImage.open(path / "images" / f"{idx:06}.png"), dtype=np.float64) / 255.0
        mask = (np.asarray(PILImage.open(path / "masks" / f"{idx:06}.png")) > 127).astype(np.uint8)
        samples.append(
            Sample(
                index=idx,
                image=img,
                labels=np.asarray(rec["labels"], dtype=np.uint8),
                mask=mask,
                report=[int(t) for t in rec["report_tokens"]],
                scene=scene_from_dict(rec["scene"]),
            )
        )
    return samples, vocab, config
