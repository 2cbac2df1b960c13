"""Audience-tagged explanation bundles.

The same evidence (predictions, attribution overlays, generated report) is
assembled into a different ``Story`` per audience: healthcare-facing stories
carry overlays and plain-language narrative sentences, practitioner-facing
stories additionally carry every numeric artifact (logits, losses,
surrogate-model tables, attention galleries, agreement metrics).

Stories are pure data. Image payloads are paths relative to the story's
output directory; the pipeline writes those PNGs first, ``build_story``
assembles the structure, and the renderers turn it into canonical JSON and a
self-contained static page.
"""

from __future__ import annotations

import html
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AssemblyError, DomainError, RenderError
from .interpretability import LimeExplanation
from .models import MultiTaskOutput

AUDIENCES = ("domain_expert", "ml_practitioner")
SECTION_KINDS = (
    "finding",
    "segmentation",
    "report_text",
    "attention_gallery",
    "cam_gallery",
    "lime_table",
    "metrics",
    "narrative",
)
TECHNICAL_KINDS = frozenset({"metrics", "lime_table"})

_REQUIRED_PAYLOAD_KEYS = {
    "finding": {"class_id", "class_name", "laterality"},
    "segmentation": {"image", "caption"},
    "report_text": {"text"},
    "attention_gallery": {"images"},
    "cam_gallery": {"images"},
    "lime_table": {"class_id", "class_name", "intercept", "r2", "rows"},
    "metrics": {"class_logits", "losses", "agreement", "threshold"},
    "narrative": {"sentences"},
}


@dataclass(frozen=True)
class StorySection:
    kind: str
    payload: dict

    def __post_init__(self):
        if self.kind not in SECTION_KINDS:
            raise DomainError(f"unknown section kind {self.kind!r}")
        missing = _REQUIRED_PAYLOAD_KEYS[self.kind] - set(self.payload)
        if missing:
            raise DomainError(
                f"{self.kind} section payload is missing keys {sorted(missing)}"
            )


@dataclass(frozen=True)
class Story:
    sample_id: int
    audience: str
    sections: tuple[StorySection, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.audience not in AUDIENCES:
            raise DomainError(f"unknown audience {self.audience!r}")
        if self.audience == "domain_expert":
            bad = [s.kind for s in self.sections if s.kind in TECHNICAL_KINDS]
            if bad:
                raise AssemblyError(
                    f"domain_expert story may not contain technical sections {bad}"
                )

    def kinds(self) -> list[str]:
        return [s.kind for s in self.sections]

    def image_paths(self) -> list[str]:
        """Every image payload path, in section order, each exactly once."""
        paths = []
        for s in self.sections:
            if "image" in s.payload:
                paths.append(s.payload["image"])
            for entry in s.payload.get("images", ()):
                paths.append(entry["image"])
        return paths


@dataclass(frozen=True)
class StoryEvidence:
    """Everything assembly needs beyond the raw model output.

    Image fields hold paths relative to the story output directory; the
    pipeline is responsible for having written them before rendering.
    """

    sample_id: int
    class_names: tuple[str, ...]
    report_text: str
    segmentation_overlay: str
    cam_overlays: dict[int, str]
    campp_overlays: dict[int, str]
    attention_images: tuple[tuple[str, str], ...]  # (token text, path)
    lime_tables: dict[int, LimeExplanation]
    lateralities: dict[int, str]
    losses: dict[str, float]
    agreement: dict[str, float]
    threshold: float = 0.5


def report_mentions(report_text: str, class_name: str) -> bool:
    """Whether the generated report contains the class token verbatim."""
    return class_name in report_text.split()


def narrative_sentence(class_name: str, laterality: str, mentions: bool) -> str:
    """Deterministic plain-language justification for one finding."""
    display = class_name.replace("_", " ")
    flag = "yes" if mentions else "no"
    return (
        f"The model flags {display} in the {laterality} field; the highlighted "
        f"region (see overlay) drove this call, and the generated report "
        f"independently mentions {class_name}: {flag}."
    )


NO_FINDINGS_SENTENCE = "The model flags no acute findings in this image."


def cam_laterality(heatmap_values: np.ndarray) -> str:
    """Summarize an attribution map's horizontal mass as a laterality word.

    The heat-weighted column centroid lands in the left, central, or right
    third of the image. All-zero maps read as central.
    """
    v = np.clip(np.asarray(heatmap_values, dtype=np.float64), 0.0, None)
    total = v.sum()
    if total <= 0:
        return "central"
    cols = v.sum(axis=0)
    centroid = float((cols * np.arange(cols.shape[0])).sum() / total)
    frac = centroid / max(cols.shape[0] - 1, 1)
    if frac < 0.4:
        return "left"
    if frac > 0.6:
        return "right"
    return "central"


def predicted_classes(output: MultiTaskOutput, threshold: float) -> list[int]:
    probs = 1.0 / (1.0 + np.exp(-np.asarray(output.class_logits, dtype=np.float64)))
    return [i for i, p in enumerate(probs) if p >= threshold]


def build_story(
    output: MultiTaskOutput,
    explanations: StoryEvidence,
    audience: str,
    metadata: dict | None = None,
) -> Story:
    """Assemble one audience's story from predictions and evidence.

    Section order is fixed: findings, segmentation overlay, report text, then
    audience-specific evidence. Every predicted-positive class must be
    covered by the explanation bundle.
    """
    if audience not in AUDIENCES:
        raise DomainError(f"unknown audience {audience!r}")
    ev = explanations
    predicted = predicted_classes(output, ev.threshold)
    missing = [
        ev.class_names[c]
        for c in predicted
        if c not in ev.cam_overlays or c not in ev.lime_tables or c not in ev.lateralities
    ]
    if missing:
        raise AssemblyError(f"missing explanations for predicted classes {missing}")

    probs = 1.0 / (1.0 + np.exp(-np.asarray(output.class_logits, dtype=np.float64)))
    sections: list[StorySection] = []
    for c in predicted:
        payload = {
            "class_id": c,
            "class_name": ev.class_names[c],
            "laterality": ev.lateralities[c],
        }
        if audience == "ml_practitioner":
            payload["logit"] = float(output.class_logits[c])
            payload["probability"] = float(probs[c])
        sections.append(StorySection("finding", payload))

    sections.append(
        StorySection(
            "segmentation",
            {
                "image": ev.segmentation_overlay,
                "caption": "Lung fields segmented by the model.",
            },
        )
    )
    sections.append(StorySection("report_text", {"text": ev.report_text}))

    if audience == "domain_expert":
        if predicted:
            images = [
                {
                    "class_name": ev.class_names[c],
                    "method": "gradcam",
                    "image": ev.cam_overlays[c],
                }
                for c in predicted
            ]
            sections.append(StorySection("cam_gallery", {"images": images}))
            sentences = [
                narrative_sentence(
                    ev.class_names[c],
                    ev.lateralities[c],
                    report_mentions(ev.report_text, ev.class_names[c]),
                )
                for c in predicted
            ]
        else:
            sentences = [NO_FINDINGS_SENTENCE]
        sections.append(StorySection("narrative", {"sentences": sentences}))
    else:
        sections.append(
            StorySection(
                "metrics",
                {
                    "class_logits": {
                        ev.class_names[i]: float(z)
                        for i, z in enumerate(output.class_logits)
                    },
                    "losses": dict(ev.losses),
                    "agreement": dict(ev.agreement),
                    "threshold": ev.threshold,
                },
            )
        )
        for c in predicted:
            lime = ev.lime_tables[c]
            sections.append(
                StorySection(
                    "lime_table",
                    {
                        "class_id": c,
                        "class_name": ev.class_names[c],
                        "intercept": float(lime.intercept),
                        "r2": float(lime.r2),
                        "rows": [
                            {"segment": seg, "weight": w}
                            for seg, w in lime.top_segments()
                        ],
                    },
                )
            )
        gallery = [
            {
                "class_name": ev.class_names[c],
                "method": "gradcam",
                "image": ev.cam_overlays[c],
            }
            for c in predicted
        ] + [
            {
                "class_name": ev.class_names[c],
                "method": "gradcampp",
                "image": ev.campp_overlays[c],
            }
            for c in predicted
            if c in ev.campp_overlays
        ]
        if gallery:
            sections.append(StorySection("cam_gallery", {"images": gallery}))
        sections.append(
            StorySection(
                "attention_gallery",
                {
                    "images": [
                        {"token": tok, "image": path}
                        for tok, path in ev.attention_images
                    ]
                },
            )
        )

    return Story(
        sample_id=explanations.sample_id,
        audience=audience,
        sections=tuple(sections),
        metadata=dict(metadata or {}),
    )


# ---------------------------------------------------------------------------
# canonical JSON


def _round_floats(obj):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise DomainError(f"non-finite value {obj} cannot be serialized")
        return round(obj, 6)
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def story_dict(story: Story) -> dict:
    """The story as plain data with floats rounded to six decimals."""
    return _round_floats(
        {
            "sample_id": story.sample_id,
            "audience": story.audience,
            "sections": [{"kind": s.kind, "payload": s.payload} for s in story.sections],
            "metadata": story.metadata,
        }
    )


def render_json(story: Story) -> str:
    """Canonical serialization: sorted keys, six-decimal floats, one line."""
    return json.dumps(story_dict(story), sort_keys=True, separators=(",", ":")) + "\n"


def story_from_dict(d: dict) -> Story:
    return Story(
        sample_id=d["sample_id"],
        audience=d["audience"],
        sections=tuple(StorySection(s["kind"], s["payload"]) for s in d["sections"]),
        metadata=d["metadata"],
    )


# ---------------------------------------------------------------------------
# static page rendering


_PAGE_STYLE = """
body { font-family: Georgia, serif; max-width: 52rem; margin: 2rem auto; color: #222; }
h1 { font-size: 1.4rem; border-bottom: 2px solid #335; padding-bottom: 0.4rem; }
h2 { font-size: 1.1rem; margin-top: 1.4rem; }
img { max-width: 20rem; border: 1px solid #ccd; display: block; margin: 0.4rem 0; }
figure { display: inline-block; margin: 0.4rem 0.8rem 0.4rem 0; }
figcaption { font-size: 0.85rem; color: #446; }
table { border-collapse: collapse; margin: 0.6rem 0; }
td, th { border: 1px solid #aab; padding: 0.25rem 0.6rem; font-size: 0.9rem; }
blockquote { background: #f3f4f8; padding: 0.6rem 1rem; font-style: italic; }
.section { margin-bottom: 1.2rem; }
""".strip()


def _esc(text) -> str:
    return html.escape(str(text), quote=True)


def _img(path: str, alt: str) -> str:
    return f'<img src="{_esc(path)}" alt="{_esc(alt)}"/>'


def _figure(path: str, caption: str) -> str:
    return (
        f"<figure>{_img(path, caption)}"
        f"<figcaption>{_esc(caption)}</figcaption></figure>"
    )


def _num(v: float) -> str:
    return f"{v:.6f}"


def _render_section(s: StorySection) -> str:
    p = s.payload
    if s.kind == "finding":
        parts = [
            f"<h2>Finding: {_esc(p['class_name'].replace('_', ' '))}</h2>",
            f"<p>Location: {_esc(p['laterality'])} field.</p>",
        ]
        if "logit" in p:
            parts.append(
                f"<p>logit {_num(p['logit'])}, probability {_num(p['probability'])}</p>"
            )
        return "".join(parts)
    if s.kind == "segmentation":
        return f"<h2>Segmentation</h2>{_figure(p['image'], p['caption'])}"
    if s.kind == "report_text":
        return f"<h2>Generated report</h2><blockquote>{_esc(p['text'])}</blockquote>"
    if s.kind == "narrative":
        items = "".join(f"<li>{_esc(t)}</li>" for t in p["sentences"])
        return f"<h2>Reading</h2><ul>{items}</ul>"
    if s.kind == "cam_gallery":
        figs = "".join(
            _figure(e["image"], f"{e['class_name'].replace('_', ' ')} ({e['method']})")
            for e in p["images"]
        )
        return f"<h2>Highlighted regions</h2>{figs}"
    if s.kind == "attention_gallery":
        figs = "".join(
            _figure(e["image"], f"attention: {e['token']}") for e in p["images"]
        )
        return f"<h2>Attention per generated token</h2>{figs}"
    if s.kind == "lime_table":
        rows = "".join(
            f"<tr><td>{e['segment']}</td><td>{_num(e['weight'])}</td></tr>"
            for e in p["rows"]
        )
        return (
            f"<h2>Surrogate weights: {_esc(p['class_name'].replace('_', ' '))}</h2>"
            f"<table><tr><th>segment</th><th>weight</th></tr>{rows}</table>"
            f"<p>intercept {_num(p['intercept'])}, fit r2 {_num(p['r2'])}</p>"
        )
    if s.kind == "metrics":
        logit_rows = "".join(
            f"<tr><td>{_esc(k)}</td><td>{_num(v)}</td></tr>"
            for k, v in p["class_logits"].items()
        )
        other_rows = "".join(
            f"<tr><td>{_esc(group)}: {_esc(k)}</td><td>{_num(v)}</td></tr>"
            for group in ("losses", "agreement")
            for k, v in p[group].items()
        )
        return (
            f"<h2>Model numbers</h2><table><tr><th>class logit</th><th>value</th></tr>"
            f"{logit_rows}</table><table><tr><th>metric</th><th>value</th></tr>"
            f"{other_rows}</table><p>decision threshold {_num(p['threshold'])}</p>"
        )
    raise DomainError(f"no renderer for section kind {s.kind!r}")


def render_html(story: Story, outdir: str | Path) -> Path:
    """Write a self-contained ``index.html`` for a story.

    Image payloads are paths relative to ``outdir`` and must already exist;
    a missing file is a render error. Output bytes depend only on the story.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for rel in story.image_paths():
        if not (outdir / rel).is_file():
            raise RenderError(f"story references missing asset {rel}")
    title = f"Sample {story.sample_id}: {story.audience.replace('_', ' ')} story"
    body = "".join(
        f'<div class="section" id="section-{i}">{_render_section(s)}</div>'
        for i, s in enumerate(story.sections)
    )
    meta_rows = "".join(
        f"<tr><td>{_esc(k)}</td><td>{_esc(v)}</td></tr>"
        for k, v in sorted(story.metadata.items())
    )
    meta_html = (
        f"<h2>Provenance</h2><table>{meta_rows}</table>" if meta_rows else ""
    )
    page = (
        "<html><head><meta charset=\"utf-8\"/>"
        f"<title>{_esc(title)}</title><style>{_PAGE_STYLE}</style></head>"
        f"<body><h1>{_esc(title)}</h1>{body}{meta_html}</body></html>"
    )
    path = outdir / "index.html"
    path.write_text(page, encoding="utf-8")
    return path
