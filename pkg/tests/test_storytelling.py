"""Story assembly, audience contracts, and deterministic rendering."""

import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from distill_story.errors import AssemblyError, DomainError, RenderError
from distill_story.interpretability import LimeConfig, LimeExplanation
from distill_story.models import MultiTaskOutput
from distill_story.storytelling import (
    NO_FINDINGS_SENTENCE,
    Story,
    StoryEvidence,
    StorySection,
    TECHNICAL_KINDS,
    build_story,
    cam_laterality,
    narrative_sentence,
    predicted_classes,
    render_html,
    render_json,
    report_mentions,
    story_dict,
    story_from_dict,
)

CLASS_NAMES = ("infiltration", "consolidation", "pleural_effusion", "cardiomegaly")


def make_output(logits=(2.0, -3.0, 1.5, -1.0)):
    return MultiTaskOutput(
        class_logits=np.array(logits, dtype=np.float64),
        mask_logits=np.zeros((16, 16)),
        tokens=(5, 6, 2),
        step_attention=np.full((3, 4), 0.25),
        feature_grid=(2, 2),
    )


def make_lime(seed=0):
    return LimeExplanation(
        weights=np.linspace(-1, 1, 9),
        intercept=0.5,
        r2=0.875,
        config=LimeConfig(n_samples=16, top_k=3, seed=seed),
    )


def make_evidence(**over):
    fields = dict(
        sample_id=7,
        class_names=CLASS_NAMES,
        report_text=(
            "left lung shows infiltration . right lung shows pleural_effusion ."
        ),
        segmentation_overlay="assets/seg.png",
        cam_overlays={0: "assets/cam_infiltration.png", 2: "assets/cam_pleural.png"},
        campp_overlays={0: "assets/campp_infiltration.png"},
        attention_images=(("left", "assets/att_00.png"), ("lung", "assets/att_01.png")),
        lime_tables={0: make_lime(0), 2: make_lime(1)},
        lateralities={0: "left", 2: "right"},
        losses={"classification": 0.25, "segmentation": 0.125, "report": 0.5},
        agreement={"abnormality": 0.9, "segmentation": 0.95, "report": 0.875},
    )
    fields.update(over)
    return StoryEvidence(**fields)


class TestSectionOrder:
    def test_domain_expert_order(self):
        story = build_story(make_output(), make_evidence(), "domain_expert")
        assert story.kinds() == [
            "finding",
            "finding",
            "segmentation",
            "report_text",
            "cam_gallery",
            "narrative",
        ]

    def test_ml_practitioner_order_and_required_kinds(self):
        story = build_story(make_output(), make_evidence(), "ml_practitioner")
        assert story.kinds() == [
            "finding",
            "finding",
            "segmentation",
            "report_text",
            "metrics",
            "lime_table",
            "lime_table",
            "cam_gallery",
            "attention_gallery",
        ]
        assert {"metrics", "lime_table", "cam_gallery", "attention_gallery"} <= set(
            story.kinds()
        )

    def test_two_finding_sample_counts(self):
        story = build_story(make_output(), make_evidence(), "ml_practitioner")
        assert story.kinds().count("lime_table") == 2
        cams = [s for s in story.sections if s.kind == "cam_gallery"]
        assert len(cams[0].payload["images"]) >= 2


class TestFindingsContract:
    def test_findings_match_predicted_positives(self):
        out = make_output()
        story = build_story(out, make_evidence(), "domain_expert")
        finding_ids = [s.payload["class_id"] for s in story.sections if s.kind == "finding"]
        assert finding_ids == predicted_classes(out, 0.5) == [0, 2]

    def test_no_findings_story(self):
        out = make_output(logits=(-4.0, -4.0, -4.0, -4.0))
        ev = make_evidence(cam_overlays={}, lime_tables={}, lateralities={})
        story = build_story(out, ev, "domain_expert")
        assert "finding" not in story.kinds()
        assert "cam_gallery" not in story.kinds()
        narrative = [s for s in story.sections if s.kind == "narrative"][0]
        assert narrative.payload["sentences"] == [NO_FINDINGS_SENTENCE]
        assert "no acute findings" in narrative.payload["sentences"][0]

    def test_missing_explanation_names_class(self):
        ev = make_evidence(cam_overlays={0: "assets/cam_infiltration.png"})
        with pytest.raises(AssemblyError, match="pleural_effusion"):
            build_story(make_output(), ev, "domain_expert")

    def test_missing_lime_also_rejected(self):
        ev = make_evidence(lime_tables={0: make_lime()})
        with pytest.raises(AssemblyError, match="pleural_effusion"):
            build_story(make_output(), ev, "ml_practitioner")

    def test_threshold_is_respected(self):
        ev = make_evidence(
            threshold=0.85,
            cam_overlays={0: "assets/cam.png"},
            lime_tables={0: make_lime()},
            lateralities={0: "left"},
        )
        story = build_story(make_output(), ev, "domain_expert")
        ids = [s.payload["class_id"] for s in story.sections if s.kind == "finding"]
        assert ids == [0]


class TestAudiencePartition:
    def test_domain_expert_has_no_technical_sections(self):
        story = build_story(make_output(), make_evidence(), "domain_expert")
        assert set(story.kinds()).isdisjoint(TECHNICAL_KINDS)

    def test_direct_construction_enforces_partition(self):
        section = StorySection(
            "metrics",
            {"class_logits": {}, "losses": {}, "agreement": {}, "threshold": 0.5},
        )
        with pytest.raises(AssemblyError):
            Story(sample_id=1, audience="domain_expert", sections=(section,))

    def test_domain_expert_json_has_no_logits_or_loss_keys(self):
        story = build_story(make_output(), make_evidence(), "domain_expert")
        payload = json.loads(render_json(story))

        def keys(node):
            if isinstance(node, dict):
                for k, v in node.items():
                    yield k
                    yield from keys(v)
            elif isinstance(node, list):
                for v in node:
                    yield from keys(v)

        seen = set(keys(payload))
        assert "logits" not in seen and "logit" not in seen
        assert not any("loss" in k for k in seen)

    def test_ml_practitioner_carries_numbers(self):
        story = build_story(make_output(), make_evidence(), "ml_practitioner")
        metrics = [s for s in story.sections if s.kind == "metrics"][0]
        assert metrics.payload["class_logits"]["infiltration"] == 2.0
        assert metrics.payload["losses"]["report"] == 0.5
        finding = [s for s in story.sections if s.kind == "finding"][0]
        assert finding.payload["logit"] == 2.0

    def test_unknown_audience_rejected(self):
        with pytest.raises(DomainError, match="audience"):
            build_story(make_output(), make_evidence(), "radiologist")


class TestNarrative:
    GOLDEN = (
        "The model flags cardiomegaly in the cardiac field; the highlighted "
        "region (see overlay) drove this call, and the generated report "
        "independently mentions cardiomegaly: yes."
    )

    def test_golden_sentence(self):
        assert narrative_sentence("cardiomegaly", "cardiac", True) == self.GOLDEN

    def test_deterministic(self):
        a = narrative_sentence("infiltration", "left", False)
        assert a == narrative_sentence("infiltration", "left", False)
        assert a.endswith("independently mentions infiltration: no.")

    def test_multiword_class_display(self):
        s = narrative_sentence("pleural_effusion", "right", True)
        assert "flags pleural effusion in the right field" in s
        assert "mentions pleural_effusion: yes" in s

    def test_report_mentions_is_token_exact(self):
        assert report_mentions("left lung shows infiltration .", "infiltration")
        assert not report_mentions("no acute findings .", "infiltration")
        assert not report_mentions("infiltrations everywhere", "infiltration")

    def test_story_narrative_uses_report_crosscheck(self):
        story = build_story(make_output(), make_evidence(), "domain_expert")
        sentences = [s for s in story.sections if s.kind == "narrative"][0].payload[
            "sentences"
        ]
        assert sentences[0].endswith("mentions infiltration: yes.")
        assert sentences[1].endswith("mentions pleural_effusion: yes.")


class TestCamLaterality:
    def test_left_mass(self):
        v = np.zeros((8, 8))
        v[:, 0:2] = 1.0
        assert cam_laterality(v) == "left"

    def test_right_mass(self):
        v = np.zeros((8, 8))
        v[:, 6:] = 1.0
        assert cam_laterality(v) == "right"

    def test_central_mass(self):
        v = np.zeros((8, 9))
        v[:, 4] = 1.0
        assert cam_laterality(v) == "central"

    def test_all_zero_reads_central(self):
        assert cam_laterality(np.zeros((4, 4))) == "central"


class TestJsonRendering:
    def test_byte_stable(self):
        story = build_story(make_output(), make_evidence(), "ml_practitioner")
        assert render_json(story) == render_json(story)

    def test_round_trip_structural_equality(self):
        story = build_story(make_output(), make_evidence(), "domain_expert")
        rebuilt = story_from_dict(json.loads(render_json(story)))
        assert render_json(rebuilt) == render_json(story)
        assert rebuilt.kinds() == story.kinds()

    def test_floats_rounded_to_six_decimals(self):
        ev = make_evidence(losses={"classification": 0.123456789})
        story = build_story(make_output(), ev, "ml_practitioner")
        d = story_dict(story)
        metrics = [s for s in d["sections"] if s["kind"] == "metrics"][0]
        assert metrics["payload"]["losses"]["classification"] == 0.123457

    def test_nonfinite_values_rejected(self):
        ev = make_evidence(losses={"classification": float("nan")})
        story = build_story(make_output(), ev, "ml_practitioner")
        with pytest.raises(DomainError, match="non-finite"):
            render_json(story)

    def test_metadata_round_trips(self):
        meta = {"seed": 13, "config_hash": "abc123", "student_checksum": "ff00"}
        story = build_story(make_output(), make_evidence(), "domain_expert", meta)
        payload = json.loads(render_json(story))
        assert payload["metadata"] == meta


class TestHtmlRendering:
    @pytest.fixture()
    def story_dir(self, tmp_path):
        story = build_story(make_output(), make_evidence(), "ml_practitioner")
        assets = tmp_path / "assets"
        assets.mkdir()
        for rel in story.image_paths():
            (tmp_path / rel).write_bytes(b"\x89PNG\r\n\x1a\nstub")
        return story, tmp_path

    def test_renders_wellformed_markup(self, story_dir):
        story, outdir = story_dir
        path = render_html(story, outdir)
        root = ET.fromstring(path.read_text())
        assert root.tag == "html"

    def test_byte_identical_rerender(self, story_dir):
        story, outdir = story_dir
        first = render_html(story, outdir).read_bytes()
        second = render_html(story, outdir).read_bytes()
        assert first == second

    def test_references_every_image_exactly_once(self, story_dir):
        story, outdir = story_dir
        root = ET.fromstring(render_html(story, outdir).read_text())
        srcs = [img.get("src") for img in root.iter("img")]
        assert sorted(srcs) == sorted(story.image_paths())
        assert len(srcs) == len(set(srcs))

    def test_missing_asset_raises(self, story_dir):
        story, outdir = story_dir
        (outdir / story.image_paths()[0]).unlink()
        with pytest.raises(RenderError, match="missing asset"):
            render_html(story, outdir)

    def test_text_is_escaped(self, tmp_path):
        ev = make_evidence(
            report_text="tokens & <angles>",
            cam_overlays={},
            lime_tables={},
            lateralities={},
        )
        out = make_output(logits=(-4.0, -4.0, -4.0, -4.0))
        story = build_story(out, ev, "domain_expert")
        (tmp_path / "assets").mkdir()
        (tmp_path / "assets" / "seg.png").write_bytes(b"x")
        page = render_html(story, tmp_path).read_text()
        assert "tokens &amp; &lt;angles&gt;" in page
        ET.fromstring(page)


class TestSectionValidation:
    def test_unknown_kind_rejected(self):
        with pytest.raises(DomainError, match="kind"):
            StorySection("saliency", {})

    def test_missing_payload_keys_rejected(self):
        with pytest.raises(DomainError, match="missing keys"):
            StorySection("finding", {"class_id": 0})

    def test_story_requires_known_audience(self):
        with pytest.raises(DomainError, match="audience"):
            Story(sample_id=0, audience="expert", sections=())
