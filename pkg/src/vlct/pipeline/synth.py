"""Seeded synthetic CT enterography cohort for desk-scale verification.

Each study gets a small abdominal phantom (air, fat rim, soft tissue, a
spine, a few normal bowel loops) and, for abnormal classes, a bright
"wall thickening" ring whose location, axial length and intensity follow
the impression text. Impressions come from rule-consistent templates;
normal studies share two templates so that duplicate impressions occur.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..labeler.rules import ActivityLabel
from ..volume import write_container

TEST_PREVALENCE = (0.312, 0.224, 0.464)

LOCATIONS = {
    # name -> (row, col) ring centre as a fraction of the in-plane field
    "terminal ileum": (0.64, 0.30),
    "jejunum": (0.34, 0.66),
    "sigmoid colon": (0.66, 0.68),
    "ascending colon": (0.38, 0.30),
}
LENGTHS = {"short": 0.22, "long": 0.46}  # fraction of the axial extent
SEVERITY_HU = {"mild": 95, "moderate": 170, "severe": 260}
SEVERITY_WALL = {"mild": 1.6, "moderate": 2.4, "severe": 3.2}

NORMAL_TEMPLATES = (
    ("No evidence of active inflammatory bowel disease.", 0.75),
    ("Normal CT enterography without bowel abnormality.", 0.25),
)
NORMAL_FINDINGS = "Small bowel loops are normal in caliber. No abscess or fistula."
PA_TEMPLATE = ("Mild wall thickening of a {length} segment of the {loc}, "
               "may represent early inflammation.")
PA_FINDINGS = "Mild mural thickening of the {loc}. No abscess."
A_TEMPLATE = "Active inflammation of a {length} segment of the {loc} with {sev} wall thickening."
A_ABSCESS_TEMPLATE = ("Active inflammation of a {length} segment of the {loc} "
                      "complicated by an adjacent abscess.")
A_FINDINGS = "The {loc} shows {sev} mural thickening and hyperenhancement."


@dataclass(frozen=True)
class SyntheticSpec:
    n_studies: int = 100
    class_distribution: tuple[float, float, float] = TEST_PREVALENCE
    signal: float = 1.0
    seed: int = 0
    shape: tuple[int, int, int] = (32, 48, 48)
    spacing: tuple[float, float, float] = (1.5, 1.0, 1.0)
    scout_fraction: float = 0.2      # studies that also get a short (<30 slice) scout series
    repeat_patient_fraction: float = 0.0
    teacher_noise: float = 0.1
    noise_hu: float = 20.0

    def __post_init__(self):
        if abs(sum(self.class_distribution) - 1.0) > 1e-9:
            raise ValueError(f"class distribution must sum to 1, got {self.class_distribution}")
        if self.n_studies < 1:
            raise ValueError("need at least one study")


def largest_remainder(n: int, dist) -> list[int]:
    raw = [n * p for p in dist]
    counts = [math.floor(x) for x in raw]
    order = sorted(range(len(dist)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


@dataclass
class SynthStudy:
    study_id: str
    patient_id: str
    label: ActivityLabel
    impression: str
    findings: str
    attrs: dict = field(default_factory=dict)


def _disk(rr, cc, r0, c0, radius):
    return (rr - r0) ** 2 + (cc - c0) ** 2 <= radius ** 2


def _ring(rr, cc, r0, c0, outer, wall):
    d2 = (rr - r0) ** 2 + (cc - c0) ** 2
    return (d2 <= outer ** 2) & (d2 > max(outer - wall, 0.0) ** 2)


def phantom(rng: np.random.Generator, shape, attrs: dict, signal: float, noise_hu: float):
    """HU volume for one study."""
    nz, ny, nx = shape
    rr, cc = np.mgrid[0:ny, 0:nx].astype(np.float64)
    vol = np.full(shape, -1000.0)
    scale = rng.uniform(0.9, 1.05)
    ry, rx = 0.40 * ny * scale, 0.45 * nx * scale
    body = ((rr - ny / 2) / ry) ** 2 + ((cc - nx / 2) / rx) ** 2
    slab = np.where(body <= 1.0, np.where(body > 0.78, -100.0, 40.0), -1000.0)
    slab[_disk(rr, cc, 0.78 * ny, nx / 2, 0.07 * ny)] = 400.0
    loops = []
    for _ in range(3):
        loops.append((rng.uniform(0.3, 0.7) * ny, rng.uniform(0.25, 0.75) * nx, rng.uniform(2.5, 4.0)))
    for z in range(nz):
        sl = slab.copy()
        for r0, c0, rad in loops:
            sl[_disk(rr, cc, r0, c0, rad)] = 10.0
            sl[_ring(rr, cc, r0, c0, rad, 1.0)] = 60.0
        vol[z] = sl

    if attrs.get("location"):
        fr, fc = LOCATIONS[attrs["location"]]
        r0, c0 = fr * ny, fc * nx
        length = LENGTHS[attrs["length"]]
        start = rng.uniform(0.25, 0.75 - length)
        z0, z1 = int(start * nz), int(math.ceil((start + length) * nz))
        hu = 40.0 + signal * (SEVERITY_HU[attrs["severity"]] - 40.0)
        wall = SEVERITY_WALL[attrs["severity"]]
        outer = 4.0 + wall
        lumen = _disk(rr, cc, r0, c0, outer - wall)
        ring = _ring(rr, cc, r0, c0, outer, wall)
        for z in range(z0, z1):
            vol[z][lumen] = 10.0
            vol[z][ring] = hu
        if attrs.get("abscess"):
            a0, b0 = r0 + 0.5, c0 + (7.0 if c0 < nx / 2 else -7.0)
            for z in range(z0, min(nz, z0 + max(3, (z1 - z0) // 2))):
                vol[z][_disk(rr, cc, a0, b0, 3.5)] = 40.0 + signal * 140.0
                vol[z][_disk(rr, cc, a0, b0, 2.3)] = 15.0

    vol += rng.normal(0.0, noise_hu, shape)
    return np.clip(np.round(vol), -1000, 1000)


def draw_study(rng: np.random.Generator, label: ActivityLabel, idx: int) -> SynthStudy:
    sid = f"S{idx:04d}"
    if label is ActivityLabel.NORMAL:
        texts, weights = zip(*NORMAL_TEMPLATES)
        impression = texts[rng.choice(len(texts), p=weights)]
        return SynthStudy(sid, sid, label, impression, NORMAL_FINDINGS, {})
    loc = list(LOCATIONS)[rng.integers(len(LOCATIONS))]
    length = list(LENGTHS)[rng.integers(len(LENGTHS))]
    if label is ActivityLabel.POSSIBLY_ABNORMAL:
        attrs = {"location": loc, "length": length, "severity": "mild", "abscess": False}
        return SynthStudy(sid, sid, label, PA_TEMPLATE.format(length=length, loc=loc),
                          PA_FINDINGS.format(loc=loc), attrs)
    sev = ("moderate", "severe")[rng.integers(2)]
    abscess = bool(rng.uniform() < 0.2)
    attrs = {"location": loc, "length": length, "severity": sev, "abscess": abscess}
    template = A_ABSCESS_TEMPLATE if abscess else A_TEMPLATE
    return SynthStudy(sid, sid, label, template.format(length=length, loc=loc, sev=sev),
                      A_FINDINGS.format(loc=loc, sev=sev), attrs)


_REPLY = {
    ActivityLabel.NORMAL: "Label: normal",
    ActivityLabel.POSSIBLY_ABNORMAL: "Label: possibly abnormal",
    ActivityLabel.ABNORMAL: "Label: abnormal",
}


def synth(spec: SyntheticSpec, out_dir) -> dict:
    """Write volumes, manifest, reports, ground truth and recorded teacher replies."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([spec.seed, 0x5A17])
    counts = largest_remainder(spec.n_studies, spec.class_distribution)
    labels = [ActivityLabel(c) for c, n in enumerate(counts) for _ in range(n)]
    labels = [labels[i] for i in rng.permutation(len(labels))]

    studies = []
    for idx, label in enumerate(labels):
        st = draw_study(rng, label, idx)
        if studies and rng.uniform() < spec.repeat_patient_fraction:
            st.patient_id = studies[rng.integers(len(studies))].patient_id
        studies.append(st)

    manifest, reports, truth = [], [], []
    replies = {"teacher_a": [], "teacher_b": []}
    for st in studies:
        vrng = np.random.default_rng([spec.seed, int(st.study_id[1:]), 0xB0D1])
        hu = phantom(vrng, spec.shape, st.attrs, spec.signal, spec.noise_hu)
        stored = (hu + 1024).astype(np.int16)
        h, p = write_container(out / "volumes", stored, spec.spacing, st.study_id, "main",
                               slope=1.0, intercept=-1024.0)
        manifest.append({"study_id": st.study_id, "series_id": "main",
                         "header_path": str(h.relative_to(out)), "payload_path": str(p.relative_to(out))})
        if vrng.uniform() < spec.scout_fraction:
            scout = stored[: min(20, stored.shape[0])]
            h, p = write_container(out / "volumes", scout, spec.spacing, st.study_id, "scout",
                                   slope=1.0, intercept=-1024.0)
            manifest.append({"study_id": st.study_id, "series_id": "scout",
                             "header_path": str(h.relative_to(out)),
                             "payload_path": str(p.relative_to(out))})
        reports.append({"study_id": st.study_id, "patient_id": st.patient_id,
                        "findings": st.findings, "impression": st.impression})
        truth.append({"study_id": st.study_id, "label": st.label.key, "attrs": st.attrs})
        for name in replies:
            vote = st.label
            if vrng.uniform() < spec.teacher_noise:
                vote = ActivityLabel((int(vote) + 1 + vrng.integers(2)) % 3)
            replies[name].append({"study_id": st.study_id, "reply": _REPLY[vote]})

    _write_jsonl(out / "manifest.jsonl", manifest)
    _write_jsonl(out / "reports.jsonl", reports)
    _write_jsonl(out / "ground_truth.jsonl", truth)
    for name, rows in replies.items():
        _write_jsonl(out / "teacher_replies" / f"{name}.jsonl", rows)
    (out / "synth_spec.json").write_text(json.dumps(asdict(spec), indent=2))
    return {"studies": len(studies), "counts": counts, "dir": str(out)}


def _write_jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
