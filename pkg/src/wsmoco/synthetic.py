"""Deterministic procedural dialysis cohort: parametric faces whose eyelids, nose
and cheeks swell with fluid load, plus weights, landmarks and a manifest.

Each patient draws from its own RNG stream derived from ``(seed, patient_id)``
so the output does not depend on generation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from ._kernels import paint_ellipse
from ._util import stable_hash
from .data_model import Manifest, Sample, Session, save_manifest
from .preprocessing import LandmarkSet, save_landmarks

# Crop box in face units (x right, y down, origin at the face centre).
CROP_BOX = (-0.6, -0.42, 0.6, 0.44)
EYE_Y = -0.1
NOSE_TIP_Y = 0.2
MOUTH_Y = 0.52


@dataclass(frozen=True)
class CohortSpec:
    n_patients: int = 39
    days_per_patient: tuple[int, int] = (1, 10)
    frames_per_session: int = 100
    image_size: int = 64
    dry_weight_mean_kg: float = 57.7
    dry_weight_sd_kg: float = 11.5
    fluid_gain_mean_kg: float = 2.2
    fluid_gain_sd_kg: float = 0.6
    residual_fluid_fraction: float = 0.05
    appearance_noise: float = 0.02
    seed: int = 17
    # explicit per-patient day counts; overrides days_per_patient when set
    patient_days: tuple[int, ...] = ()
    fluid_gain_day_sd_kg: float = 0.5
    # per-patient dry-weight random-walk step sd is drawn from [0, max]
    weight_walk_sd_max_kg: float = 0.6
    weight_walk_bound_kg: float = 3.0
    post_missing_prob: float = 0.13
    lighting_sd: float = 0.08
    roll_deg_max: float = 6.0
    p_turned: float = 0.06
    p_mouth_open: float = 0.06
    puffiness_scale_kg: float = 2.0
    puffiness_cap: float = 1.0
    # skin blotches placed at random in every frame: label-free nuisance detail
    frame_marks: int = 0
    # per-frame relative sd of expression changes in eyes, lids, nose, cheeks
    expression_sd: float = 0.0
    # explicit dry-weight walk sd per patient (kg); overrides the random draw when set
    walk_sd_kg: tuple[float, ...] = ()

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        lo, hi = self.days_per_patient
        if not 1 <= lo <= hi:
            raise ValueError("days_per_patient must satisfy 1 <= lo <= hi")
        if self.patient_days and (len(self.patient_days) != self.n_patients or min(self.patient_days) < 1):
            raise ValueError("patient_days needs one positive entry per patient")
        if self.frames_per_session < 1:
            raise ValueError("frames_per_session must be >= 1")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if self.fluid_gain_mean_kg <= 0:
            raise ValueError("fluid_gain_mean_kg must be positive")
        if not 0 <= self.residual_fluid_fraction < 1:
            raise ValueError("residual_fluid_fraction must lie in [0, 1)")
        if self.appearance_noise < 0:
            raise ValueError("appearance_noise must be >= 0")
        for name in ("expression_sd", "dry_weight_sd_kg", "fluid_gain_sd_kg", "fluid_gain_day_sd_kg", "weight_walk_sd_max_kg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.post_missing_prob < 1:
            raise ValueError("post_missing_prob must lie in [0, 1)")
        if self.walk_sd_kg and (len(self.walk_sd_kg) != self.n_patients or min(self.walk_sd_kg) < 0):
            raise ValueError("walk_sd_kg needs one non-negative entry per patient")
        if self.frame_marks < 0:
            raise ValueError("frame_marks must be >= 0")
        if self.puffiness_cap <= 0 or self.puffiness_scale_kg <= 0:
            raise ValueError("puffiness parameters must be positive")

    def days_for(self, index: int, rng: np.random.Generator) -> int:
        if self.patient_days:
            return int(self.patient_days[index])
        lo, hi = self.days_per_patient
        return int(rng.integers(lo, hi + 1))


def puffiness(fluid_kg: float, cap: float = 1.0, scale_kg: float = 2.0) -> float:
    """Swelling level for a fluid load: 0 at no excess fluid, rising towards ``cap``."""
    if fluid_kg < 0 or not math.isfinite(fluid_kg):
        raise ValueError(f"fluid load must be a finite non-negative number, got {fluid_kg!r}")
    return cap * -math.expm1(-fluid_kg / scale_kg)


@dataclass(frozen=True)
class PatientLook:
    skin: tuple[float, float, float]
    background: tuple[float, float, float]
    face_w: float
    eye_sep: float
    eye_w: float
    eye_h: float
    nose_w: float
    cheek: float
    lips: tuple[float, float, float]
    lid: float = 0.018
    flush: float = 0.0

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "PatientLook":
        skin = np.clip(np.array([0.82, 0.64, 0.52]) + rng.normal(0, 0.07, 3), 0.3, 0.95)
        return cls(
            skin=tuple(skin),
            background=tuple(rng.uniform(0.1, 0.9, 3)),
            face_w=float(rng.uniform(0.72, 0.86)),
            eye_sep=float(rng.uniform(0.28, 0.36)),
            eye_w=float(rng.uniform(0.1, 0.14)),
            eye_h=float(rng.uniform(0.045, 0.08)),
            nose_w=float(rng.uniform(0.07, 0.11)),
            cheek=float(rng.uniform(0.14, 0.2)),
            lips=tuple(np.clip(np.array([0.7, 0.35, 0.35]) + rng.normal(0, 0.05, 3), 0, 1)),
            lid=float(rng.uniform(0.012, 0.04)),
            flush=float(rng.uniform(0.0, 0.08)),
        )


def render_face(
    look: PatientLook,
    puff: float,
    size: int,
    *,
    roll: float = 0.0,
    shift: tuple[float, float] = (0.0, 0.0),
    turn: float = 0.0,
    mouth_open: bool = False,
    lighting: tuple[float, float, float] = (1.0, 1.0, 1.0),
    noise: np.ndarray | None = None,
    marks: Sequence[tuple] = (),
    expression: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0),
) -> tuple[np.ndarray, LandmarkSet]:
    """Render one frame as uint8 (size, size, 3) and return its landmarks.

    ``turn`` shifts nose and mouth sideways (a head-turn proxy); ``roll``
    tilts the whole face in radians.  ``marks`` are (u, v, a, b, rgb) skin
    blotches in face coordinates, unrelated to fluid load.
    ``expression`` scales eye opening, lid thickness, nose width and cheek
    size (squint, flare, tension), mimicking puffiness without fluid.
    """
    ex_eye, ex_lid, ex_nose, ex_cheek = expression
    canvas = np.empty((size, size, 3), dtype=np.float32)
    canvas[:] = np.asarray(look.background, dtype=np.float32)
    scale = size * 0.55
    cx = size / 2 + shift[0] * size
    cy = size / 2 + shift[1] * size
    c, s = math.cos(roll), math.sin(roll)

    def to_px(u, v):
        return cx + scale * (c * u - s * v), cy + scale * (s * u + c * v)

    def ellipse(u, v, a, b, color, theta=0.0):
        x, y = to_px(u, v)
        paint_ellipse(canvas, x, y, max(a * scale, 0.3), max(b * scale, 0.3), roll + theta, color, 0.8)

    skin = np.asarray(look.skin)
    ellipse(0.0, 0.05, look.face_w * (1 + 0.05 * puff), 1.05, skin)
    red = np.array([1.0, 0.2, 0.0])
    cheek_col = np.clip(skin * (1.04 + 0.05 * puff) + red * (look.flush + 0.04 * puff), 0, 1)
    for side in (-1, 1):
        cheek = look.cheek * ex_cheek * (1 + 0.35 * puff)
        ellipse(side * 0.45, 0.28, cheek, cheek * 0.75, cheek_col)
    for u, v, a, b, col in marks:
        ellipse(u, v, a, b, np.asarray(col))

    eye_open = look.eye_h * ex_eye * (1 - 0.5 * puff)
    lid_col = np.clip(skin * (1.06 + 0.06 * puff) + red * (look.flush + 0.05 * puff), 0, 1)
    brow_col = skin * 0.45
    for side in (-1, 1):
        u = side * look.eye_sep
        ellipse(u, EYE_Y - 0.17, look.eye_w * 1.1, 0.022, brow_col)
        ellipse(u, EYE_Y, look.eye_w, eye_open, (0.95, 0.95, 0.93))
        ellipse(u, EYE_Y, eye_open * 0.9, eye_open * 0.9, (0.18, 0.12, 0.1))
        ellipse(u, EYE_Y - eye_open * 0.95, look.eye_w * 1.15, look.lid * ex_lid + 0.055 * puff, lid_col)

    nose_u = turn
    nw = look.nose_w * ex_nose * (1 + 0.4 * puff)
    ellipse(nose_u * 0.6, 0.05, look.nose_w * 0.55, 0.17, skin * 0.94)
    ellipse(nose_u, NOSE_TIP_Y, nw, nw * 0.75, np.clip(skin * (0.9 + 0.05 * puff), 0, 1))
    for side in (-1, 1):
        ellipse(nose_u + side * nw * 0.65, NOSE_TIP_Y + nw * 0.45, nw * 0.28, nw * 0.18, skin * 0.35)

    mouth_h = 0.13 if mouth_open else 0.028
    ellipse(turn, MOUTH_Y, 0.17, mouth_h, look.lips)
    if mouth_open:
        ellipse(turn, MOUTH_Y, 0.13, mouth_h * 0.7, (0.15, 0.05, 0.05))

    canvas *= np.asarray(lighting, dtype=np.float32)
    if noise is not None:
        canvas += noise
    img = np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8)

    points = {
        "left_eye": to_px(-look.eye_sep, EYE_Y),
        "right_eye": to_px(look.eye_sep, EYE_Y),
        "nose_tip": to_px(nose_u, NOSE_TIP_Y),
        "mouth_left": to_px(turn - 0.17, MOUTH_Y),
        "mouth_right": to_px(turn + 0.17, MOUTH_Y),
        "mouth_top": to_px(turn, MOUTH_Y - mouth_h),
        "mouth_bottom": to_px(turn, MOUTH_Y + mouth_h),
        "crop_tl": to_px(CROP_BOX[0], CROP_BOX[1]),
        "crop_tr": to_px(CROP_BOX[2], CROP_BOX[1]),
        "crop_br": to_px(CROP_BOX[2], CROP_BOX[3]),
        "crop_bl": to_px(CROP_BOX[0], CROP_BOX[3]),
    }
    return img, LandmarkSet(points)


def eye_nose_region(output_size: int, margin: float = 0.06) -> np.ndarray:
    """Boolean mask of the eye and nose region in aligned-crop coordinates."""
    x0, y0, x1, y1 = CROP_BOX
    ys, xs = np.mgrid[0:output_size, 0:output_size] + 0.5
    u = x0 + xs / output_size * (x1 - x0)
    v = y0 + ys / output_size * (y1 - y0)
    eyes = (np.abs(np.abs(u) - 0.32) <= 0.16 + margin) & (np.abs(v - EYE_Y) <= 0.1 + margin)
    nose = (np.abs(u) <= 0.14 + margin) & (v >= EYE_Y) & (v <= NOSE_TIP_Y + 0.1 + margin)
    return eyes | nose


@dataclass
class PatientRecord:
    patient_id: str
    look: PatientLook
    dry_weight_kg: list[float] = field(default_factory=list)
    walk_sd_kg: float = 0.0
    sessions: list[dict] = field(default_factory=list)


def _patient_stream(spec: CohortSpec, patient_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, stable_hash("patient", patient_id)]))


def _draw_marks(rng: np.random.Generator, n: int, look: PatientLook) -> tuple:
    out = []
    for _ in range(n):
        u, v = rng.uniform(-0.55, 0.55), rng.uniform(-0.4, 0.42)
        a, b = rng.uniform(0.03, 0.08, 2)
        col = tuple(np.clip(np.asarray(look.skin) * rng.uniform(0.55, 1.25, 3), 0, 1))
        out.append((float(u), float(v), float(a), float(b), col))
    return tuple(out)


def simulate_patient(spec: CohortSpec, index: int) -> PatientRecord:
    """Draw appearance and the per-day weight trajectory for one patient."""
    pid = f"P{index + 1:03d}"
    rng = _patient_stream(spec, pid)
    look = PatientLook.draw(rng)
    n_days = spec.days_for(index, rng)
    dry0 = max(30.0, rng.normal(spec.dry_weight_mean_kg, spec.dry_weight_sd_kg))
    gain_mean = max(0.5, rng.normal(spec.fluid_gain_mean_kg, spec.fluid_gain_sd_kg))
    walk_sd = float(rng.uniform(0.0, spec.weight_walk_sd_max_kg))
    if spec.walk_sd_kg:
        walk_sd = float(spec.walk_sd_kg[index])
    rec = PatientRecord(pid, look, walk_sd_kg=walk_sd)
    drift = 0.0
    for day in range(1, n_days + 1):
        if day > 1:
            drift = float(np.clip(drift + rng.normal(0.0, walk_sd), -spec.weight_walk_bound_kg, spec.weight_walk_bound_kg))
        dry = round(dry0 + drift, 1)
        gain = round(max(0.3, gain_mean + rng.normal(0.0, spec.fluid_gain_day_sd_kg)), 1)
        pre_w = round(dry + gain, 1)
        post_w = round(dry + spec.residual_fluid_fraction * gain, 1)
        if post_w >= pre_w:
            post_w = round(pre_w - 0.1, 1)
        rec.dry_weight_kg.append(dry)
        has_post = day == 1 or rng.random() >= spec.post_missing_prob
        lighting_pre = tuple(np.clip(rng.normal(1.0, spec.lighting_sd, 3), 0.6, 1.4))
        lighting_post = tuple(np.clip(rng.normal(1.0, spec.lighting_sd, 3), 0.6, 1.4))
        rec.sessions.append(dict(day=day, session="pre", weight=pre_w, fluid=pre_w - dry, lighting=lighting_pre))
        if has_post:
            rec.sessions.append(dict(day=day, session="post", weight=post_w, fluid=post_w - dry, lighting=lighting_post))
    return rec


def render_patient(spec: CohortSpec, rec: PatientRecord, out_dir: Path):
    """Render every frame of one patient; returns samples and landmarks keyed by image path."""
    samples: list[Sample] = []
    landmarks: dict[str, LandmarkSet] = {}
    pdir = out_dir / "images" / rec.patient_id
    pdir.mkdir(parents=True, exist_ok=True)
    for sess in rec.sessions:
        puff = puffiness(max(0.0, sess["fluid"]), spec.puffiness_cap, spec.puffiness_scale_kg)
        srng = np.random.default_rng(
            np.random.SeedSequence([spec.seed, stable_hash("frames", rec.patient_id, sess["day"], sess["session"])])
        )
        for frame in range(spec.frames_per_session):
            roll = math.radians(srng.uniform(-spec.roll_deg_max, spec.roll_deg_max))
            shift = tuple(srng.uniform(-0.03, 0.03, 2))
            turn = float(srng.choice([-1, 1]) * srng.uniform(0.1, 0.16)) if srng.random() < spec.p_turned else 0.0
            mouth_open = bool(srng.random() < spec.p_mouth_open)
            noise = srng.normal(0.0, spec.appearance_noise, (spec.image_size, spec.image_size, 3)).astype(np.float32)
            img, lm = render_face(
                rec.look, puff, spec.image_size, roll=roll, shift=shift, turn=turn,
                mouth_open=mouth_open, lighting=sess["lighting"], noise=noise,
                marks=_draw_marks(srng, spec.frame_marks, rec.look),
                expression=tuple(np.clip(1.0 + srng.normal(0.0, spec.expression_sd, 4), 0.5, 1.5)),
            )
            rel = f"images/{rec.patient_id}/d{sess['day']:02d}_{sess['session']}_{frame:03d}.png"
            Image.fromarray(img, mode="RGB").save(out_dir / rel, optimize=False)
            landmarks[rel] = lm
            samples.append(Sample(rec.patient_id, sess["day"], Session(sess["session"]), sess["weight"], rel, frame))
    return samples, landmarks


def generate_cohort(spec: CohortSpec, out_dir: str | Path) -> Manifest:
    """Write images, ``landmarks.json``, ``cohort.json`` and ``manifest.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples: list[Sample] = []
    landmarks: dict[str, LandmarkSet] = {}
    meta = []
    for i in range(spec.n_patients):
        rec = simulate_patient(spec, i)
        s, lm = render_patient(spec, rec, out_dir)
        samples.extend(s)
        landmarks.update(lm)
        meta.append(
            dict(
                patient_id=rec.patient_id,
                walk_sd_kg=rec.walk_sd_kg,
                dry_weight_kg=rec.dry_weight_kg,
                look=asdict(rec.look),
                sessions=[{k: v for k, v in s.items() if k != "lighting"} for s in rec.sessions],
            )
        )
    manifest = Manifest(tuple(samples), provenance=f"synthetic cohort seed={spec.seed}", root=out_dir)
    save_manifest(manifest, out_dir / "manifest.csv")
    save_landmarks(landmarks, out_dir / "landmarks.json")
    (out_dir / "cohort.json").write_text(
        json.dumps({"spec": asdict(spec), "patients": meta}, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest
