"""Synthetic parametric-face video generation with ground-truth affect.

Subjects differ in fixed appearance (head size, eye spacing, mouth width);
expression is driven entirely by the affect label: eye openness tracks
arousal, mouth curvature tracks valence.  Labels follow a mean-reverting
smoothed random walk whose characteristic change timescale is a handful
of frames, so medium-length temporal windows carry real signal.

At dataset-generation time the rendered expression parameters are
perturbed by a small jitter keyed deterministically on (subject seed,
label bits).  Each stored image therefore remains a pure function of
(subject, label) while carrying per-frame observation noise that no
single frame can remove, which is what makes temporal pooling genuinely
pay off.  ``render_face`` itself is exact and jitter-free.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import DataError, ShapeError
from .metrics import AffectLabel

GENERATOR_VERSION = 1
IMAGE_SIZE = 16
FRAME_PIXELS = IMAGE_SIZE * IMAGE_SIZE
FPS = 50.0
DISTORT_KINDS = ("gaussian_noise", "occlusion_block", "blur")

_HEADER = struct.Struct("<IIHH")  # subject_id, frame_count, width, height


@dataclass(frozen=True)
class SubjectSpec:
    """Per-subject appearance; independent of the affect state."""

    subject_id: int
    face_scale: float
    eye_spacing: float
    mouth_width: float
    rng_seed: int


@dataclass
class AffectTrajectory:
    frames: np.ndarray  # [T, 2] valence/arousal at FPS nominal rate
    fps: float = FPS

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class FrameRecord:
    subject_id: int
    frame_index: int
    image: np.ndarray  # [16, 16] in [0, 1]
    label: AffectLabel
    quadrant: int


def make_subject(subject_id: int, rng: np.random.Generator) -> SubjectSpec:
    return SubjectSpec(
        subject_id=subject_id,
        face_scale=float(rng.uniform(0.85, 1.0)),
        eye_spacing=float(rng.uniform(0.30, 0.42)),
        mouth_width=float(rng.uniform(0.30, 0.44)),
        rng_seed=int(rng.integers(0, 2**31 - 1)),
    )


def gen_trajectory(seed: int, length: int, smoothness: float = 1.0) -> AffectTrajectory:
    """Mean-reverting smoothed random walk per dimension, clamped to [-1, 1].

    x_{t+1} = clamp(x_t + smoothness * (eta_t - 0.1 * x_t)) with
    eta_t ~ uniform(-0.25, 0.25); the per-frame change is bounded by
    0.35 * smoothness and values decorrelate over roughly 5-10 frames.
    """
    if length < 1:
        raise DataError(f"trajectory length must be >= 1, got {length}")
    if not (0.0 < smoothness <= 1.0):
        raise DataError(f"smoothness must be in (0, 1], got {smoothness}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFF, 0xA11EC7])
    out = np.empty((length, 2))
    for d in range(2):
        x = float(rng.uniform(-0.7, 0.7))
        for t in range(length):
            out[t, d] = x
            eta = float(rng.uniform(-0.25, 0.25))
            x = float(np.clip(x + smoothness * (eta - 0.1 * x), -1.0, 1.0))
    return AffectTrajectory(frames=out)


# -- rendering -------------------------------------------------------------------

_BG = 0.06
_FACE = 0.45
_EYE_Y = 0.38
_MOUTH_Y = 0.72
_MOUTH_AMP = 0.11

_cols = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE
_XX, _YY = np.meshgrid(_cols, _cols)  # _XX varies along columns, _YY along rows


def _soft_ellipse(cx, cy, rx, ry, edge):
    d = ((_XX - cx) / rx) ** 2 + ((_YY - cy) / ry) ** 2
    return np.clip((1.0 - d) / edge, 0.0, 1.0)


def render_face(spec: SubjectSpec, label: AffectLabel) -> np.ndarray:
    """Anti-aliased 16x16 grayscale face for the exact label parameters.

    Eye vertical openness is 0.5 * (1 + arousal); mouth curvature equals
    valence (corners up for a smile).  Features compose additively (peaks
    stay below 1.0) so partially covered pixels remain distinguishable.
    """
    img = np.full((IMAGE_SIZE, IMAGE_SIZE), _BG)
    head = _soft_ellipse(0.5, 0.52, 0.40 * spec.face_scale, 0.46 * spec.face_scale, 0.15)
    img += head * (_FACE - _BG)

    openness = 0.5 * (1.0 + label.arousal)
    ry_eye = 0.030 + 0.055 * openness
    for sx in (-1.0, 1.0):
        eye = _soft_ellipse(0.5 + sx * spec.eye_spacing / 2.0, _EYE_Y, 0.058, ry_eye, 0.5)
        img += eye * 0.52

    half_w = spec.mouth_width / 2.0
    u = (_XX - 0.5) / half_w
    curve_y = _MOUTH_Y + _MOUTH_AMP * label.valence * (0.5 - u**2)
    dist = np.abs(_YY - curve_y)
    stroke = np.clip((0.035 - dist) / 0.030 + 1.0, 0.0, 1.0)
    stroke *= np.clip((1.0 - np.abs(u)) / 0.10 + 1.0, 0.0, 1.0)
    img += stroke * 0.50

    return np.clip(img, 0.0, 1.0)


def distort(image: np.ndarray, rng: np.random.Generator,
            kinds: Sequence[str] = DISTORT_KINDS) -> np.ndarray:
    """One uniformly chosen corruption; output stays in [0, 1]."""
    kinds = tuple(kinds)
    if not kinds:
        raise DataError("distort requires at least one kind")
    for k in kinds:
        if k not in DISTORT_KINDS:
            raise DataError(f"unknown distortion kind '{k}'")
    kind = kinds[int(rng.integers(len(kinds)))]
    img = image.reshape(IMAGE_SIZE, IMAGE_SIZE)
    if kind == "gaussian_noise":
        return np.clip(img + rng.normal(0.0, 0.1, size=img.shape), 0.0, 1.0)
    if kind == "occlusion_block":
        r0 = int(rng.integers(0, IMAGE_SIZE - 4 + 1))
        c0 = int(rng.integers(0, IMAGE_SIZE - 4 + 1))
        out = img.copy()
        out[r0:r0 + 4, c0:c0 + 4] = 0.0
        return out
    # 3x3 box blur with edge replication: a constant image is a fixed point
    padded = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            out += padded[1 + dr:1 + dr + IMAGE_SIZE, 1 + dc:1 + dc + IMAGE_SIZE]
    return np.clip(out / 9.0, 0.0, 1.0)


def _label_jitter(subject_seed: int, valence: float, arousal: float,
                  scale: float) -> Tuple[float, float]:
    """Deterministic pseudo-noise keyed on the exact label bits."""
    vb = int(np.float64(valence).view(np.uint64))
    ab = int(np.float64(arousal).view(np.uint64))
    rng = np.random.default_rng([subject_seed, vb, ab])
    bound = scale * np.sqrt(3.0)  # uniform with std == scale
    j = rng.uniform(-bound, bound, size=2)
    return float(j[0]), float(j[1])


def quadrant_of_pair(valence: float, arousal: float) -> int:
    # boundaries fall on the nonnegative side
    if valence >= 0.0 and arousal >= 0.0:
        return 0
    if valence < 0.0 and arousal >= 0.0:
        return 1
    if valence < 0.0 and arousal < 0.0:
        return 2
    return 3


def gen_dataset(n_subjects: int, frames_per_subject: int, seed: int,
                smoothness: float = 1.0, obs_noise: float = 0.25
                ) -> Tuple[List[FrameRecord], dict]:
    """Render the full corpus; images are quantized to 8-bit levels so the
    in-memory records equal the on-disk round trip exactly."""
    if n_subjects < 5:
        raise DataError(f"need at least 5 subjects for fold splitting, got {n_subjects}")
    if frames_per_subject < 1:
        raise DataError("frames_per_subject must be positive")
    records: List[FrameRecord] = []
    subjects_meta = []
    for sid in range(n_subjects):
        spec = make_subject(sid, np.random.default_rng([int(seed), 0x5B, sid]))
        traj = gen_trajectory(int(seed) * 1_000_003 + sid, frames_per_subject, smoothness)
        for t in range(frames_per_subject):
            v, a = float(traj.frames[t, 0]), float(traj.frames[t, 1])
            jv, ja = _label_jitter(spec.rng_seed, v, a, obs_noise)
            shown = AffectLabel(float(np.clip(v + jv, -1, 1)),
                                float(np.clip(a + ja, -1, 1)))
            img = np.round(render_face(spec, shown) * 255.0) / 255.0
            records.append(FrameRecord(
                subject_id=sid, frame_index=t, image=img,
                label=AffectLabel(v, a), quadrant=quadrant_of_pair(v, a)))
        subjects_meta.append({"id": sid, "frames": frames_per_subject,
                              "file": f"subject_{sid:03d}.bin"})
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "seed": int(seed),
        "n_subjects": int(n_subjects),
        "frames_per_subject": int(frames_per_subject),
        "smoothness": float(smoothness),
        "obs_noise": float(obs_noise),
        "fps": FPS,
        "image_size": IMAGE_SIZE,
        "subjects": subjects_meta,
    }
    return records, manifest


# -- persistence -----------------------------------------------------------------


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def save_dataset(records: List[FrameRecord], manifest: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    by_subject: Dict[int, List[FrameRecord]] = {}
    for r in records:
        by_subject.setdefault(r.subject_id, []).append(r)
    for meta in manifest["subjects"]:
        sid = meta["id"]
        frames = sorted(by_subject.get(sid, []), key=lambda r: r.frame_index)
        if len(frames) != meta["frames"]:
            raise DataError(f"subject {sid}: expected {meta['frames']} frames, "
                            f"got {len(frames)}")
        chunks = [_HEADER.pack(sid, len(frames), IMAGE_SIZE, IMAGE_SIZE)]
        for r in frames:
            pixels = np.round(r.image * 255.0).astype(np.uint8)
            chunks.append(pixels.tobytes())
            chunks.append(struct.pack("<dd", r.label.valence, r.label.arousal))
        _atomic_write(os.path.join(out_dir, meta["file"]), b"".join(chunks))
    payload = json.dumps(manifest, indent=2, sort_keys=True).encode()
    _atomic_write(os.path.join(out_dir, "manifest.json"), payload)


@dataclass
class SubjectFrames:
    subject_id: int
    images: np.ndarray  # [T, 256] float64 in [0, 1]
    labels: np.ndarray  # [T, 2]


@dataclass
class Dataset:
    manifest: dict
    subjects: Dict[int, SubjectFrames]

    @property
    def subject_ids(self) -> List[int]:
        return sorted(self.subjects)

    @property
    def frame_count(self) -> int:
        return sum(s.images.shape[0] for s in self.subjects.values())

    def all_labels(self, ids=None) -> np.ndarray:
        ids = self.subject_ids if ids is None else ids
        return np.concatenate([self.subjects[i].labels for i in ids], axis=0)


def load_dataset(data_dir: str) -> Dataset:
    manifest_path = os.path.join(data_dir, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise DataError(f"no manifest.json under {data_dir}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    subjects: Dict[int, SubjectFrames] = {}
    for meta in manifest["subjects"]:
        path = os.path.join(data_dir, meta["file"])
        with open(path, "rb") as f:
            raw = f.read()
        sid, count, w, h = _HEADER.unpack_from(raw, 0)
        if (w, h) != (IMAGE_SIZE, IMAGE_SIZE) or sid != meta["id"]:
            raise DataError(f"corrupt subject file {path}")
        frame_bytes = FRAME_PIXELS + 16
        expected = _HEADER.size + count * frame_bytes
        if len(raw) != expected:
            raise DataError(f"truncated subject file {path}: "
                            f"{len(raw)} bytes, expected {expected}")
        images = np.empty((count, FRAME_PIXELS))
        labels = np.empty((count, 2))
        off = _HEADER.size
        for t in range(count):
            pix = np.frombuffer(raw, dtype=np.uint8, count=FRAME_PIXELS, offset=off)
            images[t] = pix / 255.0
            labels[t] = struct.unpack_from("<dd", raw, off + FRAME_PIXELS)
            off += frame_bytes
        subjects[sid] = SubjectFrames(sid, images, labels)
    return Dataset(manifest=manifest, subjects=subjects)


def split_folds(subject_ids: Sequence[int], k: int = 5) -> List[List[int]]:
    """Round-robin partition of sorted subject ids; balanced within one."""
    ids = sorted(subject_ids)
    if len(ids) < k:
        raise DataError(f"need at least {k} subjects, got {len(ids)}")
    return [ids[i::k] for i in range(k)]
