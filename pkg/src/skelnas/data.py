"""Skeleton clips: ingestion, resampling, tensor encoding, synthetic data.

A clip is an ordered list of frames; each frame holds up to two persons,
each person a (joints, channels) coordinate array.  Encoding lays the two
persons side by side on the joint axis, zero-padding absent ones, so one
action becomes a (3, frames, joints) tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ParseError

CLIP_MAGIC = "SKL1"
MANIFEST_NAME = "manifest.tsv"


@dataclass(frozen=True)
class Layout:
    name: str
    joints_per_person: int
    persons_max: int = 2
    channels: int = 3
    has_confidence: bool = False

    @property
    def joint_columns(self):
        return self.persons_max * self.joints_per_person


NTU_LAYOUT = Layout("ntu", 25)
KINETICS_LAYOUT = Layout("kinetics", 18, has_confidence=True)


def make_layout(name, joints_per_person=None):
    if name == "ntu":
        return NTU_LAYOUT
    if name == "kinetics":
        return KINETICS_LAYOUT
    if name == "custom":
        if joints_per_person is None or joints_per_person < 1:
            raise InputError("custom layout needs joints_per_person >= 1")
        return Layout("custom", joints_per_person)
    raise InputError(f"unknown layout {name!r}")


@dataclass
class SkeletonClip:
    """Frames of per-person joint coordinate arrays, plus an optional label."""

    frames: list
    joints_per_person: int
    channels: int = 3
    label: int | None = None

    def __post_init__(self):
        if not self.frames:
            raise InputError("a clip needs at least one frame")
        for t, frame in enumerate(self.frames):
            for person in frame:
                if person.shape != (self.joints_per_person, self.channels):
                    raise InputError(
                        f"frame {t}: person array must be "
                        f"({self.joints_per_person}, {self.channels}), got {person.shape}"
                    )

    @property
    def num_frames(self):
        return len(self.frames)

    def max_persons(self):
        return max(len(frame) for frame in self.frames)


@dataclass(frozen=True)
class ActionTensor:
    """(3, frames, joint-columns) encoding of one action instance."""

    data: np.ndarray
    layout: Layout


def uniform_sample(clip, num_frames):
    """Resample to exactly ``num_frames`` via indices floor(i*F/T).

    Shorter clips repeat frames under the same rule; equal lengths are the
    identity.
    """
    if num_frames < 1:
        raise InputError(f"target frame count must be >= 1, got {num_frames}")
    F = clip.num_frames
    indices = (np.arange(num_frames) * F) // num_frames
    return SkeletonClip(
        frames=[clip.frames[i] for i in indices],
        joints_per_person=clip.joints_per_person,
        channels=clip.channels,
        label=clip.label,
    )


def encode(clip, layout, dtype=np.float32):
    """Pack a clip into an action tensor; absent persons stay all-zero."""
    if clip.joints_per_person != layout.joints_per_person:
        raise InputError(
            f"clip has {clip.joints_per_person} joints per person, "
            f"layout {layout.name} expects {layout.joints_per_person}"
        )
    T = clip.num_frames
    J = layout.joints_per_person
    out = np.zeros((layout.channels, T, layout.joint_columns), dtype=dtype)
    for t, frame in enumerate(clip.frames):
        if len(frame) > layout.persons_max:
            raise InputError(
                f"frame {t} has {len(frame)} persons, layout allows "
                f"{layout.persons_max}; select persons first"
            )
        for p, person in enumerate(frame):
            out[:, t, p * J : (p + 1) * J] = person.T
    return ActionTensor(out, layout)


def select_persons(clip, persons_max=2):
    """Keep the two persons with the highest mean joint confidence.

    Confidence is the last channel.  Ranking is per clip over every frame
    the person appears in; ties keep the lower original index.  The kept
    persons stay in original index order.
    """
    candidates = clip.max_persons()
    if candidates <= persons_max:
        return clip
    totals = np.zeros(candidates)
    counts = np.zeros(candidates)
    for frame in clip.frames:
        for p, person in enumerate(frame):
            totals[p] += person[:, -1].sum()
            counts[p] += person.shape[0]
    scores = np.where(counts > 0, totals / np.maximum(counts, 1), 0.0)
    ranked = sorted(range(candidates), key=lambda p: (-scores[p], p))
    keep = sorted(ranked[:persons_max])
    frames = [[frame[p] for p in keep if p < len(frame)] for frame in clip.frames]
    return SkeletonClip(frames, clip.joints_per_person, clip.channels, clip.label)


# ---------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------


def class_pattern(seed, class_index, layout):
    """Per-joint sinusoid frequencies and phases defining one class."""
    rng = np.random.default_rng([seed, 17, class_index])
    shape = (layout.persons_max, layout.joints_per_person, layout.channels)
    freq = rng.uniform(0.5, 3.0, size=shape)
    phase = rng.uniform(0.0, 2.0 * math.pi, size=shape)
    return freq, phase


def instance_clip(freq, phase, num_frames, phase_offset, noise, label):
    """Evaluate one class pattern at a given instance phase plus noise."""
    P, J, C = freq.shape
    t = np.arange(num_frames)[:, None, None, None]
    signal = np.sin(2.0 * math.pi * freq * t / num_frames + phase + phase_offset)
    values = signal + noise
    frames = [
        [np.array(values[ti, p], dtype=np.float64) for p in range(P)]
        for ti in range(num_frames)
    ]
    return SkeletonClip(frames, J, C, label=label)


def synth_generate(num_classes, per_class, num_frames, layout, seed, noise_amp=0.05):
    """Deterministic labeled dataset of sinusoid-trajectory clips.

    Class identity lives in the per-joint frequency/phase pattern; each
    instance shifts the whole pattern by an index-derived phase and adds
    seeded noise, so frames overlap across classes but temporal structure
    separates them.
    """
    if num_classes < 2:
        raise InputError(f"need at least 2 classes, got {num_classes}")
    if per_class < 1:
        raise InputError(f"need at least 1 clip per class, got {per_class}")
    clips = []
    shape = (
        num_frames,
        layout.persons_max,
        layout.joints_per_person,
        layout.channels,
    )
    for k in range(num_classes):
        freq, phase = class_pattern(seed, k, layout)
        for m in range(per_class):
            offset = 2.0 * math.pi * m / per_class
            noise_rng = np.random.default_rng([seed, 23, k, m])
            noise = noise_amp * noise_rng.standard_normal(shape)
            clips.append(instance_clip(freq, phase, num_frames, offset, noise, k))
    return clips


# ---------------------------------------------------------------------
# clip files and manifests
# ---------------------------------------------------------------------


def save_clip(clip, path):
    """Text format: header line, then one line per (frame, person)."""
    persons = clip.max_persons()
    J, C = clip.joints_per_person, clip.channels
    zero_person = np.zeros((J, C))
    lines = [f"{CLIP_MAGIC} {clip.num_frames} {J} {C} {persons}"]
    for frame in clip.frames:
        for p in range(persons):
            person = frame[p] if p < len(frame) else zero_person
            lines.append(" ".join(repr(float(v)) for v in person.reshape(-1)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_clip(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    text = raw.decode("ascii", errors="replace")
    newline = text.find("\n")
    if newline < 0:
        raise ParseError("missing header line", offset=0)
    header = text[:newline].split()
    if len(header) != 5 or header[0] != CLIP_MAGIC:
        raise ParseError(
            f"bad header {text[:newline]!r}; expected "
            f"'{CLIP_MAGIC} <frames> <joints> <channels> <persons>'",
            offset=0,
        )
    try:
        frames, J, C, persons = (int(v) for v in header[1:])
    except ValueError:
        raise ParseError(f"non-integer header field in {header[1:]}", offset=0) from None
    if min(frames, J, C, persons) < 1:
        raise ParseError("header counts must all be >= 1", offset=0)

    expected = frames * persons * J * C
    values = np.empty(expected, dtype=np.float64)
    count = 0
    pos = newline + 1
    n = len(text)
    while pos < n:
        while pos < n and text[pos] in " \t\r\n":
            pos += 1
        if pos >= n:
            break
        end = pos
        while end < n and text[end] not in " \t\r\n":
            end += 1
        token = text[pos:end]
        if count >= expected:
            raise ParseError(
                f"expected {expected} values, found more", offset=pos
            )
        try:
            values[count] = float(token)
        except ValueError:
            raise ParseError(f"non-numeric token {token!r}", offset=pos) from None
        count += 1
        pos = end
    if count != expected:
        raise ParseError(f"expected {expected} values, found {count}")

    grid = values.reshape(frames, persons, J, C)
    clip_frames = [
        [np.array(grid[t, p]) for p in range(persons)] for t in range(frames)
    ]
    return SkeletonClip(clip_frames, J, C)


def write_manifest(directory, entries):
    """entries: list of (relative path, label)."""
    lines = ["path\tlabel"]
    for path, label in entries:
        lines.append(f"{path}\t{label}")
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def read_manifest(directory):
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise InputError(f"no {MANIFEST_NAME} in {directory}")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0] != "path\tlabel":
        raise ParseError("manifest must start with 'path\\tlabel'", line=1)
    entries = []
    for lineno, ln in enumerate(lines[1:], start=2):
        if not ln.strip():
            continue
        parts = ln.split("\t")
        if len(parts) != 2:
            raise ParseError(f"manifest row needs 2 columns, got {len(parts)}", line=lineno)
        try:
            label = int(parts[1])
        except ValueError:
            raise ParseError(f"non-integer label {parts[1]!r}", line=lineno) from None
        entries.append((parts[0], label))
    return entries


def load_dataset(directory):
    """Load every manifest entry; labels attach to the returned clips."""
    clips = []
    for rel_path, label in read_manifest(directory):
        clip = load_clip(directory / rel_path)
        clip.label = label
        clips.append(clip)
    return clips


def encode_dataset(clips, layout, num_frames, center=False, dtype=np.float32):
    """Resample, encode and stack a clip list into (X, y) arrays."""
    tensors = []
    labels = []
    for clip in clips:
        if clip.label is None:
            raise InputError("dataset clip has no label")
        sampled = uniform_sample(clip, num_frames)
        if sampled.max_persons() > layout.persons_max:
            sampled = select_persons(sampled, layout.persons_max)
        at = encode(sampled, layout, dtype=dtype)
        data = at.data
        if center:
            data = data - data.mean(axis=(1, 2), keepdims=True)
        tensors.append(data)
        labels.append(clip.label)
    return np.stack(tensors).astype(dtype), np.array(labels, dtype=np.int64)
