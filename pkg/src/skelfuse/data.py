"""Dataset files, the synthetic multimodal generator, checkpoints and
image export.

The synthetic generator is the desk-scale stand-in for the real capture
datasets: class identity is carried jointly by motion (which body part
oscillates) and appearance (a class-colored marker rendered at the
active part), with distractor squares in other class colors at inactive
parts so that attenuating unimportant parts has a measurable effect.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    CorruptFileError,
    DataError,
    FileError,
    ParseError,
    UsageError,
    VersionError,
)
from .graph import SkeletonSequence, SkeletonTemplate, default_template
from .rng import Rng
from .stroi import JointTrack, StRoiGrid

Float = np.float32

CHECKPOINT_MAGIC = b"SKFZ"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# skeleton text files


def write_skeleton_file(path, seqs) -> None:
    """Header "T M C label subject_count", then per subject T*M coordinate
    lines of C floats."""
    if isinstance(seqs, SkeletonSequence):
        seqs = [seqs]
    t, m, c = seqs[0].coords.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{t} {m} {c} {seqs[0].label} {len(seqs)}\n")
        for seq in seqs:
            for ti in range(t):
                for mi in range(m):
                    fh.write(" ".join(repr(float(v)) for v in seq.coords[ti, mi]))
                    fh.write("\n")


def parse_skeleton_file(path) -> list[SkeletonSequence]:
    path = Path(path)
    if not path.is_file():
        raise FileError(f"skeleton file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(path, 1, "empty file")
    head = lines[0].split()
    if len(head) != 5:
        raise ParseError(path, 1, "header must be 'T M C label subject_count'")
    try:
        t, m, c, label, subjects = (int(v) for v in head)
    except ValueError:
        raise ParseError(path, 1, "non-integer header field") from None
    if t < 1 or m < 1 or c < 1 or subjects < 1:
        raise ParseError(path, 1, "header counts must be positive")
    seqs = []
    lineno = 1
    for _ in range(subjects):
        coords = np.zeros((t, m, c), dtype=Float)
        for ti in range(t):
            for mi in range(m):
                lineno += 1
                if lineno > len(lines):
                    raise ParseError(path, lineno, "unexpected end of file")
                fields = lines[lineno - 1].split()
                if len(fields) != c:
                    raise ParseError(path, lineno, f"expected {c} floats")
                try:
                    coords[ti, mi] = [float(v) for v in fields]
                except ValueError:
                    raise ParseError(path, lineno, "bad float literal") from None
        seqs.append(SkeletonSequence(coords=coords, label=label))
    if lineno != len(lines):
        raise ParseError(path, lineno + 1, "trailing content after declared lines")
    return seqs


# ---------------------------------------------------------------------------
# checkpoint files


def _checksum(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()[:8]


def save_checkpoint(tensors: dict[str, np.ndarray], path) -> None:
    """Binary bundle: magic, version, count, then per tensor name + shape +
    little-endian float32 payload, closed by a 64-bit checksum."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise UsageError("checkpoint tensor names must be unique")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(names))]
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    payload = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(_checksum(payload))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def pull(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptFileError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < len(CHECKPOINT_MAGIC) + 16:
        raise CorruptFileError(f"{path}: file too short")
    payload, tail = blob[:-8], blob[-8:]
    if _checksum(payload) != tail:
        raise CorruptFileError(f"{path}: checksum mismatch")
    reader = _Reader(payload, path)
    if reader.pull(4) != CHECKPOINT_MAGIC:
        raise CorruptFileError(f"{path}: bad magic")
    version, count = struct.unpack("<II", reader.pull(8))
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", reader.pull(4))
        name = reader.pull(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", reader.pull(4))
        shape = struct.unpack(f"<{rank}I", reader.pull(4 * rank))
        n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(reader.pull(4 * n_items), dtype="<f4").reshape(shape)
        out[name] = data.astype(Float)
    return out


# ---------------------------------------------------------------------------
# PNG export


def export_stroi_png(grid, path) -> None:
    """8-bit RGB image; byte = round-half-up of clamp(v,0,1)*255."""
    image = grid.image if isinstance(grid, StRoiGrid) else np.asarray(grid)
    arr = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileError(f"image not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


# ---------------------------------------------------------------------------
# synthetic dataset

CLASS_NAMES = ("wave_left_hand", "wave_right_hand", "kick_left", "nod")

# class -> (active part joint, palette color)
_CLASS_JOINT = {0: 7, 1: 10, 2: 12, 3: 0}
_PALETTE = (
    (220, 40, 40),
    (40, 200, 40),
    (60, 60, 230),
    (230, 220, 40),
)

# the active part's parent co-moves at reduced amplitude, and each class
# oscillates in its own frequency band: leaf joints are structurally
# interchangeable to a graph convolution, so class identity needs the
# motion pattern itself to differ, not just its location
_CLASS_MOTION = {
    0: {"movers": ((7, 1.0), (6, 0.45)), "cycles": (1.3, 1.8)},
    1: {"movers": ((10, 1.0), (9, 0.45)), "cycles": (1.3, 1.8)},
    2: {"movers": ((12, 1.0), (11, 0.45)), "cycles": (2.0, 2.6)},
    3: {"movers": ((0, 1.0), (1, 0.35)), "cycles": (2.8, 3.4)},
}

# base pose in a 96-pixel frame; scaled for other frame sizes
_BASE_POSE_96 = np.array([
    (48, 14), (48, 24), (48, 32), (48, 42), (48, 52),
    (40, 30), (33, 40), (27, 50),
    (56, 30), (63, 40), (69, 50),
    (41, 66), (36, 82),
    (55, 66), (60, 82),
], dtype=np.float64)

_MARKER_HALF = 4  # marker squares are 9x9 at the 96px scale


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    samples_per_class: int = 100
    seq_len: int = 24
    frame_size: int = 96
    noise: float = 1.0       # distractor intensity in [0,1]: 1 -> 2 decoys/sample
    seed: int = 42
    two_subject: bool = False

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(CLASS_NAMES):
            raise UsageError(f"num_classes must be in [2, {len(CLASS_NAMES)}]")
        if self.samples_per_class < 1 or self.seq_len < 1 or self.frame_size < 32:
            raise UsageError("bad synthetic spec sizes")


@dataclass
class Sample:
    sequences: list            # one or two SkeletonSequence
    frames: np.ndarray         # [T,H,W,3] uint8
    tracks: list               # JointTrack per subject
    label: int
    split: str                 # "train" | "test"


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    template: SkeletonTemplate
    samples: list = field(default_factory=list)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.samples) if s.split == split]

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


def _draw_square(canvas: np.ndarray, x: float, y: float, half: int, color) -> None:
    h, w = canvas.shape[:2]
    cx, cy = int(round(x)), int(round(y))
    y0, y1 = max(0, cy - half), min(h, cy + half + 1)
    x0, x1 = max(0, cx - half), min(w, cx + half + 1)
    if y0 < y1 and x0 < x1:
        canvas[y0:y1, x0:x1] = color


def _draw_bone(canvas: np.ndarray, p0, p1, color) -> None:
    steps = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]))) * 2 + 3
    ts = np.linspace(0.0, 1.0, steps)
    xs = np.clip(np.round(p0[0] + (p1[0] - p0[0]) * ts).astype(int), 0, canvas.shape[1] - 1)
    ys = np.clip(np.round(p0[1] + (p1[1] - p0[1]) * ts).astype(int), 0, canvas.shape[0] - 1)
    canvas[ys, xs] = color
    canvas[np.clip(ys + 1, 0, canvas.shape[0] - 1), xs] = color


def _render_frame(size: int, joints_xy: np.ndarray, template: SkeletonTemplate,
                  bg_level: int, squares) -> np.ndarray:
    """squares: list of ((x, y), color) drawn over the stick figure."""
    canvas = np.full((size, size, 3), bg_level, dtype=np.uint8)
    bone_color = (110, 110, 110)
    for i, j in template.edges:
        _draw_bone(canvas, joints_xy[i], joints_xy[j], bone_color)
    half = max(2, round(_MARKER_HALF * size / 96))
    for (x, y), color in squares:
        _draw_square(canvas, x, y, half, color)
    return canvas


def _motion_direction(label: int) -> np.ndarray:
    return {
        0: np.array([1.0, 0.35]),   # left hand sweeps sideways
        1: np.array([1.0, 0.35]),
        2: np.array([0.8, -0.7]),   # foot kicks forward and up
        3: np.array([0.15, 1.0]),   # head nods vertically
    }[label]


def _subject_track(rng: Rng, spec: SyntheticSpec, template: SkeletonTemplate,
                   label: int):
    """Joint pixel positions [T,M,2] for one subject plus its 3-D coords."""
    size = spec.frame_size
    t_len = spec.seq_len
    m = template.joint_count
    pose = _BASE_POSE_96 * (size / 96.0)
    scale = float(rng.uniform(0.9, 1.1))
    offset = rng.uniform(-0.06 * size, 0.06 * size, (2,)).astype(np.float64)
    center = pose.mean(axis=0)
    pose = (pose - center) * scale + center + offset

    motion = _CLASS_MOTION[label]
    amp = float(rng.uniform(0.11 * size, 0.17 * size))
    if label == 3:
        amp *= 0.6  # nodding heads travel less than waving hands
    cycles = float(rng.uniform(*motion["cycles"]))
    phase = float(rng.uniform(0.0, 2.0 * np.pi))
    direction = _motion_direction(label)
    direction = direction / np.linalg.norm(direction)

    jitter = 0.35 * size / 96.0
    noise = rng.uniform(-jitter, jitter, (t_len, m, 2)).astype(np.float64)
    depth = rng.uniform(-0.5, 0.5, (m,)).astype(np.float64)

    pix = np.zeros((t_len, m, 2), dtype=np.float64)
    for ti in range(t_len):
        frame_pose = pose + noise[ti]
        swing = amp * np.sin(2.0 * np.pi * cycles * ti / t_len + phase)
        for joint, share in motion["movers"]:
            frame_pose[joint] = frame_pose[joint] + direction * (swing * share)
        pix[ti] = frame_pose
    coords = np.concatenate(
        [pix, np.broadcast_to(depth[None, :, None], (t_len, m, 1))], axis=2)
    return pix.astype(Float), coords.astype(Float)


def _other_colors(label: int, num_classes: int) -> list:
    return [_PALETTE[c] for c in range(num_classes) if c != label]


def generate_synthetic_dataset(spec: SyntheticSpec,
                               template: SkeletonTemplate | None = None) -> SyntheticDataset:
    template = template or default_template()
    builtin = default_template()
    if template.joint_count != builtin.joint_count or template.parts != builtin.parts:
        raise DataError("the synthetic generator is defined for the built-in "
                        "15-joint template")
    rng = Rng(spec.seed)
    dataset = SyntheticDataset(spec=spec, template=template)

    n_per = spec.samples_per_class
    n_train = max(1, int(round(n_per * 0.8))) if n_per > 1 else 1
    for label in range(spec.num_classes):
        split_perm = rng.permutation(n_per)
        splits = ["train" if int(p) < n_train else "test" for p in split_perm]
        for k in range(n_per):
            dataset.samples.append(
                _generate_sample(rng, spec, template, label, splits[k]))
    return dataset


def _generate_sample(rng: Rng, spec: SyntheticSpec, template: SkeletonTemplate,
                     label: int, split: str) -> Sample:
    size = spec.frame_size
    active = _CLASS_JOINT[label]
    marker_color = _PALETTE[label]
    bg = int(rng.integers(36, 60))

    pix, coords = _subject_track(rng, spec, template, label)
    subjects = [(pix, coords)]
    if spec.two_subject:
        other_label = int(rng.integers(0, spec.num_classes))
        pix2, coords2 = _subject_track(rng, spec, template, other_label)
        # push the second figure to the right half so the crops differ
        pix2[:, :, 0] = np.clip(pix2[:, :, 0] + 0.22 * size, 0, size - 1)
        coords2[:, :, 0] = pix2[:, :, 0]
        subjects.append((pix2, coords2))

    # distractors: other class colors at inactive ROI parts, oscillating around
    # their joint so visual motion alone cannot single out the true marker
    t_len = spec.seq_len
    part_joints = [j for _, j in template.parts if j != active]
    rng.shuffle(part_joints)
    decoy_count = int(round(2 * min(max(spec.noise, 0.0), 1.0)))
    palette = _other_colors(label, spec.num_classes)
    px_scale = size / 96.0
    decoys = []
    for i in range(min(decoy_count, len(part_joints))):
        color = palette[int(rng.integers(0, len(palette)))]
        amp = float(rng.uniform(2.0, 4.0)) * px_scale
        cyc = float(rng.uniform(1.0, 3.0))
        ph = float(rng.uniform(0.0, 2.0 * np.pi))
        ang = float(rng.uniform(0.0, 2.0 * np.pi))
        offsets = amp * np.sin(2.0 * np.pi * cyc * np.arange(t_len) / t_len + ph)
        path = np.stack([offsets * np.cos(ang), offsets * np.sin(ang)], axis=1)
        decoys.append((part_joints[i], color, path))
    # the true marker also wanders near its joint: a dead-centered square in
    # the ROI crop would betray the active row without any skeleton guidance
    marker_jitter = rng.uniform(-3.0 * px_scale, 3.0 * px_scale, (t_len, 2))

    frames = np.zeros((t_len, size, size, 3), dtype=np.uint8)
    for ti in range(t_len):
        joints = subjects[0][0][ti]
        squares = [((joints[j, 0] + path[ti, 0], joints[j, 1] + path[ti, 1]), color)
                   for j, color, path in decoys]
        squares.append(((joints[active, 0] + marker_jitter[ti, 0],
                         joints[active, 1] + marker_jitter[ti, 1]), marker_color))
        canvas = _render_frame(size, joints, template, bg, squares)
        if spec.two_subject:
            overlay = _render_frame(size, subjects[1][0][ti], template, bg, [])
            mask = np.any(overlay != bg, axis=2)
            canvas[mask] = overlay[mask]
        frames[ti] = canvas

    sequences = [SkeletonSequence(coords=c, label=label) for _, c in subjects]
    tracks = [JointTrack(pixels=p, confidence=np.ones(p.shape[:2], dtype=Float))
              for p, _ in subjects]
    return Sample(sequences=sequences, frames=frames, tracks=tracks,
                  label=label, split=split)


# ---------------------------------------------------------------------------
# dataset persistence


def save_dataset(dataset: SyntheticDataset, root) -> None:
    root = Path(root)
    (root / "skel").mkdir(parents=True, exist_ok=True)
    (root / "track").mkdir(exist_ok=True)
    (root / "frames").mkdir(exist_ok=True)
    dataset.template.save(root / "template.txt")
    with open(root / "index.txt", "w", encoding="utf-8") as fh:
        fh.write(f"{len(dataset.samples)}\n")
        for i, sample in enumerate(dataset.samples):
            fh.write(f"s{i:04d} {sample.label} {sample.split} "
                     f"{len(sample.sequences)} {sample.frames.shape[0]}\n")
    for i, sample in enumerate(dataset.samples):
        sid = f"s{i:04d}"
        write_skeleton_file(root / "skel" / f"{sid}.txt", sample.sequences)
        bundle = {}
        for s, track in enumerate(sample.tracks):
            bundle[f"pixels{s}"] = track.pixels
            bundle[f"confidence{s}"] = track.confidence
        save_checkpoint(bundle, root / "track" / f"{sid}.bin")
        fdir = root / "frames" / sid
        fdir.mkdir(exist_ok=True)
        for ti in range(sample.frames.shape[0]):
            Image.fromarray(sample.frames[ti], mode="RGB").save(fdir / f"f{ti:03d}.png")


def load_dataset(root, with_frames: bool = True) -> SyntheticDataset:
    """Read a saved dataset back; frames can be skipped for stages that
    only need skeletons and tracks."""
    root = Path(root)
    index = root / "index.txt"
    if not index.is_file():
        raise FileError(f"dataset index not found: {index}")
    template = SkeletonTemplate.load(root / "template.txt")
    lines = index.read_text(encoding="utf-8").splitlines()
    try:
        count = int(lines[0])
    except (IndexError, ValueError):
        raise ParseError(index, 1, "bad sample count") from None
    dataset = SyntheticDataset(spec=SyntheticSpec(), template=template)
    for lineno in range(2, count + 2):
        fields = lines[lineno - 1].split()
        if len(fields) != 5:
            raise ParseError(index, lineno, "expected 'id label split subjects frames'")
        sid, label, split, subjects, t_len = (
            fields[0], int(fields[1]), fields[2], int(fields[3]), int(fields[4]))
        sequences = parse_skeleton_file(root / "skel" / f"{sid}.txt")
        bundle = load_checkpoint(root / "track" / f"{sid}.bin")
        tracks = [JointTrack(pixels=bundle[f"pixels{s}"],
                             confidence=bundle[f"confidence{s}"])
                  for s in range(subjects)]
        if with_frames:
            frames = np.stack([load_png(root / "frames" / sid / f"f{ti:03d}.png")
                               for ti in range(t_len)])
        else:
            frames = np.zeros((t_len, 0, 0, 3), dtype=np.uint8)
        dataset.samples.append(Sample(sequences=sequences, frames=frames,
                                      tracks=tracks, label=label, split=split))
    return dataset
