"""Synthetic frame generation, JPEG codec helpers and annotation drawing.

Frames are 640x480 RGB24. Scenes are flat-colored rectangles on a gray
background so the downstream color detector has exact ground truth.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import cv2
import numpy as np

FRAME_WIDTH = 640
FRAME_HEIGHT = 480
RAW_FRAME_BYTES = FRAME_WIDTH * FRAME_HEIGHT * 3

# Class colors are mutually > 120 apart (Euclidean RGB) so heavy JPEG
# compression cannot turn one class into another.
PALETTE: dict[str, tuple[int, int, int]] = {
    "cup": (220, 40, 40),
    "bottle": (40, 180, 60),
    "ball": (40, 80, 220),
    "apple": (230, 210, 40),
    "key": (40, 210, 210),
    "card": (210, 40, 210),
    "pen": (240, 140, 30),
    "knife": (140, 40, 200),
}

# Half the minimum pairwise palette distance; a decoded pixel farther than
# this from every palette color is treated as background.
CLASS_DISTANCE_THRESHOLD = 60.0

MIN_OBJECT_SIDE = 32
MAX_OBJECTS = 4

# 5x7 bitmap glyphs, one int per row, bit 4 = leftmost column.
FONT_5X7: dict[str, tuple[int, ...]] = {
    "A": (0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11),
    "B": (0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E),
    "C": (0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E),
    "D": (0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E),
    "E": (0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F),
    "F": (0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10),
    "G": (0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0E),
    "H": (0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11),
    "I": (0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E),
    "J": (0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C),
    "K": (0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11),
    "L": (0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F),
    "M": (0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11),
    "N": (0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11),
    "O": (0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E),
    "P": (0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10),
    "Q": (0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D),
    "R": (0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11),
    "S": (0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E),
    "T": (0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04),
    "U": (0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E),
    "V": (0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04),
    "W": (0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11),
    "X": (0x11, 0x0A, 0x04, 0x04, 0x04, 0x0A, 0x11),
    "Y": (0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04),
    "Z": (0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F),
    " ": (0, 0, 0, 0, 0, 0, 0),
}
GLYPH_W = 5
GLYPH_H = 7


class SceneError(ValueError):
    """Scene violates its invariants (bounds, overlap, object count)."""


class CodecError(RuntimeError):
    """JPEG encode or decode failure."""


@dataclass(frozen=True)
class SceneObject:
    class_name: str
    bbox: tuple[int, int, int, int]  # x, y, w, h


@dataclass(frozen=True)
class SyntheticScene:
    scene_id: int
    objects: tuple[SceneObject, ...] = ()
    background_gray: int = 128

    def validate(self) -> None:
        if not 0 <= self.background_gray <= 255:
            raise SceneError(f"background_gray out of range: {self.background_gray}")
        if len(self.objects) > MAX_OBJECTS:
            raise SceneError(f"too many objects: {len(self.objects)}")
        rects = []
        for obj in self.objects:
            if obj.class_name not in PALETTE:
                raise SceneError(f"unknown class: {obj.class_name}")
            x, y, w, h = obj.bbox
            if w < MIN_OBJECT_SIDE or h < MIN_OBJECT_SIDE:
                raise SceneError(f"object too small: {obj.bbox}")
            if x < 0 or y < 0 or x + w > FRAME_WIDTH or y + h > FRAME_HEIGHT:
                raise SceneError(f"object out of bounds: {obj.bbox}")
            rects.append((x, y, w, h))
        for i in range(len(rects)):
            for j in range(i + 1, len(rects)):
                ax, ay, aw, ah = rects[i]
                bx, by, bw, bh = rects[j]
                if ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah:
                    raise SceneError(f"objects overlap: {rects[i]} vs {rects[j]}")


@dataclass
class RawFrame:
    pixels: np.ndarray  # (480, 640, 3) uint8, RGB
    frame_id: int
    capture_ts: int  # monotonic ns
    width: int = FRAME_WIDTH
    height: int = FRAME_HEIGHT


@dataclass
class CompressedFrame:
    frame_id: int
    capture_ts: int
    quality: int
    data: bytes


def generate_frame(scene: SyntheticScene, frame_id: int, capture_ts: int | None = None) -> RawFrame:
    """Render a scene to a raw frame. Pure function of its inputs."""
    scene.validate()
    if capture_ts is None:
        capture_ts = time.monotonic_ns()
    pixels = np.full((FRAME_HEIGHT, FRAME_WIDTH, 3), scene.background_gray, dtype=np.uint8)
    for obj in scene.objects:
        x, y, w, h = obj.bbox
        pixels[y:y + h, x:x + w] = PALETTE[obj.class_name]
    return RawFrame(pixels=pixels, frame_id=frame_id, capture_ts=capture_ts)


def encode_image(frame: RawFrame, quality: int) -> CompressedFrame:
    if not 1 <= quality <= 100:
        raise CodecError(f"quality out of range: {quality}")
    ok, buf = cv2.imencode(".jpg", cv2.cvtColor(frame.pixels, cv2.COLOR_RGB2BGR),
                           [cv2.IMWRITE_JPEG_QUALITY, quality])
    if not ok:
        raise CodecError("JPEG encode failed")
    return CompressedFrame(frame_id=frame.frame_id, capture_ts=frame.capture_ts,
                           quality=quality, data=buf.tobytes())


def decode_image(data: bytes) -> np.ndarray:
    """Decode JPEG bytes to an RGB uint8 array, raising CodecError on junk."""
    if len(data) < 4 or data[:2] != b"\xff\xd8" or data[-2:] != b"\xff\xd9":
        raise CodecError("not a complete JPEG stream")
    bgr = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_COLOR)
    if bgr is None:
        raise CodecError("JPEG decode failed")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def pad_jpeg(data: bytes, target_bytes: int) -> bytes:
    """Pad a JPEG to target_bytes by inserting COM segments before EOI.

    The result is still a valid baseline JPEG. Inputs already at or above
    the target (or with a sub-4-byte gap, the COM minimum) pass through.
    """
    if data[-2:] != b"\xff\xd9":
        raise CodecError("missing EOI marker")
    pad = target_bytes - len(data)
    segments = []
    while pad >= 4:
        body = min(pad - 4, 0xFFFD)  # segment length field covers itself
        segments.append(b"\xff\xfe" + (body + 2).to_bytes(2, "big") + b"\x00" * body)
        pad -= 4 + body
    if not segments:
        return data
    return data[:-2] + b"".join(segments) + b"\xff\xd9"


def classify_color(rgb) -> tuple[str, float]:
    """Nearest palette class and its Euclidean distance."""
    best, best_d = "", float("inf")
    r, g, b = float(rgb[0]), float(rgb[1]), float(rgb[2])
    for name, (cr, cg, cb) in PALETTE.items():
        d = ((r - cr) ** 2 + (g - cg) ** 2 + (b - cb) ** 2) ** 0.5
        if d < best_d:
            best, best_d = name, d
    return best, best_d


def _draw_glyph(pixels: np.ndarray, ch: str, x: int, y: int, color) -> None:
    rows = FONT_5X7.get(ch.upper())
    if rows is None:
        rows = FONT_5X7[" "]
    h, w = pixels.shape[:2]
    for r, bits in enumerate(rows):
        py = y + r
        if not 0 <= py < h:
            continue
        for c in range(GLYPH_W):
            if bits & (1 << (GLYPH_W - 1 - c)):
                px = x + c
                if 0 <= px < w:
                    pixels[py, px] = color


def annotate_frame(pixels: np.ndarray, detections) -> np.ndarray:
    """Draw 2-px box outlines plus a bitmap class label above each detection.

    Returns a new buffer; pixels outside the annotation regions are untouched.
    Out-of-bounds boxes are clipped, never rejected.
    """
    out = pixels.copy()
    h, w = out.shape[:2]
    for det in detections:
        color = PALETTE.get(det.class_name, (255, 255, 255))
        x, y, bw, bh = det.bbox
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + bw, w), min(y + bh, h)
        if x1 <= x0 or y1 <= y0:
            continue
        # 2-px outline, drawn inside the box so it survives clipping
        out[y0:min(y0 + 2, y1), x0:x1] = color
        out[max(y1 - 2, y0):y1, x0:x1] = color
        out[y0:y1, x0:min(x0 + 2, x1)] = color
        out[y0:y1, max(x1 - 2, x0):x1] = color
        label = det.class_name.upper()
        ly = y0 - GLYPH_H - 2
        lx = x0
        for i, ch in enumerate(label):
            _draw_glyph(out, ch, lx + i * (GLYPH_W + 1), ly, color)
    return out


def parse_scene_line(line: str) -> SyntheticScene:
    """Parse `scene_id;class:x,y,w,h;class:x,y,w,h` into a scene."""
    parts = [p.strip() for p in line.strip().split(";") if p.strip()]
    if not parts:
        raise SceneError("empty scene line")
    scene_id = int(parts[0])
    objects = []
    for tok in parts[1:]:
        cls, _, coords = tok.partition(":")
        x, y, w, h = (int(v) for v in coords.split(","))
        objects.append(SceneObject(class_name=cls.strip(), bbox=(x, y, w, h)))
    scene = SyntheticScene(scene_id=scene_id, objects=tuple(objects))
    scene.validate()
    return scene


def scene_to_line(scene: SyntheticScene) -> str:
    toks = [str(scene.scene_id)]
    toks += [f"{o.class_name}:{o.bbox[0]},{o.bbox[1]},{o.bbox[2]},{o.bbox[3]}"
             for o in scene.objects]
    return ";".join(toks)


def load_scene_corpus(path) -> list[SyntheticScene]:
    scenes = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                scenes.append(parse_scene_line(line))
    if not scenes:
        raise SceneError(f"no scenes in {path}")
    return scenes


def make_default_corpus(n: int = 20, seed: int = 7) -> list[SyntheticScene]:
    """Deterministic corpus of n scenes, 1-4 objects each.

    Boxes are 8-px aligned so the block detector recovers them exactly
    after a Q90 round trip.
    """
    rng = np.random.default_rng(seed)
    classes = list(PALETTE)
    scenes = []
    for sid in range(n):
        n_obj = 1 + sid % 4
        objs: list[SceneObject] = []
        attempts = 0
        while len(objs) < n_obj and attempts < 200:
            attempts += 1
            w = int(rng.integers(5, 16)) * 8
            h = int(rng.integers(5, 16)) * 8
            x = int(rng.integers(1, (FRAME_WIDTH - w) // 8)) * 8
            y = int(rng.integers(1, (FRAME_HEIGHT - h) // 8)) * 8
            # keep a gap so JPEG bleed never merges neighbors
            clear = all(
                not (x - 8 < ox + ow and ox < x + w + 8 and y - 8 < oy + oh and oy < y + h + 8)
                for _, (ox, oy, ow, oh) in ((o.class_name, o.bbox) for o in objs)
            )
            if clear:
                cls = classes[int(rng.integers(0, len(classes)))]
                if any(o.class_name == cls for o in objs):
                    continue
                objs.append(SceneObject(class_name=cls, bbox=(x, y, w, h)))
        scene = SyntheticScene(scene_id=sid, objects=tuple(objs))
        scene.validate()
        scenes.append(scene)
    return scenes


def write_scene_corpus(scenes, path) -> None:
    with open(path, "w") as fh:
        for scene in scenes:
            fh.write(scene_to_line(scene) + "\n")
