"""Application-Querying: two-panel composite prompts for an image editor.

The query canvas mimics an application window. The context panel shows the
full input image with the target's mask outline; the task panel shows the
masked object pixels on white. The editor is asked to return the same canvas
with the task panel completed, and :func:`parse_aq_response` crops it back.

All resampling is nearest-neighbour in integer arithmetic and labels use a
built-in bitmap font, so the output bytes do not depend on the platform.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptyMask, LayoutOverflow, ShapeMismatch, SizeMismatch, ValidationError
from .geometry import BinaryMask

WHITE = 255
CANVAS_GRAY = 232
NEAR_WHITE = 250


class PromptKind(str, enum.Enum):
    OBJECT_EXTRACTION = "object_extraction"
    BACKGROUND_REMOVAL = "background_removal"
    SEGMENTATION_LABELS = "segmentation_labels"


@dataclass(frozen=True)
class PromptTemplate:
    kind: PromptKind
    text: str

    def __post_init__(self):
        object.__setattr__(self, "kind", PromptKind(self.kind))
        if (self.kind is PromptKind.OBJECT_EXTRACTION
                and not self.text.startswith("[OBJECT EXTRACTION APPLICATION]")):
            raise ValidationError("object extraction prompt must start with "
                                  "'[OBJECT EXTRACTION APPLICATION]'")


DEFAULT_PROMPTS = {
    PromptKind.OBJECT_EXTRACTION: PromptTemplate(
        PromptKind.OBJECT_EXTRACTION,
        "[OBJECT EXTRACTION APPLICATION]: extract a single 3D object out of a scene. "
        "The extracted object should appear in the white box without background from a "
        "frontal view. Only the single selected object with border should be extracted and "
        "repaired if parts are missing. No object occluding the selected object should be "
        "reconstructed. No accidental background leaking should be included. Use the scene "
        "as a reference and extract the object.",
    ),
    PromptKind.BACKGROUND_REMOVAL: PromptTemplate(
        PromptKind.BACKGROUND_REMOVAL,
        "Remove ALL objects and furniture. I want a single empty room. No chairs, tables, "
        "lamps, dresser, kitchen parts etc.\n"
        "Just give me back the same room but EMPTY. Keep only canvas and rugs. Same light, "
        "same perspective, same walls, floor and ceiling.",
    ),
    PromptKind.SEGMENTATION_LABELS: PromptTemplate(
        PromptKind.SEGMENTATION_LABELS,
        "\n".join([
            "furniture", "table with decorations", "chair", "sideboard with decorations",
            "shelf", "bookshelf", "dresser with decorations", "cabinet with decorations",
            "couch", "bed with pillows", "lamp", "floor", "kitchen counter",
        ]),
    ),
}


def load_prompts(overrides: dict | None = None) -> dict[PromptKind, PromptTemplate]:
    """Defaults, with per-kind text overrides from a config mapping."""
    out = dict(DEFAULT_PROMPTS)
    for kind, text in (overrides or {}).items():
        k = PromptKind(kind)
        out[k] = PromptTemplate(k, text)
    return out


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)

    def disjoint(self, other: Rect) -> bool:
        return (self.x + self.w <= other.x or other.x + other.w <= self.x
                or self.y + self.h <= other.y or other.y + other.h <= self.y)


@dataclass(frozen=True)
class AqLayout:
    canvas: tuple[int, int] = (1536, 768)  # width, height
    panel_context: Rect = field(default_factory=lambda: Rect(32, 32, 704, 704))
    panel_task: Rect = field(default_factory=lambda: Rect(800, 32, 704, 704))
    outline_color: tuple[int, int, int] = (255, 0, 0)
    outline_thickness: int = 3
    label_context: tuple[int, int] = (32, 10)
    label_task: tuple[int, int] = (800, 10)
    label_text: tuple[str, str] = ("SCENE", "OBJECT")
    # task-panel magnification is capped at this multiple of the context scale
    task_zoom_limit: float = 4.0

    def __post_init__(self):
        W, H = self.canvas
        for r in (self.panel_context, self.panel_task):
            if r.x < 0 or r.y < 0 or r.x + r.w > W or r.y + r.h > H:
                raise LayoutOverflow("panel extends beyond the canvas")
        if not self.panel_context.disjoint(self.panel_task):
            raise ValidationError("panels overlap")
        if self.outline_thickness < 1:
            raise ValidationError("outline thickness must be >= 1")


@dataclass(frozen=True)
class AqParse:
    image: np.ndarray
    white_fraction: float
    empty: bool


# 5x7 glyphs, one string per row
_GLYPHS = {
    "A": ["01110", "10001", "10001", "11111", "10001", "10001", "10001"],
    "B": ["11110", "10001", "10001", "11110", "10001", "10001", "11110"],
    "C": ["01111", "10000", "10000", "10000", "10000", "10000", "01111"],
    "E": ["11111", "10000", "10000", "11110", "10000", "10000", "11111"],
    "J": ["00111", "00010", "00010", "00010", "00010", "10010", "01100"],
    "K": ["10001", "10010", "10100", "11000", "10100", "10010", "10001"],
    "N": ["10001", "11001", "10101", "10011", "10001", "10001", "10001"],
    "O": ["01110", "10001", "10001", "10001", "10001", "10001", "01110"],
    "S": ["01111", "10000", "10000", "01110", "00001", "00001", "11110"],
    "T": ["11111", "00100", "00100", "00100", "00100", "00100", "00100"],
    "X": ["10001", "10001", "01010", "00100", "01010", "10001", "10001"],
}


def _draw_text(canvas: np.ndarray, text: str, x: int, y: int, scale: int = 2,
               color=(40, 40, 40)) -> None:
    for ch in text.upper():
        glyph = _GLYPHS.get(ch)
        if glyph is not None:
            bits = np.array([[c == "1" for c in row] for row in glyph])
            block = np.kron(bits, np.ones((scale, scale), dtype=bool))
            h, w = block.shape
            region = canvas[y:y + h, x:x + w]
            region[block[:region.shape[0], :region.shape[1]]] = color
        x += 6 * scale


def _check_image(image: np.ndarray) -> np.ndarray:
    a = np.asarray(image)
    if a.ndim != 3 or a.shape[2] != 3 or a.dtype != np.uint8:
        raise ValidationError("expected an (H, W, 3) uint8 RGB image")
    return a


def _resize_nearest(a: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    h, w = a.shape[:2]
    # source index = floor((2*dst + 1) * src_len / (2*dst_len)), integer-only
    ys = ((2 * np.arange(out_h) + 1) * h) // (2 * out_h)
    xs = ((2 * np.arange(out_w) + 1) * w) // (2 * out_w)
    return a[ys][:, xs]


def _fit_size(w: int, h: int, box_w: int, box_h: int, limit: float | None = None) -> tuple[int, int]:
    f = min(box_w / w, box_h / h)
    if limit is not None:
        f = min(f, limit)
    out_w = min(box_w, max(1, int(round(w * f))))
    out_h = min(box_h, max(1, int(round(h * f))))
    return out_w, out_h


def _paste_centered(canvas: np.ndarray, rect: Rect, tile: np.ndarray) -> None:
    th, tw = tile.shape[:2]
    y = rect.y + (rect.h - th) // 2
    x = rect.x + (rect.w - tw) // 2
    canvas[y:y + th, x:x + tw] = tile


def mask_outline(bits: np.ndarray, thickness: int) -> np.ndarray:
    """Inner morphological boundary; pixels beyond the image count as outside."""
    eroded = ndimage.binary_erosion(bits, structure=np.ones((3, 3), dtype=bool),
                                    iterations=thickness, border_value=0)
    return bits & ~eroded


def build_aq_query(image: np.ndarray, mask: BinaryMask, layout: AqLayout | None = None) -> np.ndarray:
    layout = layout or AqLayout()
    img = _check_image(image)
    H, W = img.shape[:2]
    if mask.shape != (H, W):
        raise ShapeMismatch(f"mask {mask.shape} vs image {(H, W)}")
    if mask.count() == 0:
        raise EmptyMask("mask selects no pixels")
    for r in (layout.panel_context, layout.panel_task):
        if r.w < 1 or r.h < 1:
            raise LayoutOverflow("panel cannot hold a 1-pixel image")
    cw, ch = layout.canvas
    canvas = np.full((ch, cw, 3), CANVAS_GRAY, dtype=np.uint8)

    # context panel: whole image plus outline
    pa = layout.panel_context
    canvas[pa.slices()] = WHITE
    aw, ah = _fit_size(W, H, pa.w, pa.h)
    scaled = _resize_nearest(img, aw, ah).copy()
    scaled_mask = _resize_nearest(mask.bits, aw, ah)
    scaled[mask_outline(scaled_mask, layout.outline_thickness)] = layout.outline_color
    _paste_centered(canvas, pa, scaled)

    # task panel: masked pixels over white, cropped to the mask
    pb = layout.panel_task
    canvas[pb.slices()] = WHITE
    rows = np.nonzero(mask.bits.any(axis=1))[0]
    cols = np.nonzero(mask.bits.any(axis=0))[0]
    crop = img[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    crop_mask = mask.bits[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    obj = np.where(crop_mask[..., None], crop, np.uint8(WHITE)).astype(np.uint8)
    context_scale = min(pa.w / W, pa.h / H)
    bw, bh = _fit_size(obj.shape[1], obj.shape[0], pb.w, pb.h,
                       layout.task_zoom_limit * context_scale)
    _paste_centered(canvas, pb, _resize_nearest(obj, bw, bh))

    for text, (x, y) in zip(layout.label_text, (layout.label_context, layout.label_task)):
        _draw_text(canvas, text, x, y)
    return canvas


def parse_aq_response(response: np.ndarray, layout: AqLayout | None = None,
                      cleanup: bool = False, empty_threshold: float = 0.98) -> AqParse:
    """Crop the task panel; optionally whiten near-white border-connected background."""
    layout = layout or AqLayout()
    img = _check_image(response)
    cw, ch = layout.canvas
    if img.shape[:2] != (ch, cw):
        raise SizeMismatch(f"response is {img.shape[1]}x{img.shape[0]}, layout canvas is {cw}x{ch}")
    out = img[layout.panel_task.slices()].copy()
    near_white = np.all(out >= NEAR_WHITE, axis=2)
    if cleanup:
        labels, _ = ndimage.label(near_white)
        border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
        border = border[border > 0]
        out[np.isin(labels, border)] = WHITE
        near_white = np.all(out >= NEAR_WHITE, axis=2)
    frac = float(near_white.mean())
    return AqParse(out, frac, frac > empty_threshold)


def build_plain_query(image: np.ndarray, mask: BinaryMask) -> np.ndarray:
    """Masked object over white at input resolution (A-Q disabled ablation)."""
    img = _check_image(image)
    if mask.count() == 0:
        raise EmptyMask("mask selects no pixels")
    return np.where(mask.bits[..., None], img, np.uint8(WHITE)).astype(np.uint8)
