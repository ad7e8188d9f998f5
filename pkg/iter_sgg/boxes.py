"""Bounding box geometry.

Boxes are stored in normalized (cx, cy, w, h) form. The corner form
(x1, y1, x2, y2) only appears at IO and geometry boundaries. Scalar helpers
operate on :class:`BBox` values, the batched helpers on tensors whose last
dimension holds the four coordinates.
"""

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class BBox:
    """An axis-aligned box in normalized center form."""

    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_xyxy(cls, x1, y1, x2, y2):
        if x1 > x2 or y1 > y2:
            raise ValueError(f"invalid corner box ({x1}, {y1}, {x2}, {y2}): expected x1 <= x2 and y1 <= y2")
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @classmethod
    def from_list(cls, values):
        cx, cy, w, h = values
        return cls(float(cx), float(cy), float(w), float(h))

    def to_xyxy(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def to_list(self):
        return [self.cx, self.cy, self.w, self.h]

    @property
    def area(self):
        return self.w * self.h

    def violations(self, strict=False):
        """Returns a list of human readable invariant violations (empty if valid).

        With ``strict``, the box must also have positive width and height, as
        required for entity boxes.
        """
        out = []
        for name in ("cx", "cy", "w", "h"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                out.append(f"{name}={value} outside [0, 1]")
        if strict and (self.w <= 0 or self.h <= 0):
            out.append(f"degenerate entity box (w={self.w}, h={self.h})")
        return out


def corner_center_convert(b):
    """Converts a BBox to its corner tuple, or a corner tuple to a BBox."""
    if isinstance(b, BBox):
        return b.to_xyxy()
    return BBox.from_xyxy(*b)


def _intersection(a, b):
    ax1, ay1, ax2, ay2 = a.to_xyxy()
    bx1, by1, bx2, by2 = b.to_xyxy()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    return iw * ih


def _enclosing_area(a, b):
    ax1, ay1, ax2, ay2 = a.to_xyxy()
    bx1, by1, bx2, by2 = b.to_xyxy()
    return (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))


def iou(a, b):
    """Intersection over union of two boxes."""
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        raise ValueError("zero-area union")
    return inter / union


def iou_or_zero(a, b):
    """Like :func:`iou`, but returns 0 for a pair of zero-area boxes."""
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def giou(a, b):
    """Generalized IoU. Only a zero-area enclosing box is an error; a zero-area
    union contributes an IoU of 0."""
    enclosing = _enclosing_area(a, b)
    if enclosing <= 0:
        raise ValueError("zero-area enclosing box")
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    iou_value = inter / union if union > 0 else 0.0
    return iou_value - (enclosing - union) / enclosing


def predicate_box_of(s, o):
    """The box whose diagonal corners are the centers of s and o."""
    return BBox.from_xyxy(min(s.cx, o.cx), min(s.cy, o.cy), max(s.cx, o.cx), max(s.cy, o.cy))


# Batched tensor forms, used by matching and the losses.


def box_cxcywh_to_xyxy(x):
    cx, cy, w, h = x.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(x):
    x1, y1, x2, y2 = x.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def box_area(boxes):
    """Area of corner-form boxes."""
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def pairwise_giou(a, b):
    """Generalized IoU between every box of a [..., N, 4] and every box of
    b [M, 4], both in center form. Returns [..., N, M]."""
    a, b = box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b)
    area_a, area_b = box_area(a), box_area(b)
    lt = torch.max(a[..., :, None, :2], b[None, :, :2])
    rb = torch.min(a[..., :, None, 2:], b[None, :, 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    union = area_a[..., :, None] + area_b[None, :] - inter
    lt = torch.min(a[..., :, None, :2], b[None, :, :2])
    rb = torch.max(a[..., :, None, 2:], b[None, :, 2:])
    enclosing = (rb - lt).clamp(min=0).prod(-1)
    return inter / union - (enclosing - union) / enclosing


def elementwise_giou(a, b):
    """Generalized IoU between matching rows of a and b, both [..., 4] in center form."""
    a, b = box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b)
    lt = torch.max(a[..., :2], b[..., :2])
    rb = torch.min(a[..., 2:], b[..., 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    union = box_area(a) + box_area(b) - inter
    lt = torch.min(a[..., :2], b[..., :2])
    rb = torch.max(a[..., 2:], b[..., 2:])
    enclosing = (rb - lt).clamp(min=0).prod(-1)
    return inter / union - (enclosing - union) / enclosing


def predicate_boxes(s, o):
    """Batched :func:`predicate_box_of` for center-form tensors."""
    lo = torch.min(s[..., :2], o[..., :2])
    hi = torch.max(s[..., :2], o[..., :2])
    return box_xyxy_to_cxcywh(torch.cat([lo, hi], dim=-1))
