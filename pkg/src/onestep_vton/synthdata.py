"""Procedural paired try-on data plus a loader for VITON-HD style directories.

The generator paints a stick-figure person, a flat in-shop garment, and the
ground-truth try-on with one shared painter, so the pair is geometrically
consistent by construction: every garment part is placed on the body through
a recorded affine map, which makes the exact warping flow recoverable
(``oracle_flow``). All randomness is drawn from a PCG64 stream seeded per
sample, so outputs are bit-reproducible.

Internal parsing labels: 0 background, 1 hair/head, 2 torso-cloth,
3 lower-cloth, 4 left arm, 5 right arm, 6 left leg, 7 right leg,
8 center body (neck + belly).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import (
    GARMENT_TYPES,
    NUM_PARSE_LABELS,
    PARSE_BACKGROUND,
    PARSE_CENTER_BODY,
    PARSE_HEAD,
    PARSE_LEFT_ARM,
    PARSE_LEFT_LEG,
    PARSE_LOWER_CLOTH,
    PARSE_RIGHT_ARM,
    PARSE_RIGHT_LEG,
    PARSE_UPPER_CLOTH,
    ConfigError,
)
from .errors import DataError

PATTERN_SOLID = 0
PATTERN_H_STRIPES = 1
PATTERN_V_STRIPES = 2
PATTERN_CHECKER = 3

# Joint order used throughout: rasterized heatmaps, loaders, tests.
JOINT_NAMES = (
    "head", "neck",
    "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
    "left_hip", "right_hip",
)


def garment_cloth_label(garment_type: str) -> int:
    """Parsing label written where this garment type lands on the body."""
    if garment_type in ("upper", "dress"):
        return PARSE_UPPER_CLOTH
    if garment_type == "lower":
        return PARSE_LOWER_CLOTH
    raise ConfigError(f"unknown garment_type '{garment_type}'")


@dataclass
class GarmentPart:
    """One flat-rectangle panel and the affine placing it on the body.

    ``matrix @ (u, v) + offset`` maps flat-garment pixel coordinates onto
    canvas coordinates; the inverse is what the painter (and the flow
    oracle) evaluates per target pixel.
    """

    flat_rect: tuple[float, float, float, float]  # u0, v0, u1, v1
    matrix: np.ndarray
    offset: np.ndarray

    def inverse_uv(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        inv = np.linalg.inv(self.matrix)
        dx = x - self.offset[0]
        dy = y - self.offset[1]
        u = inv[0, 0] * dx + inv[0, 1] * dy
        v = inv[1, 0] * dx + inv[1, 1] * dy
        return u, v

    def covers(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        u0, v0, u1, v1 = self.flat_rect
        return (u >= u0) & (u <= u1) & (v >= v0) & (v <= v1)


@dataclass
class GarmentSpec:
    garment_type: str
    base_color: np.ndarray
    accent_color: np.ndarray
    pattern: int
    stripe_px: float
    parts: list[GarmentPart]
    emblem: dict | None = None  # {"shape", "color", "center_uv", "radius"}

    def flat_color(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Procedural texture in flat-garment coordinates, values in [0, 1]."""
        shape = u.shape
        base = np.broadcast_to(self.base_color, shape + (3,)).copy()
        if self.pattern == PATTERN_H_STRIPES:
            band = (np.floor(v / self.stripe_px).astype(np.int64) % 2) == 1
        elif self.pattern == PATTERN_V_STRIPES:
            band = (np.floor(u / self.stripe_px).astype(np.int64) % 2) == 1
        elif self.pattern == PATTERN_CHECKER:
            band = (
                (np.floor(u / self.stripe_px) + np.floor(v / self.stripe_px)).astype(np.int64) % 2
            ) == 1
        else:
            band = np.zeros(shape, dtype=bool)
        base[band] = self.accent_color
        if self.emblem is not None:
            cu, cv = self.emblem["center_uv"]
            r = self.emblem["radius"]
            if self.emblem["shape"] == "square":
                inside = (np.abs(u - cu) <= r) & (np.abs(v - cv) <= r)
            else:
                inside = (u - cu) ** 2 + (v - cv) ** 2 <= r**2
            base[inside] = self.emblem["color"]
        return base


@dataclass
class IdentityMark:
    position: tuple[float, float]
    shape: str
    color: np.ndarray
    radius: float
    host_label: int


@dataclass
class SynthScene:
    seed: int
    canvas: tuple[int, int]
    body_params: dict
    garment_params: GarmentSpec           # the in-shop garment being tried on
    original_garment: GarmentSpec         # what the person wears before try-on
    static_garment: GarmentSpec | None    # the non-swapped garment, if any
    identity_marks: list[IdentityMark]
    deformation: str | tuple[float, float]


@dataclass
class Sample:
    person: torch.Tensor                  # [3, H, W] in [-1, 1]
    garment: torch.Tensor                 # [3, H, W] flat in-shop rendering
    parsing: torch.Tensor                 # [H, W] int64, internal labels
    keypoints: list[tuple[float, float, int]]
    densepose: torch.Tensor               # [3, H, W] (part id, u, v) in [-1, 1]
    gt_tryon: torch.Tensor | None
    garment_type: str
    scene: SynthScene | None = None
    name: str = ""


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def _capsule_mask(xx, yy, p0, p1, radius):
    """Pixels within `radius` of segment p0-p1 (a stadium shape)."""
    px, py = p0
    qx, qy = p1
    vx, vy = qx - px, qy - py
    denom = vx * vx + vy * vy
    if denom < 1e-9:
        t = np.zeros_like(xx)
    else:
        t = np.clip(((xx - px) * vx + (yy - py) * vy) / denom, 0.0, 1.0)
    cx = px + t * vx
    cy = py + t * vy
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2


def _capsule_params(xx, yy, p0, p1, radius):
    """(mask, arc coord in [0,1], signed lateral coord in [0,1]) of a capsule."""
    px, py = p0
    qx, qy = p1
    vx, vy = qx - px, qy - py
    denom = max(vx * vx + vy * vy, 1e-9)
    t = np.clip(((xx - px) * vx + (yy - py) * vy) / denom, 0.0, 1.0)
    cx = px + t * vx
    cy = py + t * vy
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    side = np.sign((xx - px) * vy - (yy - py) * vx)
    lateral = np.clip(0.5 + 0.5 * side * np.sqrt(d2) / radius, 0.0, 1.0)
    return d2 <= radius**2, t, lateral


def _rect_mask(xx, yy, x0, y0, x1, y1):
    return (xx >= x0) & (xx <= x1) & (yy >= y0) & (yy <= y1)


def _affine_from_points(flat_rect, src_pts, dst_pts) -> GarmentPart:
    """GarmentPart whose affine maps three flat points onto three canvas points."""
    src = np.array([[p[0] for p in src_pts], [p[1] for p in src_pts], [1, 1, 1]],
                   dtype=np.float64)
    dst = np.array([[p[0] for p in dst_pts], [p[1] for p in dst_pts]],
                   dtype=np.float64)
    full = dst @ np.linalg.inv(src)
    return GarmentPart(flat_rect=flat_rect, matrix=full[:, :2], offset=full[:, 2])


def _limb_panel(flat_rect, p0, p1, half_width, head_pad, *, axis="u",
                start_edge="low"):
    """Maps a flat rect onto the oriented rectangle hugging segment p0->p1.

    The rect is padded back beyond p0 by `head_pad` so it swallows the joint
    cap of a capsule limb. `axis` names the flat coordinate running along the
    limb and `start_edge` which end of that coordinate lands at p0.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    direction = p1 - p0
    direction = direction / max(float(np.hypot(*direction)), 1e-9)
    normal = np.array([-direction[1], direction[0]])
    a = p0 - head_pad * direction
    b = p1
    u0, v0, u1, v1 = flat_rect
    if axis == "u":
        lo, hi = ((u0, u1) if start_edge == "low" else (u1, u0))
        src = [(lo, v0), (hi, v0), (lo, v1)]
    else:
        lo, hi = ((v0, v1) if start_edge == "low" else (v1, v0))
        src = [(u0, lo), (u0, hi), (u1, lo)]
    dst = [a - half_width * normal, b - half_width * normal, a + half_width * normal]
    return _affine_from_points(flat_rect, src, dst)


def _axis_rect_part(target, flat_rect):
    """Affine mapping a flat rect onto an axis-aligned target rect."""
    x0, y0, x1, y1 = target
    u0, v0, u1, v1 = flat_rect
    sx = (x1 - x0) / max(u1 - u0, 1e-9)
    sy = (y1 - y0) / max(v1 - v0, 1e-9)
    matrix = np.array([[sx, 0.0], [0.0, sy]])
    offset = np.array([x0 - sx * u0, y0 - sy * v0])
    return GarmentPart(flat_rect=flat_rect, matrix=matrix, offset=offset)


def _identity_part(flat_rect, shift=(0.0, 0.0)):
    return GarmentPart(
        flat_rect=flat_rect,
        matrix=np.eye(2),
        offset=np.asarray(shift, dtype=np.float64),
    )


def sample_bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Border-clamped bilinear lookup of img (H, W, C) at float coords."""
    h, w = img.shape[:2]
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (u - x0)[..., None]
    wy = (v - y0)[..., None]
    top = img[y0, x0] * (1.0 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1.0 - wx) + img[y1, x1] * wx
    return top * (1.0 - wy) + bot * wy


# ---------------------------------------------------------------------------
# scene construction
# ---------------------------------------------------------------------------

def _draw_color(rng, low=0.15, high=0.9):
    return rng.uniform(low, high, size=3)


def _make_garment_spec(rng, garment_type, size, deformation, body) -> GarmentSpec:
    h, w = size
    base = _draw_color(rng)
    accent = _draw_color(rng)
    while np.abs(accent - base).sum() < 0.45:
        accent = _draw_color(rng)
    pattern = int(rng.integers(0, 4))
    stripe = float(rng.uniform(0.06, 0.12)) * h

    # In-shop photos are not aligned with the wearer: flat layouts sit
    # noticeably off the body position, so warping starts misregistered.
    if garment_type == "upper":
        panel_w = 0.40 * w
        panel_h = 0.30 * h
        pcx, pcy = 0.38 * w, 0.30 * h
        panel_rect = (pcx - panel_w / 2, pcy - panel_h / 2, pcx + panel_w / 2, pcy + panel_h / 2)
        sleeve_h = 0.10 * h
        sleeve_len = 0.12 * w
        l_sleeve = (panel_rect[0] - sleeve_len, pcy - panel_h / 2,
                    panel_rect[0], pcy - panel_h / 2 + sleeve_h)
        r_sleeve = (panel_rect[2], pcy - panel_h / 2,
                    panel_rect[2] + sleeve_len, pcy - panel_h / 2 + sleeve_h)
        flat_rects = [panel_rect, l_sleeve, r_sleeve]
    elif garment_type == "lower":
        leg_w = 0.10 * w
        top, bottom = 0.24 * h, 0.66 * h
        l_rect = (0.36 * w - leg_w - 0.01 * w, top, 0.36 * w - 0.01 * w, bottom)
        r_rect = (0.36 * w + 0.01 * w, top, 0.36 * w + leg_w + 0.01 * w, bottom)
        flat_rects = [l_rect, r_rect]
    else:  # dress
        panel_w = 0.36 * w
        panel_h = 0.52 * h
        pcx, pcy = 0.36 * w, 0.38 * h
        flat_rects = [(pcx - panel_w / 2, pcy - panel_h / 2,
                       pcx + panel_w / 2, pcy + panel_h / 2)]

    if deformation == "none":
        parts = [_identity_part(r) for r in flat_rects]
    elif isinstance(deformation, tuple):
        parts = [_identity_part(r, shift=deformation) for r in flat_rects]
    else:
        parts = _place_on_body(garment_type, flat_rects, body)

    emblem = None
    if rng.random() < 0.8:
        u0, v0, u1, v1 = flat_rects[0]
        emblem = {
            "shape": "square" if rng.random() < 0.5 else "disc",
            "color": _draw_color(rng),
            "center_uv": ((u0 + u1) / 2, (v0 + v1) / 2),
            "radius": 0.18 * min(u1 - u0, v1 - v0),
        }

    return GarmentSpec(
        garment_type=garment_type,
        base_color=base,
        accent_color=accent,
        pattern=pattern,
        stripe_px=stripe,
        parts=parts,
        emblem=emblem,
    )


def _place_on_body(garment_type, flat_rects, body) -> list[GarmentPart]:
    if garment_type == "upper":
        torso = body["torso"]
        parts = [_axis_rect_part(torso, flat_rects[0])]
        arm_r = body["arm_radius"]
        for rect, side in ((flat_rects[1], "left"), (flat_rects[2], "right")):
            # The panel-adjacent sleeve edge lands at the shoulder; padding
            # beyond it swallows the shoulder cap of the arm capsule.
            parts.append(
                _limb_panel(
                    rect, body[f"{side}_shoulder"], body[f"{side}_elbow"],
                    half_width=arm_r + 1.0, head_pad=arm_r + 1.6,
                    axis="u", start_edge="high" if side == "left" else "low",
                )
            )
        return parts
    if garment_type == "lower":
        leg_r = body["leg_radius"]
        return [
            _limb_panel(
                rect, body[f"{side}_hip"], body[f"{side}_knee"],
                half_width=leg_r + 1.0, head_pad=leg_r + 1.6,
                axis="v", start_edge="low",
            )
            for rect, side in zip(flat_rects, ("left", "right"))
        ]
    # dress: one panel from above the shoulder line (covering the shoulder
    # caps of both arms) down to the hem
    torso = body["torso"]
    x0, y0, x1, _ = torso
    w = body["canvas"][1]
    top = y0 - (body["arm_radius"] + 1.6)
    target = (x0 - 0.01 * w, top, x1 + 0.01 * w, body["dress_hem_y"])
    return [_axis_rect_part(target, flat_rects[0])]


def _make_body(rng, size) -> dict:
    h, w = size
    cx = (0.5 + rng.uniform(-0.015, 0.015)) * w
    head_r = 0.085 * h * rng.uniform(0.92, 1.08)
    head_c = (cx + rng.uniform(-0.01, 0.01) * w, 0.14 * h)
    torso_half_w = 0.16 * w * rng.uniform(0.92, 1.08)
    torso = (cx - torso_half_w, 0.28 * h, cx + torso_half_w, 0.55 * h)
    neck = (cx - 0.045 * w, head_c[1] + head_r, cx + 0.045 * w, torso[1])
    belly = (cx - 0.12 * w, torso[3], cx + 0.12 * w, 0.62 * h)

    arm_radius = max(1.6, 0.040 * w)
    leg_radius = max(1.8, 0.048 * w)

    body: dict = {
        "canvas": size,
        "head_center": head_c,
        "head_radius": head_r,
        "neck": neck,
        "torso": torso,
        "belly": belly,
        "arm_radius": arm_radius,
        "leg_radius": leg_radius,
        "dress_hem_y": 0.74 * h,
    }

    shoulder_y = torso[1] + 0.015 * h
    upper_len = 0.17 * h
    fore_len = 0.15 * h
    for side, sgn in (("left", -1.0), ("right", 1.0)):
        shoulder = (cx + sgn * torso_half_w, shoulder_y)
        a1 = np.deg2rad(rng.uniform(20.0, 45.0))   # outward lean of upper arm
        a2 = np.deg2rad(rng.uniform(-5.0, 20.0))   # forearm closes back in
        elbow = (shoulder[0] + sgn * upper_len * np.sin(a1),
                 shoulder[1] + upper_len * np.cos(a1))
        wrist = (elbow[0] + sgn * fore_len * np.sin(a2),
                 elbow[1] + fore_len * np.cos(a2))
        margin = arm_radius + 1.5
        body[f"{side}_shoulder"] = shoulder
        body[f"{side}_elbow"] = (float(np.clip(elbow[0], margin, w - margin)), elbow[1])
        body[f"{side}_wrist"] = (float(np.clip(wrist[0], margin, w - margin)), wrist[1])

    hip_y = belly[3]
    hip_dx = 0.085 * w
    thigh_len = 0.175 * h
    shin_len = 0.16 * h
    for side, sgn in (("left", -1.0), ("right", 1.0)):
        hip = (cx + sgn * hip_dx, hip_y)
        lean = np.deg2rad(rng.uniform(1.0, 7.0))
        knee = (hip[0] + sgn * thigh_len * np.sin(lean), hip[1] + thigh_len * np.cos(lean))
        ankle = (knee[0] + sgn * shin_len * np.sin(lean * 0.5), knee[1] + shin_len * np.cos(lean * 0.5))
        body[f"{side}_hip"] = hip
        body[f"{side}_knee"] = knee
        body[f"{side}_ankle"] = ankle

    return body


def _make_marks(rng, body) -> list[IdentityMark]:
    marks = []
    n = int(rng.integers(1, 3))
    sides = rng.permutation(["left", "right"])[:n]
    for side in sides:
        elbow = np.asarray(body[f"{side}_elbow"])
        wrist = np.asarray(body[f"{side}_wrist"])
        t = rng.uniform(0.35, 0.75)
        center = elbow + t * (wrist - elbow)
        marks.append(
            IdentityMark(
                position=(round(float(center[0])), round(float(center[1]))),
                shape="disc" if rng.random() < 0.5 else "square",
                color=np.array([0.05, 0.05, 0.05]) + _draw_color(rng, 0.0, 0.25),
                radius=max(0.9, body["arm_radius"] * 0.45),
                host_label=PARSE_LEFT_ARM if side == "left" else PARSE_RIGHT_ARM,
            )
        )
    return marks


def build_scene(seed: int, size: tuple[int, int], garment_type: str,
                deformation: str | tuple[float, float] = "full") -> SynthScene:
    if garment_type not in GARMENT_TYPES:
        raise ConfigError(f"unknown garment_type '{garment_type}'")
    rng = np.random.Generator(np.random.PCG64(seed))
    body = _make_body(rng, size)
    garment = _make_garment_spec(rng, garment_type, size, deformation, body)
    original = _make_garment_spec(rng, garment_type, size, deformation, body)
    # Keep the swapped pair visually distinct.
    while np.abs(original.base_color - garment.base_color).sum() < 0.5:
        original.base_color = _draw_color(rng)
    original.parts = garment.parts  # identical placement, different texture

    static = None
    if garment_type == "upper":
        static = _make_garment_spec(rng, "lower", size, deformation, body)
    elif garment_type == "lower":
        static = _make_garment_spec(rng, "upper", size, deformation, body)

    marks = _make_marks(rng, body)
    return SynthScene(
        seed=seed,
        canvas=size,
        body_params=body,
        garment_params=garment,
        original_garment=original,
        static_garment=static,
        identity_marks=marks,
        deformation=deformation,
    )


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _garment_coverage(spec: GarmentSpec, xx, yy):
    """(part index map, u map, v map); part index -1 where uncovered."""
    idx = np.full(xx.shape, -1, dtype=np.int64)
    u_map = np.zeros(xx.shape, dtype=np.float64)
    v_map = np.zeros(xx.shape, dtype=np.float64)
    for k, part in enumerate(spec.parts):
        u, v = part.inverse_uv(xx, yy)
        inside = part.covers(u, v)
        idx[inside] = k
        u_map[inside] = u[inside]
        v_map[inside] = v[inside]
    return idx, u_map, v_map


def render_flat_garment(spec: GarmentSpec, size: tuple[int, int]) -> np.ndarray:
    """In-shop garment image on a white background, float32 (H, W, 3) in [0,1]."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.ones((h, w, 3), dtype=np.float64)
    colors = spec.flat_color(xx, yy)
    covered = np.zeros((h, w), dtype=bool)
    for part in spec.parts:
        u0, v0, u1, v1 = part.flat_rect
        covered |= _rect_mask(xx, yy, u0, v0, u1, v1)
    img[covered] = colors[covered]
    return img.astype(np.float32)


class _RenderedScene:
    def __init__(self, scene: SynthScene):
        self.scene = scene
        h, w = scene.canvas
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        body = scene.body_params

        labels = np.full((h, w), PARSE_BACKGROUND, dtype=np.int64)
        dense_id = np.zeros((h, w), dtype=np.float64)
        dense_u = np.zeros((h, w), dtype=np.float64)
        dense_v = np.zeros((h, w), dtype=np.float64)

        def put(mask, label, pid, u, v):
            labels[mask] = label
            dense_id[mask] = pid
            dense_u[mask] = np.clip(u, 0.0, 1.0)[mask] if isinstance(u, np.ndarray) else u
            dense_v[mask] = np.clip(v, 0.0, 1.0)[mask] if isinstance(v, np.ndarray) else v

        for side, label in (("left", PARSE_LEFT_LEG), ("right", PARSE_RIGHT_LEG)):
            m1, t1, s1 = _capsule_params(xx, yy, body[f"{side}_hip"], body[f"{side}_knee"], body["leg_radius"])
            m2, t2, s2 = _capsule_params(xx, yy, body[f"{side}_knee"], body[f"{side}_ankle"], body["leg_radius"])
            put(m1, label, label, t1 * 0.5, s1)
            put(m2, label, label, 0.5 + t2 * 0.5, s2)

        for side, label in (("left", PARSE_LEFT_ARM), ("right", PARSE_RIGHT_ARM)):
            m1, t1, s1 = _capsule_params(xx, yy, body[f"{side}_shoulder"], body[f"{side}_elbow"], body["arm_radius"])
            m2, t2, s2 = _capsule_params(xx, yy, body[f"{side}_elbow"], body[f"{side}_wrist"], body["arm_radius"])
            put(m1, label, label, t1 * 0.5, s1)
            put(m2, label, label, 0.5 + t2 * 0.5, s2)

        for rect_name in ("torso", "belly", "neck"):
            x0, y0, x1, y1 = body[rect_name]
            m = _rect_mask(xx, yy, x0, y0, x1, y1)
            u = (xx - x0) / max(x1 - x0, 1e-9)
            v = (yy - y0) / max(y1 - y0, 1e-9)
            # Torso counts as its own dense-pose part; label-wise it is
            # center body until a garment covers it.
            pid = 2 if rect_name == "torso" else PARSE_CENTER_BODY
            put(m, PARSE_CENTER_BODY, pid, u, v)

        self.body_labels = labels.copy()
        self.dense = (dense_id, dense_u, dense_v)
        self.xx, self.yy = xx, yy

        # Garment layers: static garment first, then the swapped garment.
        self.static_cov = None
        if scene.static_garment is not None:
            self.static_cov = _garment_coverage(scene.static_garment, xx, yy)
        self.target_cov = _garment_coverage(scene.garment_params, xx, yy)

        labels_full = labels.copy()
        if self.static_cov is not None:
            labels_full[self.static_cov[0] >= 0] = garment_cloth_label(
                scene.static_garment.garment_type
            )
        labels_full[self.target_cov[0] >= 0] = garment_cloth_label(
            scene.garment_params.garment_type
        )

        # Head painted last: it sits above any collar.
        hx, hy = body["head_center"]
        head = (xx - hx) ** 2 + (yy - hy) ** 2 <= body["head_radius"] ** 2
        labels_full[head] = PARSE_HEAD
        hu = (xx - (hx - body["head_radius"])) / (2 * body["head_radius"])
        hv = (yy - (hy - body["head_radius"])) / (2 * body["head_radius"])
        dense_id[head] = PARSE_HEAD
        dense_u[head] = np.clip(hu, 0, 1)[head]
        dense_v[head] = np.clip(hv, 0, 1)[head]
        self.head = head
        self.labels = labels_full

    def paint(self, swapped_spec: GarmentSpec, rng_colors: dict) -> np.ndarray:
        """Color image for either the person (original garment) or the gt."""
        scene = self.scene
        h, w = scene.canvas
        xx, yy = self.xx, self.yy
        img = np.empty((h, w, 3), dtype=np.float64)

        bg_base = rng_colors["background"]
        grad = (yy / max(h - 1, 1))[..., None] * 0.08
        img[:] = bg_base
        img += grad

        skin = rng_colors["skin"]
        body_vis = self.body_labels != PARSE_BACKGROUND
        img[body_vis] = skin
        shade = rng_colors["skin_shade"]
        for label, tone in shade.items():
            img[self.body_labels == label] = tone

        for mark in scene.identity_marks:
            mx, my = mark.position
            if mark.shape == "square":
                mmask = (np.abs(xx - mx) <= mark.radius) & (np.abs(yy - my) <= mark.radius)
            else:
                mmask = (xx - mx) ** 2 + (yy - my) ** 2 <= mark.radius**2
            mmask &= self.body_labels == mark.host_label
            img[mmask] = mark.color

        if self.static_cov is not None:
            idx, u, v = self.static_cov
            covered = idx >= 0
            colors = scene.static_garment.flat_color(u, v)
            img[covered] = colors[covered]

        idx, u, v = self.target_cov
        covered = idx >= 0
        flat_img = render_flat_garment(swapped_spec, scene.canvas)
        sampled = sample_bilinear(flat_img.astype(np.float64), u, v)
        img[covered] = sampled[covered]

        img[self.head] = rng_colors["skin"]
        hair_y = self.scene.body_params["head_center"][1] - 0.4 * self.scene.body_params["head_radius"]
        hair = self.head & (yy < hair_y)
        img[hair] = rng_colors["hair"]

        return np.clip(img, 0.0, 1.0).astype(np.float32)


def _scene_colors(seed: int) -> dict:
    rng = np.random.Generator(np.random.PCG64(np.uint64(seed) ^ np.uint64(0x5EEDC01D)))
    skin = rng.uniform(0.55, 0.85, size=3)
    return {
        "background": rng.uniform(0.05, 0.25, size=3),
        "skin": skin,
        "hair": rng.uniform(0.0, 0.3, size=3),
        "skin_shade": {
            PARSE_LEFT_ARM: np.clip(skin * 0.96, 0, 1),
            PARSE_RIGHT_ARM: np.clip(skin * 0.92, 0, 1),
            PARSE_LEFT_LEG: np.clip(skin * 0.88, 0, 1),
            PARSE_RIGHT_LEG: np.clip(skin * 0.84, 0, 1),
        },
    }


def _to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float in [0,1] -> [3, H, W] tensor in [-1, 1]."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))) * 2.0 - 1.0


def gen_sample(seed: int, size: tuple[int, int], garment_type: str,
               deformation: str | tuple[float, float] = "full",
               pyramid_depth: int | None = None) -> Sample:
    """Renders one paired example; bit-identical for identical arguments."""
    h, w = size
    if pyramid_depth is not None:
        step = 2 ** (pyramid_depth - 1)
        if h % step or w % step:
            raise ConfigError(
                f"size {h}x{w} not divisible by 2^{pyramid_depth - 1} for a "
                f"{pyramid_depth}-scale pyramid"
            )
    scene = build_scene(seed, size, garment_type, deformation)
    rendered = _RenderedScene(scene)
    colors = _scene_colors(seed)

    person = rendered.paint(scene.original_garment, colors)
    gt = rendered.paint(scene.garment_params, colors)
    flat = render_flat_garment(scene.garment_params, size)

    body = scene.body_params
    kp_names = {
        "head": body["head_center"],
        "neck": ((body["neck"][0] + body["neck"][2]) / 2, body["neck"][1]),
        "left_shoulder": body["left_shoulder"],
        "right_shoulder": body["right_shoulder"],
        "left_elbow": body["left_elbow"],
        "right_elbow": body["right_elbow"],
        "left_wrist": body["left_wrist"],
        "right_wrist": body["right_wrist"],
        "left_hip": body["left_hip"],
        "right_hip": body["right_hip"],
    }
    keypoints = []
    for name in JOINT_NAMES:
        x, y = kp_names[name]
        visible = int(0 <= x < w and 0 <= y < h)
        keypoints.append((float(x), float(y), visible))

    dense_id, dense_u, dense_v = rendered.dense
    dense = np.stack(
        [
            dense_id / (NUM_PARSE_LABELS - 1) * 2.0 - 1.0,
            dense_u * 2.0 - 1.0,
            dense_v * 2.0 - 1.0,
        ],
        axis=0,
    ).astype(np.float32)

    return Sample(
        person=_to_tensor(person),
        garment=_to_tensor(flat),
        parsing=torch.from_numpy(rendered.labels),
        keypoints=keypoints,
        densepose=torch.from_numpy(dense),
        gt_tryon=_to_tensor(gt),
        garment_type=garment_type,
        scene=scene,
        name=f"synth-{garment_type}-{seed}",
    )


def oracle_flow(sample: Sample) -> torch.Tensor:
    """Exact backward flow placing the flat garment onto the try-on body.

    flow[0] is the x displacement, flow[1] the y displacement, in pixels;
    warping the flat garment by it reproduces the garment region of the
    ground-truth try-on. Pixels outside the garment extend the base panel's
    transform, so rigid placements yield globally constant flow.
    """
    if sample.scene is None:
        raise ValueError("oracle_flow needs a generated sample (scene metadata missing)")
    scene = sample.scene
    h, w = scene.canvas
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    spec = scene.garment_params

    base_u, base_v = spec.parts[0].inverse_uv(xx, yy)
    flow_u = xx - base_u
    flow_v = yy - base_v
    for part in spec.parts[1:]:
        u, v = part.inverse_uv(xx, yy)
        inside = part.covers(u, v)
        flow_u[inside] = (xx - u)[inside]
        flow_v[inside] = (yy - v)[inside]
    flow = np.stack([flow_u, flow_v], axis=0).astype(np.float32)
    return torch.from_numpy(flow)


def cloth_mask(sample: Sample) -> torch.Tensor:
    """Binary mask of the try-on garment region in the ground-truth parsing."""
    return sample.parsing == garment_cloth_label(sample.garment_type)


def identity_mark_mask(sample: Sample) -> torch.Tensor:
    """Binary mask of the painted skin marks (tattoo surrogates)."""
    if sample.scene is None:
        raise ValueError("identity marks exist only on generated samples")
    h, w = sample.scene.canvas
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = sample.parsing.numpy()
    mask = np.zeros((h, w), dtype=bool)
    for mark in sample.scene.identity_marks:
        mx, my = mark.position
        if mark.shape == "square":
            m = (np.abs(xx - mx) <= mark.radius) & (np.abs(yy - my) <= mark.radius)
        else:
            m = (xx - mx) ** 2 + (yy - my) ** 2 <= mark.radius**2
        mask |= m & (labels == mark.host_label)
    return torch.from_numpy(mask)


# ---------------------------------------------------------------------------
# real-data loader (VITON-HD directory layout)
# ---------------------------------------------------------------------------

_REQUIRED_DIRS = ("image", "cloth", "image-parse", "openpose-json", "densepose")
_IMG_EXTS = (".png", ".jpg", ".jpeg")


def _find_file(directory: Path, base: str, exts) -> Path | None:
    for ext in exts:
        p = directory / f"{base}{ext}"
        if p.exists():
            return p
    return None


def _load_image_tensor(path: Path, size=None) -> torch.Tensor:
    from PIL import Image

    img = Image.open(path).convert("RGB")
    if size is not None:
        img = img.resize((size[1], size[0]), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return _to_tensor(arr)


def _load_parse_tensor(path: Path, label_map, size=None) -> torch.Tensor:
    from PIL import Image

    img = Image.open(path)
    if img.mode not in ("L", "P", "I"):
        img = img.convert("L")
    if size is not None:
        img = img.resize((size[1], size[0]), Image.NEAREST)
    raw = np.asarray(img, dtype=np.int64)
    if label_map:
        table = {int(k): int(v) for k, v in label_map.items()}
        unknown = sorted(set(np.unique(raw).tolist()) - set(table))
        if unknown:
            raise DataError(f"unknown parse label values {unknown} in {path.name}")
        out = np.zeros_like(raw)
        for src, dst in table.items():
            out[raw == src] = dst
        raw = out
    else:
        unknown = sorted(v for v in np.unique(raw).tolist() if not 0 <= v < NUM_PARSE_LABELS)
        if unknown:
            raise DataError(
                f"unknown parse label values {unknown} in {path.name}; "
                "supply data.parse_label_map to remap them"
            )
    return torch.from_numpy(raw)


def _load_openpose_joints(path: Path, scale_xy=(1.0, 1.0)) -> list[tuple[float, float, int]]:
    data = json.loads(path.read_text())
    people = data.get("people") or []
    if not people:
        return [(0.0, 0.0, 0) for _ in JOINT_NAMES]
    flat = people[0]["pose_keypoints_2d"]
    pts = [(flat[i], flat[i + 1], flat[i + 2]) for i in range(0, len(flat), 3)]
    n = len(pts)
    if n >= 25:
        hip_l, hip_r = 12, 9
    else:
        hip_l, hip_r = 11, 8
    order = [0, 1, 5, 2, 6, 3, 7, 4, hip_l, hip_r]
    sx, sy = scale_xy
    joints = []
    for idx in order:
        if idx < n:
            x, y, c = pts[idx]
            joints.append((float(x) * sx, float(y) * sy, int(c > 0)))
        else:
            joints.append((0.0, 0.0, 0))
    return joints


def load_dataset(root: str | Path, split: str, pairing: str = "paired", *,
                 parse_label_map: dict | None = None,
                 size: tuple[int, int] | None = None,
                 garment_type: str = "upper",
                 unpaired_list: str | Path | None = None) -> list[Sample]:
    """Loads a VITON-HD style split into Samples.

    Paired mode pairs each person with their own garment (gt = the person
    image); unpaired mode reads person->garment lines from `unpaired_list`
    and leaves gt absent. Missing counterpart files are reported together,
    by basename.
    """
    if split not in ("train", "test"):
        raise DataError(f"unknown split '{split}' (expected train or test)")
    if pairing not in ("paired", "unpaired"):
        raise DataError(f"unknown pairing '{pairing}' (expected paired or unpaired)")
    base = Path(root) / split
    missing_dirs = [d for d in _REQUIRED_DIRS if not (base / d).is_dir()]
    if missing_dirs:
        raise DataError(f"dataset root {base} is missing directories: {', '.join(missing_dirs)}")

    image_dir = base / "image"
    names = sorted(
        p.stem for p in image_dir.iterdir() if p.suffix.lower() in _IMG_EXTS
    )
    if pairing == "unpaired":
        if unpaired_list is None:
            raise DataError("unpaired mode requires an unpaired list file")
        pairs = []
        for line in Path(unpaired_list).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 2:
                raise DataError(f"malformed unpaired list line: '{line}'")
            pairs.append((Path(fields[0]).stem, Path(fields[1]).stem))
    else:
        pairs = [(n, n) for n in names]

    problems = []
    resolved = []
    for person_base, cloth_base in pairs:
        entry = {}
        entry["image"] = _find_file(image_dir, person_base, _IMG_EXTS)
        entry["cloth"] = _find_file(base / "cloth", cloth_base, _IMG_EXTS)
        entry["parse"] = _find_file(base / "image-parse", person_base, _IMG_EXTS)
        entry["pose"] = _find_file(base / "openpose-json", person_base, (".json",)) or _find_file(
            base / "openpose-json", f"{person_base}_keypoints", (".json",)
        )
        entry["densepose"] = _find_file(base / "densepose", person_base, _IMG_EXTS)
        absent = [k for k, v in entry.items() if v is None]
        if absent:
            problems.append(f"{person_base}: missing {', '.join(sorted(absent))}")
        else:
            resolved.append((person_base, cloth_base, entry))
    if problems:
        raise DataError("dataset items incomplete: " + "; ".join(problems))

    samples = []
    for person_base, cloth_base, entry in resolved:
        from PIL import Image

        with Image.open(entry["image"]) as im:
            orig_w, orig_h = im.size
        scale = (1.0, 1.0)
        if size is not None:
            scale = (size[1] / orig_w, size[0] / orig_h)
        person = _load_image_tensor(entry["image"], size)
        samples.append(
            Sample(
                person=person,
                garment=_load_image_tensor(entry["cloth"], size),
                parsing=_load_parse_tensor(entry["parse"], parse_label_map, size),
                keypoints=_load_openpose_joints(entry["pose"], scale),
                densepose=_load_image_tensor(entry["densepose"], size),
                gt_tryon=person.clone() if pairing == "paired" else None,
                garment_type=garment_type,
                scene=None,
                name=person_base if pairing == "paired" else f"{person_base}+{cloth_base}",
            )
        )
    return samples
