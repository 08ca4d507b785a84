"""World-fixed patch projection, homography estimation, warping, compositing.

The chain mirrors the observation-modification procedure of the attack:

1. project the patch rectangle's world corners into the agent-centric view
   (same camera as the renderer);
2. estimate the homography from the patch's unit square to that view quad;
3. inverse-warp a ones mask and the patch image into frame coordinates
   with bilinear sampling (zero outside the patch footprint);
4. composite ``o_m = o * (1 - mask) + mask * warped_patch`` and clip to
   [0, 1].

Continuous pixel coordinates are corner-origin: the center of array cell
(row j, col i) is at (i + 0.5, j + 0.5).  Warping is linear in the source
pixel values with fixed sampling weights, so gradients w.r.t. the patch
are exact; the quad geometry is treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import sim

PATCH_W = 25  # native patch width in pixels
PATCH_H = 30  # native patch height in pixels


@dataclass(frozen=True)
class PatchPlacement:
    """Four world-space corners of the patch rectangle, ordered
    (top-left, top-right, bottom-right, bottom-left) in patch-local
    convention."""

    corners: np.ndarray  # (4, 2) meters

    def __post_init__(self):
        c = np.asarray(self.corners, dtype=np.float64).reshape(4, 2)
        object.__setattr__(self, "corners", c)
        if abs(_shoelace_area(c)) < 1e-9:
            raise ValueError("patch placement corners are degenerate (zero area)")
        if not _is_convex(c):
            raise ValueError("patch placement corners must form a convex quad")

    @staticmethod
    def flat_rect(center, width_m: float, height_m: float, yaw: float = 0.0
                  ) -> "PatchPlacement":
        """Axis-aligned-in-yaw ground rectangle centered at ``center``.

        ``width_m`` spans the patch's horizontal (pw) axis, ``height_m``
        its vertical (ph) axis.
        """
        cx, cy = float(center[0]), float(center[1])
        u = 0.5 * width_m * np.array([np.cos(yaw), np.sin(yaw)])
        v = 0.5 * height_m * np.array([-np.sin(yaw), np.cos(yaw)])
        c = np.array([cx, cy])
        return PatchPlacement(
            corners=np.stack([c - u - v, c + u - v, c + u + v, c - u + v])
        )

    def translated(self, dx: float, dy: float) -> "PatchPlacement":
        return PatchPlacement(corners=self.corners + np.array([dx, dy]))


@dataclass(frozen=True)
class ViewQuad:
    """Patch corners in image space (pixels, float); may lie off-frame."""

    points: np.ndarray  # (4, 2)

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(4, 2)
        object.__setattr__(self, "points", p)
        if not np.isfinite(p).all():
            raise ValueError("view quad has non-finite coordinates")


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, normalized so H[2,2] == 1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        object.__setattr__(self, "matrix", m)
        if abs(np.linalg.det(m)) <= 1e-9:
            raise ValueError("homography is singular")

    def apply(self, points):
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        hom = np.concatenate([p, np.ones((len(p), 1))], axis=1)
        out = hom @ self.matrix.T
        return out[:, :2] / out[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def compose(self, other: "Homography") -> "Homography":
        """self after other: maps x -> self(other(x))."""
        return Homography(self.matrix @ other.matrix)


UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def project_placement(state: sim.AgentState, placement: PatchPlacement,
                      w: int = sim.FRAME_W, h: int = sim.FRAME_H,
                      scale: float = sim.SCALE) -> ViewQuad:
    """Project the patch's world corners into the agent-centric view."""
    return ViewQuad(points=sim.world_to_pixel(state, placement.corners, w, h, scale))


def estimate_homography(src, dst) -> Homography:
    """Solve the 4-point direct linear system mapping src -> dst exactly.

    Each correspondence (x, y) -> (X, Y) contributes two rows of the
    8-unknown system (H[2,2] is fixed at 1).  Raises on degenerate input
    (three collinear corners make the system singular).
    """
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (xx, yy)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -xx * x, -xx * y]
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -yy * x, -yy * y]
        b[2 * i] = xx
        b[2 * i + 1] = yy
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"degenerate correspondences: {exc}") from exc
    return Homography(np.append(h, 1.0).reshape(3, 3))


def quad_homography(quad: ViewQuad, pw: int = PATCH_W, ph: int = PATCH_H
                    ) -> Homography:
    """Homography taking patch pixel coordinates to view pixel coordinates.

    Estimated from the unit square (per-corner correspondence with the
    quad) and composed with the patch's pixel-to-unit normalization.
    """
    h_unit = estimate_homography(UNIT_SQUARE, quad.points)
    norm = Homography(np.diag([1.0 / pw, 1.0 / ph, 1.0]))
    return h_unit.compose(norm)


def _bilinear_taps(hmg: Homography, src_size, out_size):
    """Sampling indices/weights for the inverse warp (pure geometry)."""
    sh, sw = src_size
    oh, ow = out_size
    inv = np.linalg.inv(hmg.matrix)
    gx, gy = np.meshgrid(
        np.arange(ow, dtype=np.float64) + 0.5,
        np.arange(oh, dtype=np.float64) + 0.5,
    )
    denom = inv[2, 0] * gx + inv[2, 1] * gy + inv[2, 2]
    # Orientation-preserving only; the ground-plane quads used here keep
    # denom > 0 everywhere in frame.
    ok = denom > 1e-9
    safe = np.where(ok, denom, 1.0)
    sx = (inv[0, 0] * gx + inv[0, 1] * gy + inv[0, 2]) / safe
    sy = (inv[1, 0] * gx + inv[1, 1] * gy + inv[1, 2]) / safe
    inside = ok & (sx >= 0.0) & (sx <= sw) & (sy >= 0.0) & (sy <= sh)

    fx = sx - 0.5
    fy = sy - 0.5
    x0 = np.floor(fx)
    y0 = np.floor(fy)
    wx = fx - x0
    wy = fy - y0

    taps_x = np.stack([x0, x0 + 1, x0, x0 + 1], axis=-1).astype(np.int64)
    taps_y = np.stack([y0, y0, y0 + 1, y0 + 1], axis=-1).astype(np.int64)
    weights = np.stack(
        [(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy], axis=-1
    )
    valid = (
        inside[..., None]
        & (taps_x >= 0)
        & (taps_x < sw)
        & (taps_y >= 0)
        & (taps_y < sh)
    )
    weights = np.where(valid, weights, 0.0).reshape(-1, 4).astype(np.float32)
    flat_idx = (
        np.clip(taps_y, 0, sh - 1) * sw + np.clip(taps_x, 0, sw - 1)
    ).reshape(-1, 4)
    return flat_idx, weights


def warp(source, hmg: Homography, out_size):
    """Inverse-map ``source`` through ``hmg`` onto an (h, w) output grid.

    ``hmg`` maps source pixel coordinates to output pixel coordinates.
    Samples outside the source rectangle contribute zero.  Tensor sources
    stay on the autodiff tape; plain arrays return a plain array.
    """
    is_tensor = isinstance(source, ad.Tensor)
    src_arr = source.data if is_tensor else np.asarray(source, dtype=np.float32)
    if src_arr.ndim != 2:
        raise ValueError("warp expects a 2-D source image")
    idx, wts = _bilinear_taps(hmg, src_arr.shape, out_size)
    if is_tensor:
        return ad.weighted_gather(source, idx, wts, tuple(out_size))
    return (src_arr.reshape(-1)[idx] * wts).sum(axis=1).reshape(out_size)


def warp_mask(hmg: Homography, patch_size, out_size):
    """The warped all-ones mask: 1 strictly inside the quad, 0 outside."""
    return warp(np.ones(patch_size, dtype=np.float32), hmg, out_size)


def composite(frame, mask, warped_patch):
    """Blend the warped patch into the frame and clip to [0, 1].

    ``o_m = frame * (1 - mask) + mask * warped_patch``; only the patch
    path needs gradients, so ``frame`` and ``mask`` may be plain arrays.
    """
    frame_t = frame if isinstance(frame, ad.Tensor) else ad.tensor(frame)
    mask_t = mask if isinstance(mask, ad.Tensor) else ad.tensor(mask)
    patch_t = (
        warped_patch if isinstance(warped_patch, ad.Tensor) else ad.tensor(warped_patch)
    )
    if frame_t.shape != mask_t.shape or frame_t.shape != patch_t.shape:
        raise ValueError(
            f"composite: shape mismatch {frame_t.shape}/{mask_t.shape}/"
            f"{patch_t.shape}"
        )
    keep = ad.mul(frame_t, ad.sub(ad.tensor(1.0), mask_t))
    put = ad.mul(mask_t, patch_t)
    return ad.clip(ad.add(keep, put), 0.0, 1.0)


def composite_frame(frame, state: sim.AgentState, placement: PatchPlacement,
                    patch, w: int = sim.FRAME_W, h: int = sim.FRAME_H,
                    scale: float = sim.SCALE):
    """Full chain for one frame: project, estimate, warp, composite."""
    quad = project_placement(state, placement, w, h, scale)
    patch_arr = patch.data if isinstance(patch, ad.Tensor) else np.asarray(patch)
    ph, pw = patch_arr.shape
    hmg = quad_homography(quad, pw, ph)
    mask = warp_mask(hmg, (ph, pw), (h, w))
    warped = warp(patch, hmg, (h, w))
    return composite(frame, mask, warped), mask


def _shoelace_area(c):
    x, y = c[:, 0], c[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def _is_convex(c):
    signs = []
    for i in range(4):
        a = c[(i + 1) % 4] - c[i]
        b = c[(i + 2) % 4] - c[(i + 1) % 4]
        signs.append(np.sign(a[0] * b[1] - a[1] * b[0]))
    signs = [s for s in signs if s != 0]
    return len(signs) == 4 and all(s == signs[0] for s in signs)


# ---------------------------------------------------------------------------
# Patch image persistence (PGM with an affine value mapping; the mapping
# parameters are recorded in the run manifest, since PGM has no metadata).


def patch_to_pgm_array(values, eps: float):
    """Map patch values in [-eps, eps] onto [0, 1] for PGM export."""
    v = np.asarray(values, dtype=np.float64)
    return (v / eps + 1.0) / 2.0


def pgm_array_to_patch(gray_u8, maxval: int, eps: float):
    """Invert :func:`patch_to_pgm_array` from 8-bit PGM data."""
    g = np.asarray(gray_u8, dtype=np.float64) / maxval
    return ((g * 2.0) - 1.0) * np.float64(eps)
