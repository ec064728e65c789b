"""View synthesis and the self-supervised loss terms.

All image-like inputs are ``(H, W)`` or ``(B, H, W)`` float tensors (numpy arrays are
accepted and converted to float64). Functions are differentiable with torch autograd.
"""

from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import CameraIntrinsics, Pose3

MIN_DEPTH = 0.1
BORDER_TOL = 1e-6


class PhotometricError(ValueError):
    pass


class DimensionMismatch(PhotometricError):
    pass


class NoSources(PhotometricError):
    pass


class ZeroMeanDisparity(PhotometricError):
    pass


class NonFinite(PhotometricError):
    pass


@dataclass(frozen=True)
class LossWeights:
    smoothness: float = 0.001
    velocity: float = 0.05
    alpha: float = 0.85
    c1: float = 0.01**2
    c2: float = 0.03**2

    def __post_init__(self):
        if self.smoothness < 0 or self.velocity < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM constants must be positive")


class BranchLog:
    """Discrete choices made while evaluating a loss, in call order.

    Evaluate once under ``branch_log(log)`` to record, then under
    ``branch_log(log.replay())`` to re-evaluate at nearby parameters with the same
    masks, minima, sampling cells and signs. That replayed function is the smooth
    piece of the loss whose gradient autograd returns, which makes it the right
    target for finite-difference checks.
    """

    def __init__(self):
        self.choices: list[torch.Tensor] = []
        self.replaying = False
        self._pos = 0

    def replay(self) -> BranchLog:
        self.replaying = True
        self._pos = 0
        return self

    def choose(self, value: torch.Tensor) -> torch.Tensor:
        if not self.replaying:
            self.choices.append(value.detach().clone())
            return value
        if self._pos >= len(self.choices):
            raise RuntimeError("replayed evaluation makes more choices than were recorded")
        out = self.choices[self._pos]
        self._pos += 1
        if out.shape != value.shape:
            raise RuntimeError(f"recorded choice has shape {tuple(out.shape)}, replay asks for {tuple(value.shape)}")
        return out


_ACTIVE_LOG: ContextVar[BranchLog | None] = ContextVar("branch_log", default=None)


@contextmanager
def branch_log(log: BranchLog) -> Iterator[BranchLog]:
    token = _ACTIVE_LOG.set(log)
    try:
        yield log
    finally:
        _ACTIVE_LOG.reset(token)


def _choose(value: torch.Tensor) -> torch.Tensor:
    log = _ACTIVE_LOG.get()
    return value if log is None else log.choose(value)


def _abs(x: torch.Tensor) -> torch.Tensor:
    if _ACTIVE_LOG.get() is None:
        return x.abs()
    return x * _choose(torch.sign(x.detach()))


def _clamp(x: torch.Tensor, lo: float, hi: float) -> torch.Tensor:
    if _ACTIVE_LOG.get() is None:
        return x.clamp(lo, hi)
    below = _choose(x.detach() < lo)
    above = _choose(x.detach() > hi)
    return torch.where(below, torch.full_like(x, lo), torch.where(above, torch.full_like(x, hi), x))


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.double()
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _batched(x) -> tuple[torch.Tensor, bool]:
    x = as_tensor(x)
    if x.dim() == 2:
        return x[None], True
    if x.dim() != 3:
        raise DimensionMismatch(f"expected (H, W) or (B, H, W), got shape {tuple(x.shape)}")
    return x, False


def _check_same(*arrays: torch.Tensor) -> None:
    shapes = {tuple(a.shape[-2:]) for a in arrays}
    if len(shapes) != 1:
        raise DimensionMismatch(f"image dimensions disagree: {sorted(shapes)}")


def _pose_matrices(pose, batch: int) -> torch.Tensor:
    if isinstance(pose, Pose3):
        T = torch.as_tensor(pose.matrix())
    else:
        T = as_tensor(pose)
    if T.dim() == 2:
        T = T.expand(batch, 4, 4)
    return T


def pixel_grid(height: int, width: int) -> tuple[torch.Tensor, torch.Tensor]:
    v, u = torch.meshgrid(
        torch.arange(height, dtype=torch.float64), torch.arange(width, dtype=torch.float64), indexing="ij"
    )
    return u, v


def bilinear_sample(image: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample ``(B, H, W)`` images at float coordinates with clamping.

    Returns the sampled values and a mask that is False wherever the requested
    coordinate fell outside the image.
    """
    B, H, W = image.shape
    inside = _choose((x >= -BORDER_TOL) & (x <= W - 1 + BORDER_TOL) & (y >= -BORDER_TOL) & (y <= H - 1 + BORDER_TOL))
    xc = _clamp(x, 0.0, W - 1.0)
    yc = _clamp(y, 0.0, H - 1.0)
    x0 = _choose(torch.floor(xc).detach())
    y0 = _choose(torch.floor(yc).detach())
    wx = xc - x0
    wy = yc - y0
    x0i = x0.long()
    y0i = y0.long()
    x1i = (x0i + 1).clamp(max=W - 1)
    y1i = (y0i + 1).clamp(max=H - 1)
    flat = image.reshape(B, -1)

    def gather(yi, xi):
        return torch.gather(flat, 1, (yi * W + xi).reshape(B, -1)).reshape(yi.shape)

    top = gather(y0i, x0i) * (1 - wx) + gather(y0i, x1i) * wx
    bottom = gather(y1i, x0i) * (1 - wx) + gather(y1i, x1i) * wx
    return top * (1 - wy) + bottom * wy, inside


def warp_image(source, depth, target_to_source, K: CameraIntrinsics) -> tuple[torch.Tensor, torch.Tensor]:
    """Reconstruct the target view by sampling ``source``.

    ``depth`` is the target-frame depth in meters and ``target_to_source`` maps
    target camera coordinates into the source camera (4x4, batched, or Pose3).
    """
    src, squeeze = _batched(source)
    dep, _ = _batched(depth)
    _check_same(src, dep)
    B, H, W = src.shape
    if dep.shape[0] != B:
        raise DimensionMismatch("source and depth batch sizes differ")
    if (H, W) != (K.height, K.width):
        raise DimensionMismatch(f"image is {H}x{W}, camera expects {K.height}x{K.width}")
    T = _pose_matrices(target_to_source, B)
    if not (torch.isfinite(T).all() and torch.isfinite(dep).all()):
        raise NonFinite("motion or depth is not finite")
    u, v = pixel_grid(H, W)
    # work on the unit-depth ray and add t / depth, then move pixels by the change in
    # normalized coordinates; identity motion then leaves u, v bit-exact
    xn = (u - K.cx) / K.fx
    yn = (v - K.cy) / K.fy
    inv_dep = 1.0 / dep
    R = T[:, :3, :3, None, None]
    t = T[:, :3, 3, None, None]
    Xs = R[:, 0, 0] * xn + R[:, 0, 1] * yn + R[:, 0, 2] + t[:, 0] * inv_dep
    Ys = R[:, 1, 0] * xn + R[:, 1, 1] * yn + R[:, 1, 2] + t[:, 1] * inv_dep
    Zs = R[:, 2, 0] * xn + R[:, 2, 1] * yn + R[:, 2, 2] + t[:, 2] * inv_dep
    front = _choose(Zs * dep > 1e-6)
    Zsafe = torch.where(front, Zs, torch.ones_like(Zs))
    xs = u + K.fx * (Xs / Zsafe - xn)
    ys = v + K.fy * (Ys / Zsafe - yn)
    warped, inside = bilinear_sample(src, xs, ys)
    mask = inside & front
    if squeeze:
        return warped[0], mask[0]
    return warped, mask


def _patches3(x: torch.Tensor) -> torch.Tensor:
    """(B, H, W) -> (B, 9, H, W) reflection-padded 3x3 neighbourhoods."""
    B, H, W = x.shape
    return F.unfold(F.pad(x[:, None], (1, 1, 1, 1), mode="reflect"), 3).reshape(B, 9, H, W)


def ssim(a, b, c1: float = 0.01**2, c2: float = 0.03**2) -> torch.Tensor:
    """Per-pixel SSIM with a 3x3 box window and reflection padding."""
    x, squeeze = _batched(a)
    y, _ = _batched(b)
    if x.shape != y.shape:
        raise DimensionMismatch(f"{tuple(x.shape)} vs {tuple(y.shape)}")
    px, py = _patches3(x), _patches3(y)
    mu_x = px.mean(1)
    mu_y = py.mean(1)
    # centred second moments; E[x^2] - mu^2 cancels badly on flat patches
    dx = px - mu_x[:, None]
    dy = py - mu_y[:, None]
    sigma_x = (dx * dx).mean(1)
    sigma_y = (dy * dy).mean(1)
    sigma_xy = (dx * dy).mean(1)
    num = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    out = num / den
    return out[0] if squeeze else out


def photometric_dissimilarity(image, reconstructed, alpha: float = 0.85, c1: float = 0.01**2, c2: float = 0.03**2) -> torch.Tensor:
    x = as_tensor(image)
    y = as_tensor(reconstructed)
    if x.shape != y.shape:
        raise DimensionMismatch(f"{tuple(x.shape)} vs {tuple(y.shape)}")
    structural = _clamp((1 - ssim(x, y, c1, c2)) / 2, 0.0, 1.0)
    return alpha * structural + (1 - alpha) * _abs(x - y)


def _pixelwise_min(errors: Sequence[torch.Tensor]) -> torch.Tensor:
    # first source wins ties
    best = errors[0]
    for e in errors[1:]:
        best = torch.where(_choose(e < best), e, best)
    return best


def reprojection_loss(
    target,
    sources: Sequence,
    warped: Sequence,
    alpha: float = 0.85,
    valid: Sequence | None = None,
    c1: float = 0.01**2,
    c2: float = 0.03**2,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Auto-masked minimum reprojection loss.

    Returns ``(loss, mask)``. For batched input the loss is one value per image.
    Warped pixels flagged invalid in ``valid`` never win the per-pixel minimum.
    """
    if len(sources) == 0 or len(warped) == 0:
        raise NoSources("at least one source view is required")
    if len(sources) != len(warped):
        raise PhotometricError("sources and warped views must pair up")
    tgt, squeeze = _batched(target)
    srcs = [_batched(s)[0] for s in sources]
    wrps = [_batched(w)[0] for w in warped]
    _check_same(tgt, *srcs, *wrps)
    warped_err = [photometric_dissimilarity(tgt, w, alpha, c1, c2) for w in wrps]
    if valid is not None:
        inf = torch.tensor(float("inf"), dtype=torch.float64)
        warped_err = [torch.where(_batched(m)[0].bool(), e, inf) for e, m in zip(warped_err, valid)]
    identity_err = [photometric_dissimilarity(tgt, s, alpha, c1, c2) for s in srcs]
    per_pixel = _pixelwise_min(warped_err)
    mask = _choose(per_pixel < _pixelwise_min(identity_err).detach())
    count = mask.sum(dim=(-2, -1))
    masked = torch.where(mask, per_pixel, torch.zeros_like(per_pixel))
    loss = masked.sum(dim=(-2, -1)) / count.clamp(min=1)
    if squeeze:
        return loss[0], mask[0]
    return loss, mask


def smoothness_loss(disparity, image) -> torch.Tensor:
    """Edge-aware smoothness of mean-normalized disparity (one value per image)."""
    s, squeeze = _batched(disparity)
    img, _ = _batched(image)
    if s.shape != img.shape:
        raise DimensionMismatch(f"{tuple(s.shape)} vs {tuple(img.shape)}")
    mean = s.mean(dim=(-2, -1), keepdim=True)
    if torch.any(mean == 0):
        raise ZeroMeanDisparity("disparity map has zero mean")
    s = s / mean
    dsx = _abs(s[..., :, 1:] - s[..., :, :-1])
    dsy = _abs(s[..., 1:, :] - s[..., :-1, :])
    dix = (img[..., :, 1:] - img[..., :, :-1]).abs()
    diy = (img[..., 1:, :] - img[..., :-1, :]).abs()
    loss = (dsx * torch.exp(-dix)).mean(dim=(-2, -1)) + (dsy * torch.exp(-diy)).mean(dim=(-2, -1))
    return loss[0] if squeeze else loss


def translation_norm(T: torch.Tensor) -> torch.Tensor:
    t = T[..., :3, 3]
    return torch.sqrt((t * t).sum(-1) + 1e-24)


def velocity_loss(translations: Sequence, speeds: Sequence, durations: Sequence) -> torch.Tensor:
    """Sum over source frames of | ||T|| - |v| * dt |.

    ``translations`` holds predicted relative poses (Pose3, 4x4 tensors, or plain
    translation vectors); leading batch dimensions are preserved.
    """
    total = None
    for T, v, dt in zip(translations, speeds, durations, strict=True):
        if isinstance(T, Pose3):
            norm = torch.as_tensor(float(np.linalg.norm(T.translation)))
        else:
            T = as_tensor(T)
            if T.shape[-2:] == (4, 4):
                norm = translation_norm(T)
            else:
                norm = torch.linalg.vector_norm(T, dim=-1)
        term = _abs(norm - as_tensor(v).abs() * as_tensor(dt))
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=torch.float64)
    return total


def total_loss(reprojection, smoothness, velocity, weights: LossWeights = LossWeights()) -> torch.Tensor:
    parts = [as_tensor(p) for p in (reprojection, smoothness, velocity)]
    for p in parts:
        if not torch.all(torch.isfinite(p.detach())):
            raise NonFinite("loss part is not finite")
    return parts[0] + weights.smoothness * parts[1] + weights.velocity * parts[2]


@dataclass(frozen=True, eq=False)
class ImageTriplet:
    """Frames I_{t-2}, I_{t-1}, I_t with the speed readings between them."""

    frames: tuple
    velocities: tuple
    timestamps: tuple
    env_id: str = ""
    scene_id: str = ""
    frame_index: int = 0

    def __post_init__(self):
        if len(self.frames) != 3 or len(self.velocities) != 2 or len(self.timestamps) != 3:
            raise ValueError("a triplet has 3 frames, 2 velocities and 3 timestamps")
        t0, t1, t2 = self.timestamps
        if not (t0 < t1 < t2):
            raise ValueError("triplet timestamps must be strictly increasing")
        if min(self.velocities) < 0:
            raise ValueError("velocities must be nonnegative")
        shapes = {np.shape(f) for f in self.frames}
        if len(shapes) != 1:
            raise DimensionMismatch(f"triplet frames differ in shape: {shapes}")

    def distances(self) -> tuple[float, float]:
        t0, t1, t2 = self.timestamps
        v0, v1 = self.velocities
        return (abs(v0) * (t1 - t0), abs(v1) * (t2 - t1))
