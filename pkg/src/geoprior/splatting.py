"""Feed-forward Gaussian parameters, a differentiable splat rasterizer, and image metrics.

The rasterizer projects each 3D Gaussian to a 2D footprint with the first-order
(EWA) approximation ``Sigma_2D = J W Sigma W^T J^T``, enumerates the
(gaussian, pixel) pairs inside each footprint's bounding box, sorts them per
pixel by camera depth, and alpha-composites front to back. Transmittance is
``exp`` of an exclusive per-pixel cumulative sum of ``log(1 - alpha)``, so the
whole chain is made of differentiable primitives.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel
from .diffcore import DimensionError, ResNetFC, Tensor
from .diffcore import tensor as T
from .diffcore.tensor import _make
from .volumetric import DenseVolume, cell_edges, sample_trilinear

HEAD_WIDTH = 11
ALPHA_MAX = 0.99
PSNR_INF = float("inf")


@dataclass
class GaussianSet:
    mu: Tensor  # (N, 3)
    color: Tensor  # (N, 3)
    opacity: Tensor  # (N, 1)
    rotation: Tensor  # (N, 4) unit quaternions (w, x, y, z)
    scale: Tensor  # (N, 3)

    def __len__(self):
        return self.mu.shape[0]

    @classmethod
    def from_arrays(cls, mu, color, opacity, rotation, scale, requires_grad=False):
        mk = lambda a: Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)
        return cls(mk(mu), mk(color), mk(np.reshape(opacity, (-1, 1))), mk(rotation), mk(scale))

    def select(self, idx):
        return GaussianSet(*(T.take_rows(t, idx) for t in
                             (self.mu, self.color, self.opacity, self.rotation, self.scale)))


@dataclass
class RenderTarget:
    width: int
    height: int
    background: tuple = (0.0, 0.0, 0.0)
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or not self.near < self.far:
            raise ValueError("invalid render target")


@dataclass
class RenderResult:
    image: Tensor  # (H, W, 3)
    alpha: Tensor  # (H, W)
    stats: dict = field(default_factory=dict)


def default_scale_base(bounds, resolution):
    return 2.0 * float(np.mean(cell_edges(bounds, resolution)))


class GaussianHead:
    def __init__(self, store, channels, hidden=64, blocks=2, scale_base=0.1, name="gauss",
                 scale_bias=-1.5):
        self.net = ResNetFC(store, name, channels, HEAD_WIDTH, hidden, blocks)
        self.net.proj_out.b.data[8:11] = scale_bias  # start with footprints well below s_base
        self.scale_base = scale_base


def gaussian_head(features, head: GaussianHead):
    """Split and activate the 11 head outputs into (color, opacity, rotation, scale)."""
    raw = head.net(features)
    if raw.shape[1] != HEAD_WIDTH:
        raise DimensionError("gaussian head must output 11 values per point")
    return activate_head_outputs(raw, head.scale_base)


def activate_head_outputs(raw, scale_base):
    c = T.sigmoid(raw[:, 0:3])
    sigma = T.sigmoid(raw[:, 3:4])
    q = raw[:, 4:8] + np.array([1.0, 0.0, 0.0, 0.0])
    r = q / T.sqrt(T.tsum(T.square(q), axis=1, keepdims=True) + 1e-24)
    s = T.exp(T.clip(raw[:, 8:11], -4.0, 4.0)) * scale_base
    return c, sigma, r, s


def gaussians_from_points(points, volume: DenseVolume, head: GaussianHead, counter=None):
    feats = sample_trilinear(volume, points, counter)
    c, sigma, r, s = gaussian_head(feats, head)
    return GaussianSet(T.as_tensor(points), c, sigma, r, s)


def _rotation_entries(q):
    w, x, y, z = (q[:, i] for i in range(4))
    return [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]


def project_covariance(g: GaussianSet, cam: CameraModel, dilation=0.0):
    """Camera-space depth, pixel means and 2D covariance entries for every Gaussian."""
    pc = (g.mu - cam.T) @ cam.R  # world -> camera, (N, 3)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    u = x / z * cam.fx + cam.cx
    v = y / z * cam.fy + cam.cy
    Rq = _rotation_entries(g.rotation)
    s = g.scale
    M = T.stack([T.stack([Rq[i][j] * s[:, j] for j in range(3)], axis=1) for i in range(3)], axis=1)
    iz = 1.0 / z
    zero = z * 0.0
    J = T.stack([T.stack([iz * cam.fx, zero, -x * iz * iz * cam.fx], axis=1),
                 T.stack([zero, iz * cam.fy, -y * iz * iz * cam.fy], axis=1)], axis=1)  # (N, 2, 3)
    A = J @ (cam.R.T @ M)
    S2 = A @ T.swapaxes(A, 1, 2)
    return z, u, v, S2[:, 0, 0] + dilation, S2[:, 0, 1], S2[:, 1, 1] + dilation


def _eig2(a, b, c):
    mid = 0.5 * (a + c)
    rad = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    return mid - rad, mid + rad


def rasterize(g: GaussianSet, camera: CameraModel, target: RenderTarget | None = None,
              cutoff_sigma=3.0, dilation=0.0, max_condition=1e12):
    """Render (H, W, 3) colour and (H, W) alpha; ``cutoff_sigma=None`` touches every pixel."""
    if target is None:
        target = RenderTarget(camera.width, camera.height)
    if (target.width, target.height) != (camera.width, camera.height):
        camera = camera.scaled(target.width, target.height)
    H, W = target.height, target.width
    HW = H * W
    bg = np.asarray(target.background, dtype=np.float64)
    stats = {"gaussians": len(g), "visible": 0, "degenerate": 0, "pairs": 0}

    def background_only():
        img = Tensor(np.broadcast_to(bg, (H, W, 3)).copy())
        return RenderResult(img, Tensor(np.zeros((H, W))), stats)

    if len(g) == 0:
        return background_only()
    zc = g.mu.data @ camera.R[:, 2] - camera.T @ camera.R[:, 2]
    vis = np.nonzero((zc > target.near) & (zc < target.far))[0]
    if len(vis) == 0:
        return background_only()
    sub = g.select(vis)
    z, u, v, a, b, c = project_covariance(sub, camera, 0.0)
    lo, hi = _eig2(a.data, b.data, c.data)
    ok = (lo > 0) & (hi <= max_condition * np.maximum(lo, 1e-300))
    stats["degenerate"] = int((~ok).sum())
    a, c = a + dilation, c + dilation
    keep = np.nonzero(ok)[0]
    stats["visible"] = int(len(keep))
    if len(keep) == 0:
        return background_only()
    z, u, v, a, b, c = (T.take_rows(t, keep) for t in (z, u, v, a, b, c))
    opac = T.take_rows(sub.opacity, keep)[:, 0]
    color = T.take_rows(sub.color, keep)
    order_key = vis[keep]  # original Gaussian index, the depth tie-breaker

    ud, vd = u.data, v.data
    if cutoff_sigma is None:
        u0 = np.zeros(len(keep), dtype=np.intp)
        v0 = np.zeros(len(keep), dtype=np.intp)
        nu = np.full(len(keep), W)
        nv = np.full(len(keep), H)
    else:
        rad = cutoff_sigma * np.sqrt(_eig2(a.data, b.data, c.data)[1])
        u0 = np.clip(np.ceil(ud - rad), 0, W).astype(np.intp)
        u1 = np.clip(np.floor(ud + rad), -1, W - 1).astype(np.intp)
        v0 = np.clip(np.ceil(vd - rad), 0, H).astype(np.intp)
        v1 = np.clip(np.floor(vd + rad), -1, H - 1).astype(np.intp)
        nu = np.maximum(u1 - u0 + 1, 0)
        nv = np.maximum(v1 - v0 + 1, 0)
    counts = nu * nv
    total = int(counts.sum())
    if total == 0:
        return background_only()
    gi = np.repeat(np.arange(len(keep)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    pu = u0[gi] + local % nu[gi]
    pv = v0[gi] + local // nu[gi]
    det = a.data * c.data - b.data ** 2
    if cutoff_sigma is not None:
        du0, dv0 = pu - ud[gi], pv - vd[gi]
        maha = (c.data[gi] * du0 ** 2 - 2 * b.data[gi] * du0 * dv0 + a.data[gi] * dv0 ** 2) / det[gi]
        inside = maha <= cutoff_sigma ** 2
        gi, pu, pv = gi[inside], pu[inside], pv[inside]
    pix = pv * W + pu
    order = np.lexsort((order_key[gi], z.data[gi], pix))
    gi, pu, pv, pix = gi[order], pu[order], pv[order], pix[order]
    stats["pairs"] = int(len(gi))

    inv_det = 1.0 / (a * c - b * b)
    ca, cb, cc = c * inv_det, -b * inv_det, a * inv_det  # conic (inverse covariance)
    du = -T.take_rows(u, gi) + pu.astype(np.float64)
    dv = -T.take_rows(v, gi) + pv.astype(np.float64)
    power = (T.take_rows(ca, gi) * du * du + T.take_rows(cb, gi) * du * dv * 2.0
             + T.take_rows(cc, gi) * dv * dv) * -0.5
    alpha = T.clip(T.take_rows(opac, gi) * T.exp(power), None, ALPHA_MAX)
    logt = T.log(1.0 - alpha)
    trans = T.exp(T.segment_exclusive_cumsum(logt, pix))
    weight = alpha * trans
    rgb = T.segment_sum(T.reshape(weight, (-1, 1)) * T.take_rows(color, gi), pix, HW)
    t_final = T.exp(T.segment_sum(logt, pix, HW))
    img = rgb + T.reshape(t_final, (HW, 1)) * bg
    return RenderResult(T.reshape(img, (H, W, 3)), T.reshape(1.0 - t_final, (H, W)), stats)


# losses / metrics --------------------------------------------------------------

def abs_pow(x, p):
    """``|x| ** p`` for p >= 2 with the smooth gradient ``p |x|^(p-1) sign(x)``."""
    ax = np.abs(x.data)
    return _make(ax ** p, (x,), lambda g: (g * p * ax ** (p - 1) * np.sign(x.data),))


def focal_render_loss(pred, gt, gamma=1.0):
    """Mean of ``|e|^gamma * e^2`` with ``e = pred - gt``; gamma = 0 is exactly MSE."""
    pred = T.as_tensor(pred)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    e = pred - gt
    return T.mean(T.square(e) if gamma == 0 else abs_pow(e, gamma + 2.0))


def psnr(pred, gt):
    mse = float(np.mean((np.asarray(pred) - np.asarray(gt)) ** 2))
    return PSNR_INF if mse == 0 else 10.0 * np.log10(1.0 / mse)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-x ** 2 / (2 * sigma ** 2))
    return k / k.sum()


def _filter_valid(img, k):
    n = len(k)
    w = np.lib.stride_tricks.sliding_window_view(img, n, axis=1) @ k
    return np.lib.stride_tricks.sliding_window_view(w, n, axis=0) @ k


def ssim(pred, gt, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM over channels and valid window positions (Gaussian window, no padding)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError("ssim inputs differ in shape")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    k = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for ch in range(pred.shape[-1]):
        x, y = pred[..., ch], gt[..., ch]
        mx, my = _filter_valid(x, k), _filter_valid(y, k)
        sxx = _filter_valid(x * x, k) - mx * mx
        syy = _filter_valid(y * y, k) - my * my
        sxy = _filter_valid(x * y, k) - mx * my
        m = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(m.mean())
    return float(np.mean(vals))


def image_metrics(pred, gt):
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt)
    if pred.shape != gt.shape:
        raise DimensionError("image shapes differ")
    return {"psnr": psnr(pred, gt), "ssim": ssim(pred, gt)}
