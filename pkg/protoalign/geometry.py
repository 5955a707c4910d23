"""
3D geometry kernels: volumes, affine transforms and grid resampling.

Coordinates are normalized per axis to [-1, 1] (first voxel -> -1, last voxel -> +1), so a
single transform applies to an image, its masks and a feature map of any resolution.

An AffineTransform maps a point of the input (moving) space to the output space,
``q = A x + b``. Warping is backward: every output voxel pulls the input value at
``A^-1 (q - b)``, and samples falling outside the input are 0 unless border padding is asked for.
"""
import functools
import math
from dataclasses import dataclass
from typing import Sequence, TypeVar, overload

import numpy as np
import torch
import torch.nn.functional as F

from protoalign.errors import ShapeMismatch, SingularTransform

DET_EPS = 1e-8
INTERPOLATIONS = {"trilinear": "bilinear", "nearest": "nearest"}
# trilinear weight above which a resampled hard mask voxel stays inside
MASK_THRESHOLD = 0.5
PADDINGS = {"zeros", "border"}


@dataclass(frozen=True, eq=False)
class Volume:
    """3D scalar image (W, H, D) with voxel spacing in mm"""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        assert self.data.ndim == 3, f"volume must be 3D, got shape {self.data.shape}"
        assert min(self.data.shape) >= 1, "volume dims must be >= 1"
        assert all(s > 0 for s in self.spacing), "spacing must be positive"
        assert np.isfinite(self.data).all(), "volume holds non-finite values"

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class MaskVolume:
    """Voxel weights in [0, 1]; restricted to {0, 1} when hard"""

    data: np.ndarray
    hard: bool = True

    def __post_init__(self) -> None:
        assert self.data.ndim == 3, f"mask must be 3D, got shape {self.data.shape}"
        assert self.data.min() >= 0 and self.data.max() <= 1, "mask values outside [0, 1]"
        if self.hard:
            assert np.isin(self.data, (0, 1)).all(), "hard mask holds values other than 0/1"

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Encoder output of shape (C_f, W, H, D)"""

    data: torch.Tensor

    def __post_init__(self) -> None:
        assert self.data.dim() == 4, f"feature map must be (C, W, H, D), got {tuple(self.data.shape)}"
        assert self.data.shape[0] >= 1, "feature map needs at least one channel"

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """Invertible 3D affine map in normalized grid coordinates"""

    matrix: torch.Tensor
    translation: torch.Tensor

    def __post_init__(self) -> None:
        assert tuple(self.matrix.shape) == (3, 3), "linear part must be 3x3"
        assert tuple(self.translation.shape) == (3,), "translation must be a 3-vector"
        det = self.determinant()
        if not abs(det) > DET_EPS:
            raise SingularTransform(f"|det| = {abs(det):.3g} <= {DET_EPS}")

    @classmethod
    def identity(cls, dtype: torch.dtype = torch.float64) -> "AffineTransform":
        return cls(torch.eye(3, dtype=dtype), torch.zeros(3, dtype=dtype))

    @classmethod
    def from_parameters(
        cls,
        rotation_deg: Sequence[float] = (0.0, 0.0, 0.0),
        translation: Sequence[float] = (0.0, 0.0, 0.0),
        scale: float | Sequence[float] = 1.0,
        dtype: torch.dtype = torch.float64,
    ) -> "AffineTransform":
        """Rotation about x, then y, then z, applied after scaling"""
        ax, ay, az = (math.radians(a) for a in rotation_deg)
        rx = [[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]]
        ry = [[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]]
        rz = [[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]]
        scales = [scale] * 3 if isinstance(scale, (int, float)) else list(scale)
        rotation = (
            torch.tensor(rz, dtype=dtype) @ torch.tensor(ry, dtype=dtype) @ torch.tensor(rx, dtype=dtype)
        )
        matrix = rotation @ torch.diag(torch.tensor(scales, dtype=dtype))
        return cls(matrix, torch.tensor(list(translation), dtype=dtype))

    @property
    def requires_grad(self) -> bool:
        return self.matrix.requires_grad or self.translation.requires_grad

    @property
    def dtype(self) -> torch.dtype:
        return self.matrix.dtype

    def determinant(self) -> float:
        return float(torch.linalg.det(self.matrix.detach()))

    def is_identity(self) -> bool:
        """Exactly the identity (not merely close)"""
        eye = torch.eye(3, dtype=self.matrix.dtype, device=self.matrix.device)
        return bool(torch.equal(self.matrix.detach(), eye) and not self.translation.detach().any())

    def to(self, dtype: torch.dtype) -> "AffineTransform":
        return AffineTransform(self.matrix.to(dtype), self.translation.to(dtype))

    def allclose(self, other: "AffineTransform", atol: float = 1e-6) -> bool:
        return bool(
            torch.allclose(self.matrix, other.matrix.to(self.dtype), atol=atol, rtol=0)
            and torch.allclose(self.translation, other.translation.to(self.dtype), atol=atol, rtol=0)
        )


def voxels_to_normalized(shape: Sequence[int], shift: Sequence[float]) -> tuple[float, float, float]:
    """Convert a shift in voxels to normalized units of a grid of `shape`"""
    return tuple(2.0 * s / (n - 1) if n > 1 else 0.0 for n, s in zip(shape, shift))  # type: ignore[return-value]


def translation_voxels(shape: Sequence[int], shift: Sequence[float]) -> AffineTransform:
    """Pure translation by `shift` voxels on a grid of `shape`"""
    return AffineTransform.from_parameters(translation=voxels_to_normalized(shape, shift))


def compose(a: AffineTransform, b: AffineTransform) -> AffineTransform:
    """a after b: warping with the result equals warping with b, then with a"""
    b_matrix, b_translation = b.matrix.to(a.dtype), b.translation.to(a.dtype)
    return AffineTransform(a.matrix @ b_matrix, a.matrix @ b_translation + a.translation)


def invert(t: AffineTransform) -> AffineTransform:
    if t.is_identity() and not t.requires_grad:
        return t
    inverse = torch.linalg.inv(t.matrix)
    return AffineTransform(inverse, -(inverse @ t.translation))


@functools.lru_cache(maxsize=32)
def normalized_grid(shape: tuple[int, int, int], dtype: torch.dtype, device: str = "cpu") -> torch.Tensor:
    """(W, H, D, 3) normalized (x, y, z) coordinates of every voxel"""
    axes = [torch.linspace(-1.0, 1.0, n, dtype=dtype, device=device) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1)


def warp_tensor(
    x: torch.Tensor, t: AffineTransform, interpolation: str = "trilinear", padding: str = "zeros"
) -> torch.Tensor:
    """
    Backward-warp a tensor of shape (W, H, D), (C, W, H, D) or (N, C, W, H, D).

    All channels share the same sampling grid. Differentiable w.r.t. both `x` and the
    transform parameters. Samples outside the input read 0 with `padding="zeros"` and the
    nearest border value with `padding="border"`.
    """
    if interpolation not in INTERPOLATIONS:
        raise ValueError(f"interpolation must be one of {sorted(INTERPOLATIONS)}, got {interpolation!r}")
    if padding not in PADDINGS:
        raise ValueError(f"padding must be one of {sorted(PADDINGS)}, got {padding!r}")
    if t.is_identity() and not (torch.is_grad_enabled() and t.requires_grad):
        # grid points map to themselves
        return x

    ndim = x.dim()
    assert ndim in (3, 4, 5), f"cannot warp tensor of shape {tuple(x.shape)}"
    batch = x.reshape(1, 1, *x.shape) if ndim == 3 else x.unsqueeze(0) if ndim == 4 else x
    shape = tuple(batch.shape[2:])

    t = t.to(x.dtype) if x.is_floating_point() else t
    grid = normalized_grid(shape, t.dtype, str(x.device))  # type: ignore[arg-type]
    inverse = torch.linalg.inv(t.matrix)
    source = (grid - t.translation) @ inverse.T
    # grid_sample reads the last grid coordinate as the index into the first spatial dim
    source = source[..., [2, 1, 0]].unsqueeze(0).expand(batch.shape[0], *shape, 3)

    out = F.grid_sample(
        batch,
        source.to(batch.dtype),
        mode=INTERPOLATIONS[interpolation],
        padding_mode=padding,
        align_corners=True,
    )
    return out.reshape(x.shape)


V = TypeVar("V", Volume, MaskVolume, FeatureMap)


@overload
def warp_volume(v: V, t: AffineTransform, interpolation: str = ..., threshold: float | None = ...) -> V:
    ...


@overload
def warp_volume(
    v: torch.Tensor, t: AffineTransform, interpolation: str = ..., threshold: float | None = ...
) -> torch.Tensor:
    ...


def warp_volume(v, t, interpolation="trilinear", threshold=None):
    """
    Resample a Volume, MaskVolume, FeatureMap or raw tensor with `t`.

    With `threshold` a MaskVolume comes back hard: 1 where the resampled weight exceeds
    it, 0 elsewhere.
    """
    assert threshold is None or isinstance(v, MaskVolume), "threshold applies to masks only"
    if isinstance(v, torch.Tensor):
        return warp_tensor(v, t, interpolation)
    if isinstance(v, FeatureMap):
        return FeatureMap(warp_tensor(v.data, t, interpolation))
    out = warp_tensor(torch.from_numpy(np.ascontiguousarray(v.data)), t, interpolation)
    data = out.numpy().astype(v.data.dtype, copy=False)
    if isinstance(v, Volume):
        return Volume(data, v.spacing)
    if threshold is not None:
        return MaskVolume((data > threshold).astype(v.data.dtype), hard=True)
    hard = v.hard and interpolation == "nearest"
    return MaskVolume(np.clip(data, 0, 1), hard=hard)


def warp_labels(labels: np.ndarray, t: AffineTransform, classes: int | None = None) -> np.ndarray:
    """
    Resample a (W, H, D) label map through its one-hot channels: each channel is warped
    trilinearly and every voxel takes the label of the largest one. Voxels pulled from
    outside the grid become background (0).
    """
    if t.is_identity():
        return labels.copy()
    n = int(labels.max(initial=0)) + 1 if classes is None else classes + 1
    one_hot = F.one_hot(torch.from_numpy(labels.astype(np.int64)), n).permute(3, 0, 1, 2)
    out = warp_tensor(one_hot.to(torch.float32), t)
    return out.argmax(dim=0).numpy().astype(labels.dtype)


def ellipsoid_mask(
    shape: Sequence[int], center: Sequence[float], radii: Sequence[float]
) -> np.ndarray:
    """Hard ellipsoid with center and radii given in voxels"""
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii))
    return (dist <= 1.0).astype(np.float32)


def check_same_shape(*arrays: np.ndarray | torch.Tensor) -> None:
    shapes = {tuple(a.shape) for a in arrays}
    if len(shapes) > 1:
        raise ShapeMismatch(f"shapes differ: {sorted(shapes)}")
