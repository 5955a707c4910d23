"""
Prototype pooling and cosine-softmax query prediction.

Global prototypes average a feature map over the voxels of a (soft) mask; local prototypes
do the same inside each of K overlapping windows whose centres are half a window apart.
A query voxel is labelled by a two-way softmax over its cosine similarity to the class and
background prototypes (the maximum similarity over windows for local prototypes).
"""
import math
from dataclasses import dataclass
from typing import Iterator

import torch

from protoalign.errors import EmptyMask, NoValidPrototype
from protoalign.geometry import FeatureMap, MaskVolume

EPS = 1e-6
# prototypes compared with the query per matmul when taking the max over windows
CHUNK = 64


@dataclass(frozen=True, eq=False)
class Prototype:
    vector: torch.Tensor
    kind: str = "class"  # class | background
    # 1-based window index, None for a global prototype
    window: int | None = None

    def __post_init__(self) -> None:
        assert self.kind in ("class", "background"), f"unknown prototype kind {self.kind!r}"
        assert bool(torch.isfinite(self.vector).all()), "prototype is not finite"


def axis_windows(n: int, ratio: float) -> tuple[int, int, tuple[int, ...]]:
    """Window size, centre spacing and window starts along an axis of length n"""
    size = min(n, max(1, math.floor(ratio * n + 0.5)))
    spacing = max(1, size // 2)
    starts = list(range(0, n - size + 1, spacing))
    if starts[-1] + size < n:
        # last window flush with the border so the union covers the axis
        starts.append(n - size)
    return size, spacing, tuple(starts)


@dataclass(frozen=True)
class WindowGrid:
    shape: tuple[int, int, int]
    ratios: tuple[float, float, float]
    sizes: tuple[int, int, int]
    spacings: tuple[int, int, int]
    starts: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]

    @classmethod
    def build(cls, shape: tuple[int, int, int], ratios: tuple[float, float, float]) -> "WindowGrid":
        axes = [axis_windows(n, r) for n, r in zip(shape, ratios)]
        return cls(
            shape=tuple(shape),  # type: ignore[arg-type]
            ratios=tuple(ratios),  # type: ignore[arg-type]
            sizes=tuple(a[0] for a in axes),  # type: ignore[arg-type]
            spacings=tuple(a[1] for a in axes),  # type: ignore[arg-type]
            starts=tuple(a[2] for a in axes),  # type: ignore[arg-type]
        )

    @property
    def counts(self) -> tuple[int, int, int]:
        return tuple(len(s) for s in self.starts)  # type: ignore[return-value]

    @property
    def count(self) -> int:
        return math.prod(self.counts)

    def boxes(self) -> Iterator[tuple[tuple[int, int, int], tuple[int, int, int]]]:
        """(start, size) of every window, k = 1..K in C order over (x, y, z)"""
        for x in self.starts[0]:
            for y in self.starts[1]:
                for z in self.starts[2]:
                    yield (x, y, z), self.sizes

    def region(self, k: int) -> tuple[slice, slice, slice]:
        """Voxel slices of window k (1-based)"""
        nx, ny, nz = self.counts
        i, rest = divmod(k - 1, ny * nz)
        j, l = divmod(rest, nz)
        start = (self.starts[0][i], self.starts[1][j], self.starts[2][l])
        return tuple(slice(s, s + n) for s, n in zip(start, self.sizes))  # type: ignore[return-value]

    def membership(self, dtype: torch.dtype, device: torch.device | str = "cpu") -> list[torch.Tensor]:
        """Per axis, a (K_axis, n) 0/1 matrix marking the voxels of each window"""
        out = []
        for n, size, starts in zip(self.shape, self.sizes, self.starts):
            m = torch.zeros(len(starts), n, dtype=dtype, device=device)
            for i, s in enumerate(starts):
                m[i, s : s + size] = 1
            out.append(m)
        return out


def _as_tensor(x: torch.Tensor | FeatureMap | MaskVolume) -> torch.Tensor:
    if isinstance(x, FeatureMap):
        return x.data
    if isinstance(x, MaskVolume):
        return torch.from_numpy(x.data)
    return x


def masked_average_pool(
    features: torch.Tensor | FeatureMap,
    mask: torch.Tensor | MaskVolume,
    region: tuple[slice, slice, slice] | None = None,
    kind: str = "class",
) -> Prototype:
    """Sum of F * M over the region divided by the sum of M, per channel"""
    f, m = _as_tensor(features), _as_tensor(mask).to(_as_tensor(features).dtype)
    if region is not None:
        f, m = f[(slice(None), *region)], m[region]
    total = m.sum()
    if not total > EPS:
        raise EmptyMask(f"mask sum {float(total):.3g} <= {EPS}")
    vector = (f * m).sum(dim=(1, 2, 3)) / total
    return Prototype(vector, kind)


def window_sums(x: torch.Tensor, grid: WindowGrid) -> torch.Tensor:
    """Sums of (C, W, H, D) over every window, as (C, Kx, Ky, Kz)"""
    mx, my, mz = grid.membership(x.dtype, x.device)
    return torch.einsum("cxyz,ax,by,dz->cabd", x, mx, my, mz)


def local_prototypes(
    features: torch.Tensor, mask: torch.Tensor, grid: WindowGrid
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Windowed masked average pooling.

    Returns (prototypes (K, C), valid (K,)); rows of windows whose mask sum is <= EPS are
    zero and flagged invalid.
    """
    numerator = window_sums(features * mask, grid).flatten(1).T
    denominator = window_sums(mask.unsqueeze(0), grid).flatten()
    valid = denominator > EPS
    safe = torch.where(valid, denominator, torch.ones_like(denominator))
    return numerator / safe.unsqueeze(1) * valid.unsqueeze(1), valid


def support_prototypes(
    features: torch.Tensor, masks: torch.Tensor, grid: WindowGrid
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Class and background local prototypes of one or more supports.

    features (S, C, W, H, D), masks (S, W, H, D). With several supports each window's
    prototype is the mean over the supports where that window is non-empty.
    """
    out = []
    for weights in (masks, 1 - masks):
        pooled = [local_prototypes(f, m, grid) for f, m in zip(features, weights)]
        protos = torch.stack([p for p, _ in pooled])
        valid = torch.stack([v for _, v in pooled])
        count = valid.sum(0)
        keep = count > 0
        mean = protos.sum(0)[keep] / count[keep].unsqueeze(1).to(protos.dtype)
        out.append(mean)
    class_protos, background_protos = out
    if class_protos.shape[0] == 0:
        raise NoValidPrototype("every class window of the support is empty")
    if background_protos.shape[0] == 0:
        raise NoValidPrototype("every background window of the support is empty")
    return class_protos, background_protos


def cosine_softmax(feature: torch.Tensor, h_c: torch.Tensor, h_0: torch.Tensor) -> torch.Tensor:
    """exp(s_c) / (exp(s_c) + exp(s_0)) with s the cosine similarity to each prototype"""
    similarities = torch.stack([_cosine(feature, h_c), _cosine(feature, h_0)])
    return torch.softmax(similarities, dim=0)[0]


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a @ b) / (a.norm().clamp_min(EPS) * b.norm().clamp_min(EPS))


def _max_similarity(query: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """max_k cos(query voxel, prototype k); query is (C, N) with unit columns"""
    unit = prototypes / prototypes.norm(dim=1, keepdim=True).clamp_min(EPS)
    best = None
    for i in range(0, unit.shape[0], CHUNK):
        s = (unit[i : i + CHUNK] @ query).max(dim=0).values
        best = s if best is None else torch.maximum(best, s)
    assert best is not None
    return best


def predict_query_mask_local(
    query_features: torch.Tensor | FeatureMap,
    class_prototypes: torch.Tensor,
    background_prototypes: torch.Tensor,
) -> torch.Tensor:
    """Voxelwise softmax over the best class and best background similarity, shape (W, H, D)"""
    if class_prototypes.shape[0] == 0 or background_prototypes.shape[0] == 0:
        raise NoValidPrototype("need at least one class and one background prototype")
    f = _as_tensor(query_features)
    flat = f.flatten(1)
    unit = flat / flat.norm(dim=0, keepdim=True).clamp_min(EPS)
    similarities = torch.stack(
        [_max_similarity(unit, class_prototypes), _max_similarity(unit, background_prototypes)]
    )
    return torch.softmax(similarities, dim=0)[0].reshape(f.shape[1:])


def predict_query_mask_global(
    query_features: torch.Tensor | FeatureMap, h_c: torch.Tensor | Prototype, h_0: torch.Tensor | Prototype
) -> torch.Tensor:
    """Cosine softmax at every voxel against one class and one background prototype"""
    c = h_c.vector if isinstance(h_c, Prototype) else h_c
    b = h_0.vector if isinstance(h_0, Prototype) else h_0
    return predict_query_mask_local(query_features, c.unsqueeze(0), b.unsqueeze(0))
