"""
Learnable pipeline: 3D UNet feature extractor, shared base-class segmentation head,
affine head and the atlas the affine head registers base-class predictions to.

    image ──UNet3D──> F ──local prototypes──> M̂^q(c)                       (3d)
                      └──SegmentationHead──> M̂_base                        (3d_seg)
                                              └──AffineHead──> τ          (3d_seg_align)
                                                   warp F, M, M̂_base with τ, predict in
                                                   aligned space, warp back with τ^-1
"""
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from protoalign.config import FEW_SHOT_VARIANTS, VARIANTS, ModelConfig
from protoalign.episodes import Episode
from protoalign.errors import HeadDisabled, ShapeError, ShapeMismatch
from protoalign.geometry import AffineTransform, FeatureMap, Volume, invert, normalized_grid, warp_tensor
from protoalign.phantom import LabeledSubject
from protoalign.prototypes import WindowGrid, predict_query_mask_local, support_prototypes

# capability order of the few-shot variants
RANK = {v: i for i, v in enumerate(FEW_SHOT_VARIANTS)}


class DoubleConv3d(nn.Sequential):
    """(conv 3x3x3 -> instance norm -> ReLU) x 2"""

    def __init__(self, in_channels: int, out_channels: int, norm: bool = True) -> None:
        layers: list[nn.Module] = []
        for c_in in (in_channels, out_channels):
            layers += [
                nn.Conv3d(c_in, out_channels, kernel_size=3, padding=1),
                nn.InstanceNorm3d(out_channels, affine=True) if norm else nn.Identity(),
                nn.ReLU(inplace=True),
            ]
        super().__init__(*layers)


class UNet3D(nn.Module):
    """Full-resolution 3D UNet; len(widths) levels, one max-pool between consecutive levels"""

    def __init__(
        self, in_channels: int, out_channels: int, widths: Sequence[int] = (16, 32, 64), norm: bool = True
    ) -> None:
        super().__init__()
        self.widths = tuple(widths)
        self.encoder = nn.ModuleList()
        c = in_channels
        for w in self.widths:
            self.encoder.append(DoubleConv3d(c, w, norm))
            c = w
        self.pool = nn.MaxPool3d(2)
        # deepest level first
        self.upsample = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for i in reversed(range(len(self.widths) - 1)):
            self.upsample.append(nn.ConvTranspose3d(self.widths[i + 1], self.widths[i], kernel_size=2, stride=2))
            self.decoder.append(DoubleConv3d(2 * self.widths[i], self.widths[i], norm))
        self.head = nn.Conv3d(self.widths[0], out_channels, kernel_size=1)

    @property
    def divisor(self) -> int:
        return 2 ** (len(self.widths) - 1)

    def check_shape(self, shape: Sequence[int]) -> None:
        if any(n % self.divisor for n in shape):
            raise ShapeError(f"every dimension of {tuple(shape)} must be divisible by {self.divisor}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_shape(x.shape[2:])
        skips = []
        for i, block in enumerate(self.encoder):
            x = block(x)
            if i < len(self.encoder) - 1:
                skips.append(x)
                x = self.pool(x)
        for up, block in zip(self.upsample, self.decoder):
            x = block(torch.cat([skips.pop(), up(x)], dim=1))
        return self.head(x)


class SegmentationHead(nn.Module):
    """Features -> softmax over background + base classes"""

    def __init__(self, feature_channels: int, classes: int) -> None:
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv3d(feature_channels, feature_channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv3d(feature_channels, classes + 1, kernel_size=1),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.layers(features), dim=1)


class AffineHead(nn.Module):
    """
    Regresses a 12-parameter affine transform from soft base-class masks.

    Three stride-2 convolutions over the masks and their normalized voxel coordinates,
    adaptive average pooling to a fixed grid, then a two-layer regressor. The last layer
    starts at zero so a fresh head outputs the identity. The delta is squashed with tanh:
    linear-part entries lie in [-0.15, 0.15], so every eigenvalue of I + Δ has modulus
    >= 1 - 3 * 0.15 and |det| >= 0.55^3; translations lie in [-0.5, 0.5].
    """

    LINEAR_BOUND = 0.15
    TRANSLATION_BOUND = 0.5
    HIDDEN = 64

    def __init__(self, classes: int, width: int = 8, pool: tuple[int, int, int] = (4, 4, 2)) -> None:
        super().__init__()
        in_channels = classes + 1 + 3
        self.encoder = nn.Sequential(
            nn.Conv3d(in_channels, width, kernel_size=3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv3d(width, 2 * width, kernel_size=3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv3d(2 * width, 4 * width, kernel_size=3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool3d(pool),
            nn.Flatten(),
        )
        self.regressor = nn.Sequential(
            nn.Linear(4 * width * math.prod(pool), self.HIDDEN),
            nn.ReLU(inplace=True),
            nn.Linear(self.HIDDEN, 12),
        )
        nn.init.zeros_(self.regressor[-1].weight)
        nn.init.zeros_(self.regressor[-1].bias)
        bounds = [self.LINEAR_BOUND] * 9 + [self.TRANSLATION_BOUND] * 3
        self.register_buffer("bounds", torch.tensor(bounds), persistent=False)

    def forward(self, probs: torch.Tensor) -> torch.Tensor:
        """(N, classes + 1, W, H, D) -> (N, 12) bounded delta"""
        n, _, *shape = probs.shape
        coords = normalized_grid(tuple(shape), probs.dtype, str(probs.device)).permute(3, 0, 1, 2)
        x = torch.cat([probs, coords.unsqueeze(0).expand(n, -1, -1, -1, -1)], dim=1)
        return torch.tanh(self.regressor(self.encoder(x))) * self.bounds.to(probs.dtype)


@dataclass(frozen=True, eq=False)
class Atlas:
    """Average one-hot base-class masks of one institution, channel 0 = background"""

    probabilities: np.ndarray
    classes: tuple[str, ...]
    institution: str | None = None

    def __post_init__(self) -> None:
        assert self.probabilities.ndim == 4, "atlas must be (classes + 1, W, H, D)"
        assert self.probabilities.shape[0] == len(self.classes) + 1, "atlas channels do not match classes"
        assert self.probabilities.min() >= 0 and self.probabilities.max() <= 1, "atlas values outside [0, 1]"
        assert np.allclose(self.probabilities.sum(0), 1, atol=1e-5), "atlas channels must sum to 1"

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.probabilities.shape[1:]  # type: ignore[return-value]

    def tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.probabilities).to(dtype)


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    """(W, H, D) label map with values in [0, classes] -> (classes + 1, W, H, D) float32"""
    return np.moveaxis(np.eye(classes + 1, dtype=np.float32)[labels], -1, 0)


def build_atlas(
    subjects: Sequence[LabeledSubject], base_classes: Sequence[str], institution: str | None = None
) -> Atlas:
    if not subjects:
        raise ValueError("atlas needs at least one subject")
    shapes = {s.shape for s in subjects}
    if len(shapes) > 1:
        raise ShapeMismatch(f"atlas subjects differ in shape: {sorted(shapes)}")
    classes = tuple(base_classes)
    total = np.zeros((len(classes) + 1, *subjects[0].shape), dtype=np.float64)
    for s in subjects:
        total += one_hot(s.relabel(classes), len(classes))
    return Atlas((total / len(subjects)).astype(np.float32), classes, institution)


@dataclass
class EpisodeOutput:
    """Soft query prediction plus every intermediate the losses need"""

    variant: str
    # (W, H, D) in the query's native space
    prediction: torch.Tensor
    query_target: torch.Tensor
    # query + supports, (1 + S, n + 1, W, H, D)
    base_probs: torch.Tensor | None = None
    base_targets: torch.Tensor | None = None
    # align variant only
    transforms: list[AffineTransform] = field(default_factory=list)
    aligned_prediction: torch.Tensor | None = None
    aligned_query_target: torch.Tensor | None = None
    aligned_base_probs: torch.Tensor | None = None
    windows: int = 0


class ProtoSegmenter(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        # built first so the extractor's initial weights do not depend on the heads
        self.extractor = UNet3D(config.in_channels, config.feature_channels, config.widths, config.norm)
        n = len(config.head_classes)
        self.seg_head = SegmentationHead(config.feature_channels, n) if config.use_seg_head else None
        self.align_head = AffineHead(n, config.align_width, config.align_pool) if config.use_align_head else None

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def extract_features(self, image: Volume | torch.Tensor) -> FeatureMap:
        """Feature map of a single image, same spatial shape as the input"""
        x = torch.from_numpy(image.data) if isinstance(image, Volume) else image
        return FeatureMap(self.extractor(x.to(self.dtype).reshape(1, 1, *x.shape[-3:]))[0])

    def segment_base_classes(self, features: FeatureMap | torch.Tensor) -> torch.Tensor:
        """(n + 1, W, H, D) or batched (N, n + 1, W, H, D) channel distribution"""
        if self.seg_head is None:
            raise HeadDisabled(f"variant {self.variant} has no segmentation head")
        f = features.data if isinstance(features, FeatureMap) else features
        return self.seg_head(f) if f.dim() == 5 else self.seg_head(f.unsqueeze(0))[0]

    def predict_affine(self, base_probs: torch.Tensor) -> AffineTransform | list[AffineTransform]:
        """One transform per soft base-class prediction (a list when batched)"""
        if self.align_head is None:
            raise HeadDisabled(f"variant {self.variant} has no affine head")
        batched = base_probs.dim() == 5
        deltas = self.align_head(base_probs if batched else base_probs.unsqueeze(0))
        eye = torch.eye(3, dtype=deltas.dtype, device=deltas.device)
        transforms = [AffineTransform(eye + d[:9].reshape(3, 3), d[9:]) for d in deltas]
        return transforms if batched else transforms[0]


def build_model(config: ModelConfig, seed: int | None = None) -> ProtoSegmenter:
    if seed is not None:
        torch.manual_seed(seed)
    return ProtoSegmenter(config)


def parameter_counts(model: ProtoSegmenter) -> dict[str, int]:
    """Trainable parameters per component"""

    def count(m: nn.Module | None) -> int:
        return 0 if m is None else sum(p.numel() for p in m.parameters() if p.requires_grad)

    counts = {
        "extractor": count(model.extractor),
        "seg_head": count(model.seg_head),
        "align_head": count(model.align_head),
    }
    counts["total"] = sum(counts.values())
    return counts


def _resolve_variant(model: ProtoSegmenter, variant: str | None) -> str:
    variant = variant or model.variant
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "supervised" or model.variant == "supervised":
        if variant != model.variant:
            raise HeadDisabled(f"cannot run a {model.variant} model as {variant}")
        return variant
    if RANK[variant] > RANK[model.variant]:
        raise HeadDisabled(f"cannot run a {model.variant} model as {variant}")
    return variant


def _stack(arrays: Sequence[np.ndarray], dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays)).to(dtype)


def forward_episode(model: ProtoSegmenter, episode: Episode, variant: str | None = None) -> EpisodeOutput:
    """
    Segment the episode's class on its query.

    `variant` runs the model as a less capable variant (3d <= 3d_seg <= 3d_seg_align), with
    the same parameters.
    """
    variant = _resolve_variant(model, variant)
    dtype = model.dtype
    subjects = (episode.query, *episode.supports)
    images = _stack([s.image.data for s in subjects], dtype).unsqueeze(1)
    features = model.extractor(images)
    query_target = torch.from_numpy(episode.query_mask()).to(dtype)

    if variant == "supervised":
        probs = model.segment_base_classes(features[:1])
        channel = model.config.head_classes.index(episode.cls) + 1
        return EpisodeOutput(variant, probs[0, channel], query_target, base_probs=probs)

    support_masks = _stack(episode.support_masks(), dtype)
    output = EpisodeOutput(variant, query_target, query_target)
    if variant != "3d":
        output.base_probs = model.segment_base_classes(features)
        if episode.base_classes:
            output.base_targets = head_targets(subjects, model.config.head_classes, dtype)

    if variant == "3d_seg_align":
        assert output.base_probs is not None
        transforms = model.predict_affine(output.base_probs)
        assert isinstance(transforms, list)
        features = torch.stack([warp_tensor(f, t) for f, t in zip(features, transforms)])
        support_masks = torch.stack([warp_tensor(m, t) for m, t in zip(support_masks, transforms[1:])])
        output.transforms = transforms
        output.aligned_base_probs = torch.stack([warp_tensor(p, t) for p, t in zip(output.base_probs, transforms)])
        output.aligned_query_target = warp_tensor(query_target, transforms[0])

    grid = WindowGrid.build(episode.query.shape, model.config.window_ratios)
    class_protos, background_protos = support_prototypes(features[1:], support_masks, grid)
    prediction = predict_query_mask_local(features[0], class_protos, background_protos)
    output.windows = grid.count

    if variant == "3d_seg_align":
        output.aligned_prediction = prediction
        # voxels with no preimage in the aligned field of view take the nearest border value
        prediction = warp_tensor(prediction, invert(output.transforms[0]), padding="border")
    output.prediction = prediction
    return output


def supervised_probs(model: ProtoSegmenter, subjects: Sequence[LabeledSubject]) -> torch.Tensor:
    """Head distribution over every class for a batch of subjects"""
    images = _stack([s.image.data for s in subjects], model.dtype).unsqueeze(1)
    return model.segment_base_classes(model.extractor(images))


def head_targets(subjects: Sequence[LabeledSubject], classes: Sequence[str], dtype: torch.dtype) -> torch.Tensor:
    labels = [s.relabel(tuple(classes)) for s in subjects]
    return _stack([one_hot(l, len(classes)) for l in labels], dtype)
