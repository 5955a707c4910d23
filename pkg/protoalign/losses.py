"""
Dice losses and the composed training objective

    total = few_shot + lambda_seg * seg + lambda_align * align
"""
from dataclasses import dataclass

import torch

from protoalign.errors import HeadDisabled, ShapeMismatch
from protoalign.model import Atlas, EpisodeOutput

DICE_SMOOTH = 1e-5


def _check(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")


def dice_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - (2 sum(p t) + d) / (sum(p) + sum(t) + d); soft targets allowed"""
    _check(pred, target)
    target = target.to(pred.dtype)
    overlap = (pred * target).sum()
    return 1 - (2 * overlap + DICE_SMOOTH) / (pred.sum() + target.sum() + DICE_SMOOTH)


def multiclass_dice_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """
    Mean binary Dice loss over the foreground channels of (..., n + 1, W, H, D) inputs.

    A leading batch dimension is averaged too. Channel 0 (background) is not scored.
    """
    _check(pred, target)
    if pred.dim() == 4:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    losses = [dice_loss(p[c], t[c]) for p, t in zip(pred, target) for c in range(1, p.shape[0])]
    return torch.stack(losses).mean()


def seg_loss(
    query_pred: torch.Tensor, query_target: torch.Tensor, support_pred: torch.Tensor, support_target: torch.Tensor
) -> torch.Tensor:
    return multiclass_dice_loss(query_pred, query_target) + multiclass_dice_loss(support_pred, support_target)


def align_loss(query_aligned: torch.Tensor, support_aligned: torch.Tensor, atlas: Atlas) -> torch.Tensor:
    """Dice of the aligned query (n + 1, W, H, D) and supports (S, n + 1, W, H, D) against the atlas"""
    target = atlas.tensor(query_aligned.dtype).to(query_aligned.device)
    supports = target.expand(support_aligned.shape[0], *target.shape)
    return multiclass_dice_loss(query_aligned, target) + multiclass_dice_loss(support_aligned, supports)


@dataclass
class LossReport:
    few_shot: torch.Tensor
    total: torch.Tensor
    seg: torch.Tensor | None = None
    align: torch.Tensor | None = None
    # Dice loss of the prediction warped back to the query's own space
    few_shot_native: torch.Tensor | None = None

    @classmethod
    def compose(
        cls,
        few_shot: torch.Tensor,
        seg: torch.Tensor | None = None,
        align: torch.Tensor | None = None,
        lambda_seg: float = 1.0,
        lambda_align: float = 1.0,
        few_shot_native: torch.Tensor | None = None,
    ) -> "LossReport":
        assert lambda_seg >= 0 and lambda_align >= 0, "loss weights must be non-negative"
        total = few_shot
        if seg is not None:
            total = total + lambda_seg * seg
        if align is not None:
            total = total + lambda_align * align
        return cls(few_shot, total, seg, align, few_shot_native)

    def values(self) -> dict[str, float]:
        """Scalars for the metrics log, NaN for disabled terms"""
        out = {}
        for name in ("few_shot", "seg", "align", "total", "few_shot_native"):
            v = getattr(self, name)
            out[name] = float("nan") if v is None else float(v.detach())
        return out


def episode_losses(
    output: EpisodeOutput, atlas: Atlas | None = None, lambda_seg: float = 1.0, lambda_align: float = 1.0
) -> LossReport:
    """
    Losses of one forward pass. For the align variant the few-shot term is scored in aligned
    space; the native-space Dice loss is reported alongside.
    """
    seg = align = native = None
    if output.variant in ("3d_seg", "3d_seg_align"):
        if output.base_probs is None or output.base_targets is None:
            raise HeadDisabled("segmentation loss needs base-class predictions and targets")
        p, t = output.base_probs, output.base_targets
        seg = seg_loss(p[0], t[0], p[1:], t[1:])

    if output.variant == "3d_seg_align":
        if atlas is None or output.aligned_base_probs is None:
            raise HeadDisabled("alignment loss needs an atlas and aligned base-class predictions")
        assert output.aligned_prediction is not None and output.aligned_query_target is not None
        aligned = output.aligned_base_probs
        align = align_loss(aligned[0], aligned[1:], atlas)
        few_shot = dice_loss(output.aligned_prediction, output.aligned_query_target)
        native = dice_loss(output.prediction, output.query_target).detach()
    else:
        few_shot = dice_loss(output.prediction, output.query_target)
        native = few_shot.detach()

    return LossReport.compose(few_shot, seg, align, lambda_seg, lambda_align, native)
