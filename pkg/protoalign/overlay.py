"""
Mid-slice overlays of stored predictions against ground truth.
"""
import abc
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from protoalign.errors import FormatError
from protoalign.geometry import check_same_shape

# cell categories
BACKGROUND, MISSED, FALSE_POSITIVE, HIT = 0, 1, 2, 3


@dataclass(frozen=True, eq=False)
class OverlaySlice:
    """One axial slice: image intensities plus target / prediction masks, indexed [x, y]"""

    image: np.ndarray
    target: np.ndarray
    prediction: np.ndarray
    z: int
    title: str = ""

    @classmethod
    def from_volumes(
        cls, image: np.ndarray, target: np.ndarray, prediction: np.ndarray, z: int | None = None, title: str = ""
    ) -> "OverlaySlice":
        check_same_shape(image, target, prediction)
        z = image.shape[2] // 2 if z is None else z
        return cls(image[:, :, z], target[:, :, z] > 0, prediction[:, :, z] > 0, z, title)

    @classmethod
    def from_npz(cls, path: str | Path, z: int | None = None) -> "OverlaySlice":
        try:
            with np.load(path) as stored:
                title = f"{stored['variant']} {stored['query_id']} <- {stored['support_institution']}"
                return cls.from_volumes(stored["image"], stored["target"], stored["prediction"], z, title)
        except (KeyError, ValueError) as e:
            raise FormatError(f"{path}: not a stored prediction ({e})") from e

    @property
    def columns(self) -> int:
        return int(self.image.shape[0])

    @property
    def rows(self) -> int:
        return int(self.image.shape[1])

    def category(self, x: int, y: int) -> int:
        return int(self.target[x, y]) + 2 * int(self.prediction[x, y])


class OverlayRenderer(abc.ABC):
    """Draws overlay slices; subclasses decide the medium"""

    def render(self, overlay: OverlaySlice, out: str | Path | None = None) -> str | Path:
        return self.draw(overlay, Path(out) if out is not None else None)

    @abc.abstractmethod
    def draw(self, overlay: OverlaySlice, out: Path | None) -> str | Path:
        """Draw the slice; returns the text drawn or the path written"""


def render_overlay(
    image: np.ndarray,
    target: np.ndarray,
    prediction: np.ndarray,
    renderer: OverlayRenderer,
    out: str | Path | None = None,
    z: int | None = None,
) -> str | Path:
    return renderer.render(OverlaySlice.from_volumes(image, target, prediction, z), out)
