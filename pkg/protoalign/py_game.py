"""
Draw overlays to PNG with pygame surfaces.
"""
import os
from pathlib import Path

import numpy as np

# no window is ever opened
os.environ.setdefault("SDL_VIDEODRIVER", "dummy")
import pygame  # noqa: E402

from protoalign.overlay import FALSE_POSITIVE, HIT, MISSED, OverlayRenderer, OverlaySlice  # noqa: E402

GREEN = (40, 200, 60)
RED = (220, 40, 40)
YELLOW = (240, 220, 40)
COLORS = {MISSED: GREEN, FALSE_POSITIVE: RED, HIT: YELLOW}


class PyGameOverlayRenderer(OverlayRenderer):
    """Grayscale image blocks, masks drawn over them: yellow hit, green missed, red false positive"""

    def __init__(self, block_size: int = 6) -> None:
        assert block_size >= 1, "block size must be positive"
        self.BLOCK_SIZE = block_size

    def surface(self, overlay: OverlaySlice) -> pygame.Surface:
        screen = pygame.Surface((overlay.columns * self.BLOCK_SIZE, overlay.rows * self.BLOCK_SIZE))
        image = overlay.image.astype(np.float64)
        span = float(image.max() - image.min()) or 1.0
        gray = np.round(255 * (image - image.min()) / span).astype(int)
        for x in range(overlay.columns):
            for y in range(overlay.rows):
                color = COLORS.get(overlay.category(x, y))
                if color is None:
                    color = (int(gray[x, y]),) * 3
                pygame.draw.rect(
                    screen,
                    color,
                    pygame.Rect(x * self.BLOCK_SIZE, y * self.BLOCK_SIZE, self.BLOCK_SIZE, self.BLOCK_SIZE),
                )
        return screen

    def draw(self, overlay: OverlaySlice, out: Path | None) -> Path:
        assert out is not None, "PNG overlays need an output path"
        out.parent.mkdir(parents=True, exist_ok=True)
        pygame.image.save(self.surface(overlay), str(out))
        return out
