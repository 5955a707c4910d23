"""
Draw overlays in the terminal.
"""
from pathlib import Path

from protoalign.overlay import BACKGROUND, FALSE_POSITIVE, HIT, MISSED, OverlayRenderer, OverlaySlice

SYMBOLS = {BACKGROUND: " ", MISSED: ".", FALSE_POSITIVE: "o", HIT: "x"}


class ConsoleOverlayRenderer(OverlayRenderer):
    """
    One character per voxel: 'x' hit, '.' missed target, 'o' false positive.
    Rows are y, columns are x.
    """

    def draw(self, overlay: OverlaySlice, out: Path | None) -> str:
        lines = [overlay.title] if overlay.title else []
        for y in range(overlay.rows):
            lines.append("".join(SYMBOLS[overlay.category(x, y)] for x in range(overlay.columns)).rstrip())
        text = "\n".join(lines) + "\n"
        if out is not None:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(text)
        return text
