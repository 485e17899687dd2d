"""Rasterise the glyphs "DGP" into the 200x100 PBM (P1) mask used by the toy data.

Development tooling only; the generated file is committed under
src/avdgp/resources/ and is the ground truth for the toy labels.

    python3 tools/make_mask.py [--font PATH] [--out PATH]
"""

import argparse
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

WIDTH, HEIGHT = 200, 100
DEFAULT_FONT = "/usr/share/fonts/truetype/dejavu/DejaVuSans-Bold.ttf"
DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "avdgp" / "resources" / "dgp_mask.pbm"


def render(font_path: str, text: str = "DGP") -> np.ndarray:
    # draw large, crop to the ink, then resample onto the target raster
    font = ImageFont.truetype(font_path, 400)
    canvas = Image.new("L", (1600, 600), 0)
    ImageDraw.Draw(canvas).text((20, 20), text, fill=255, font=font)
    box = canvas.getbbox()
    glyphs = canvas.crop(box)
    margin_x, margin_y = 12, 10
    glyphs = glyphs.resize((WIDTH - 2 * margin_x, HEIGHT - 2 * margin_y), Image.LANCZOS)
    out = Image.new("L", (WIDTH, HEIGHT), 0)
    out.paste(glyphs, (margin_x, margin_y))
    return np.asarray(out) >= 128


def to_pbm(mask: np.ndarray) -> str:
    rows = ["P1", "# DGP letters mask, 1 = inside a glyph", f"{mask.shape[1]} {mask.shape[0]}"]
    rows += [" ".join("1" if v else "0" for v in row) for row in mask]
    return "\n".join(rows) + "\n"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--font", default=DEFAULT_FONT)
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = ap.parse_args()
    mask = render(args.font)
    args.out.write_text(to_pbm(mask))
    print(f"wrote {args.out} ({mask.mean():.3f} of pixels set)")


if __name__ == "__main__":
    main()
