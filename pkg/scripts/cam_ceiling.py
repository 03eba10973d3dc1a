"""How often can a coarse Grad-CAM peak land inside the lesion box at all?

The peak is the centre pixel of the strongest cell of the final token grid, so at image
size S only (S/32)^2 pixels are candidates. This counts, per image size, the lesioned
training samples whose box contains at least one candidate. No training involved.

    python scripts/cam_ceiling.py --sizes 64 128 256 --per-class 20 --seed 0
"""
from __future__ import annotations

import argparse
import tempfile

from dualswin.locator import extremal_points
from dualswin.synthdata import generate_synthetic, read_mask


def ceiling(size: int, per_class: int, seed: int) -> tuple[int, int]:
    with tempfile.TemporaryDirectory() as tmp:
        data = generate_synthetic(per_class, size, seed, tmp)
        grid = size // 32
        centres = [((c + 0.5) * 32, (r + 0.5) * 32) for r in range(grid) for c in range(grid)]
        hit = total = 0
        for e in data.split("train"):
            if e.label == 0:
                continue
            (x0, y0), (x1, y1) = extremal_points(read_mask(data.root / e.mask_path))
            total += 1
            hit += any(x0 <= x <= x1 and y0 <= y <= y1 for x, y in centres)
        return hit, total


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--per-class", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for size in args.sizes:
        hit, total = ceiling(size, args.per_class, args.seed)
        print(f"{size:4d}px  grid {size // 32}x{size // 32}  reachable {hit}/{total} = {hit / total:.0%}")


if __name__ == "__main__":
    main()
