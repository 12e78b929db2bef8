#!/usr/bin/env python3
"""Reference segmenter plugin backed by the pretrained UniverSeg model.

Usage: ``segperf --plugin-cmd "python contrib/universeg_plugin.py" calibrate``.
Invoked as ``universeg_plugin.py <workdir>``; reads ``support/`` and ``query/``,
writes ``out/predictions/``. Images arrive as 8-bit gray already in [0, 1]
and are read as such. Requires ``torch`` and ``universeg``, which the
toolkit itself never imports.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from segperf.dataset import BinaryMask
from segperf.fs import read_image_dir, read_mask_dir, write_mask

MAX_SUPPORT = 64


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="universeg_plugin")
    parser.add_argument("workdir", type=Path)
    parser.add_argument("--device", default="cuda")
    parser.add_argument("--threshold", type=float, default=0.5)
    args = parser.parse_args(argv)

    import torch
    from universeg import universeg

    device = args.device if torch.cuda.is_available() else "cpu"
    support_images = read_image_dir(args.workdir / "support" / "images", wire=True)
    support_labels = read_mask_dir(args.workdir / "support" / "labels")
    queries = read_image_dir(args.workdir / "query" / "images", wire=True)
    if not support_images or len(support_images) > MAX_SUPPORT:
        print(f"need 1..{MAX_SUPPORT} support pairs, got {len(support_images)}", file=sys.stderr)
        return 2

    names = sorted(support_images)
    sx = torch.from_numpy(
        np.stack([support_images[n].pixels for n in names]).astype(np.float32)
    )[None, :, None]
    sy = torch.from_numpy(
        np.stack([support_labels[n].bits for n in names]).astype(np.float32)
    )[None, :, None]

    model = universeg(pretrained=True).to(device).eval()
    out_dir = args.workdir / "out" / "predictions"
    with torch.no_grad():
        sx, sy = sx.to(device), sy.to(device)
        for name in sorted(queries):
            q = torch.from_numpy(queries[name].pixels.astype(np.float32))[None, None]
            prob = torch.sigmoid(model(q.to(device), sx, sy))[0, 0].cpu().numpy()
            write_mask(BinaryMask(prob > args.threshold), out_dir / f"{name}.png")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
