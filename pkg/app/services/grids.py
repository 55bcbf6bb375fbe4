"""
Side-by-side PNG grids: one row per pair, columns source | GT | generated ...
"""
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from app.data.pipeline import to_uint8

PAD = 2


def _rgb(img: torch.Tensor) -> np.ndarray:
    arr = to_uint8(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return arr[..., :3]


def save_image_grid(rows: Sequence[Sequence[torch.Tensor]], path: str) -> str:
    """
    Write a lossless PNG grid.

    Args:
        rows: per pair, the images of that row (CHW tensors in [-1, 1], same H and W)
        path: output file

    Returns:
        The path written
    """
    if not rows:
        raise ValueError("no rows to draw")
    cols = max(len(r) for r in rows)
    h, w = rows[0][0].shape[-2:]
    grid = np.full((len(rows) * (h + PAD) + PAD, cols * (w + PAD) + PAD, 3), 255, dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = PAD + i * (h + PAD), PAD + j * (w + PAD)
            grid[y:y + h, x:x + w] = _rgb(img)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(path, format="PNG")
    return str(path)
