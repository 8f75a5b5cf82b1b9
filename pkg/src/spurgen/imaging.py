"""Image file IO: PNG round-trips and contact sheets.

Images are torch tensors shaped (3, H, W) or (B, 3, H, W), values in
[0, 1]. PNG writes quantize to 8 bits; reading divides by 255, so a
saved image reloads to exactly round(x*255)/255.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def save_image(image: torch.Tensor, path: str | Path) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got shape {tuple(image.shape)}")
    arr = (image.detach().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    arr = arr.permute(1, 2, 0).cpu().numpy()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path: str | Path, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).to(dtype)


def load_image_dir(
    directory: str | Path, pattern: str = "*.png", dtype: torch.dtype = torch.float32
) -> tuple[torch.Tensor, list[str]]:
    """Load all images matching pattern, sorted by filename.

    Returns a (B, 3, H, W) batch and the image ids (stem of each file).
    """
    directory = Path(directory)
    paths = sorted(directory.glob(pattern))
    if not paths:
        raise ValueError(f"no images matching {pattern!r} in {directory}")
    images = [load_image(p, dtype=dtype) for p in paths]
    return torch.stack(images), [p.stem for p in paths]


def contact_sheet(images: torch.Tensor, path: str | Path, columns: int = 8, pad: int = 2) -> None:
    """Write a grid of images as one PNG."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) batch, got shape {tuple(images.shape)}")
    if columns < 1:
        raise ValueError("columns must be >= 1")
    n, _, h, w = images.shape
    rows = (n + columns - 1) // columns
    sheet = np.full(
        (rows * h + (rows + 1) * pad, columns * w + (columns + 1) * pad, 3), 255, dtype=np.uint8
    )
    for i in range(n):
        arr = (images[i].detach().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
        arr = arr.permute(1, 2, 0).cpu().numpy()
        r, c = divmod(i, columns)
        y = pad + r * (h + pad)
        x = pad + c * (w + pad)
        sheet[y : y + h, x : x + w] = arr
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sheet, mode="RGB").save(path, format="PNG")
