"""Small IO helpers: PNG round-trips for [-1, 1] tensors, JSONL logs,
contact sheets."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch


def tensor_to_uint8(img: torch.Tensor) -> np.ndarray:
    """[3, H, W] in [-1, 1] -> (H, W, 3) uint8."""
    arr = img.detach().cpu().clamp(-1, 1).numpy()
    arr = ((arr + 1.0) * 127.5).round().astype(np.uint8)
    return arr.transpose(1, 2, 0)


def save_png(img: torch.Tensor, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray(tensor_to_uint8(img)).save(str(path), format="PNG")


def load_png(path: str | Path) -> torch.Tensor:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1)) * 2.0 - 1.0


def save_parse_png(parsing: torch.Tensor, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray(parsing.cpu().numpy().astype(np.uint8), mode="L").save(
        str(path), format="PNG"
    )


def load_parse_png(path: str | Path) -> torch.Tensor:
    from PIL import Image

    return torch.from_numpy(
        np.asarray(Image.open(path).convert("L"), dtype=np.int64)
    )


def append_jsonl(path: str | Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(json.loads(line))
    return out


def contact_sheet(rows: list[list[torch.Tensor]], path: str | Path,
                  pad: int = 2) -> None:
    """Tiles images (each [3, H, W], same size) into one PNG grid."""
    from PIL import Image

    tiles = [[tensor_to_uint8(img) for img in row] for row in rows]
    h, w = tiles[0][0].shape[:2]
    n_rows = len(tiles)
    n_cols = max(len(r) for r in tiles)
    sheet = np.full(
        (n_rows * (h + pad) - pad, n_cols * (w + pad) - pad, 3), 255, dtype=np.uint8
    )
    for i, row in enumerate(tiles):
        for j, tile in enumerate(row):
            y = i * (h + pad)
            x = j * (w + pad)
            sheet[y : y + h, x : x + w] = tile
    Image.fromarray(sheet).save(str(path), format="PNG")
