"""
Writing datasets in the standard layout:

    root/{split}/rgb/<id>.png
    root/{split}/thermal/<id>.png
    root/{split}/tags.csv
    root/{split}/manifest.json
    root/{split}/oracle.json      (synthetic datasets only)
"""
import csv
import logging
from pathlib import Path
from typing import Optional, Sequence

from PIL import Image

from app.core.errors import DataError
from app.data.pipeline import SPLITS, ImagePair, to_uint8
from app.data.synth import SynthOracle
from app.schemas.manifests import DatasetManifest, ManifestEntry

logger = logging.getLogger(__name__)


def save_png(tensor, path: Path) -> None:
    """Lossless 8-bit PNG of a CHW tensor in [-1, 1]."""
    arr = to_uint8(tensor)
    if arr.ndim == 3 and arr.shape[-1] not in (3, 4):
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def write_dataset(
    pairs: Sequence[ImagePair],
    root: str,
    split: str = "train",
    oracle: Optional[SynthOracle] = None,
) -> DatasetManifest:
    """
    Write pairs under root/split. Refuses to write into a non-empty split.

    Returns:
        The manifest that was written to manifest.json
    """
    if split not in SPLITS:
        raise DataError(f"Unknown split: {split}")
    base = Path(root) / split
    if base.exists() and any(base.iterdir()):
        raise DataError(f"{base} already exists and is not empty")
    (base / "rgb").mkdir(parents=True, exist_ok=True)
    (base / "thermal").mkdir(parents=True, exist_ok=True)

    entries = []
    for pair in sorted(pairs, key=lambda p: p.id):
        src = base / "rgb" / f"{pair.id}.png"
        tgt = base / "thermal" / f"{pair.id}.png"
        save_png(pair.source, src)
        save_png(pair.target, tgt)
        entries.append(ManifestEntry(
            id=pair.id,
            source_path=str(src.relative_to(root)),
            target_path=str(tgt.relative_to(root)),
            tag=pair.tag,
        ))

    with open(base / "tags.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "tag"])
        for e in entries:
            if e.tag != "untagged":
                writer.writerow([e.id, e.tag])

    manifest = DatasetManifest(root=str(root), split=split, entries=entries, synthetic=oracle is not None)
    (base / "manifest.json").write_text(manifest.model_dump_json(indent=2))
    if oracle is not None:
        (base / "oracle.json").write_text(oracle.to_json())

    logger.info(f"📝 Wrote {len(entries)} pairs to {base}")
    return manifest


def load_oracle(root: str, split: str = "test") -> SynthOracle:
    path = Path(root) / split / "oracle.json"
    if not path.exists():
        raise DataError(f"no oracle for {root}/{split}; only synthetic datasets carry one")
    return SynthOracle.from_json(path.read_text())
