"""Dataset files: a binary of tagged tensor blocks plus a JSONL sidecar.

`pairs.bin` holds, per record, the source/target/mask (and optional
reference) tensors as tagged blocks. `pairs.jsonl` holds one metadata line
per record with byte offsets into the binary, so records can be loaded
individually without reading the whole file.
"""

from __future__ import annotations

import io
import json
import os

from ..numerics import serialize
from . import grammar
from .pairs import EditPair
from .scene import MaskVideo, SceneSpec, VideoTensor

BIN_NAME = "pairs.bin"
SIDECAR_NAME = "pairs.jsonl"
MANIFEST_NAME = "manifest.json"


def write_dataset(out_dir: str, pair_list, manifest: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    sidecar_lines = []
    with open(os.path.join(out_dir, BIN_NAME), "wb") as binf:
        for idx, pair in enumerate(pair_list):
            offset = binf.tell()
            serialize.write_block(binf, "source", pair.source.data)
            serialize.write_block(binf, "target", pair.target.data)
            serialize.write_block(binf, "mask", pair.mask.data)
            if pair.reference is not None:
                serialize.write_block(binf, "reference", pair.reference.data)
            length = binf.tell() - offset
            row = {
                "index": idx,
                "offset": offset,
                "length": length,
                "edit_kind": pair.edit_kind,
                "direction": pair.direction,
                "instruction": pair.instruction,
                "caption_src": pair.caption_src,
                "caption_edit": pair.caption_edit,
                "exclusion": pair.exclusion,
                "has_reference": pair.reference is not None,
                "dilation_radius": pair.mask.dilation_radius,
                "frames": int(pair.source.data.shape[0]),
                "source_spec": (pair.source_spec.to_dict()
                                if pair.source_spec else None),
                "target_spec": (pair.target_spec.to_dict()
                                if pair.target_spec else None),
                "meta": pair.meta,
            }
            sidecar_lines.append(json.dumps(row, sort_keys=True))
    with open(os.path.join(out_dir, SIDECAR_NAME), "w") as f:
        f.write("\n".join(sidecar_lines) + ("\n" if sidecar_lines else ""))
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")


class DatasetReader:
    """Random access over a written dataset directory."""

    def __init__(self, path: str):
        self.path = path
        sidecar = os.path.join(path, SIDECAR_NAME)
        if not os.path.exists(sidecar):
            raise FileNotFoundError(f"{sidecar}: no dataset sidecar")
        with open(sidecar) as f:
            self.rows = [json.loads(line) for line in f if line.strip()]
        manifest_path = os.path.join(path, MANIFEST_NAME)
        self.manifest = {}
        if os.path.exists(manifest_path):
            with open(manifest_path) as f:
                self.manifest = json.load(f)
        self._bin = os.path.join(path, BIN_NAME)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def video_indices(self) -> list[int]:
        return [r["index"] for r in self.rows if r["frames"] > 1]

    @property
    def image_indices(self) -> list[int]:
        return [r["index"] for r in self.rows if r["frames"] == 1]

    def meta(self, index: int) -> dict:
        return self.rows[index]

    def load(self, index: int) -> EditPair:
        row = self.rows[index]
        with open(self._bin, "rb") as f:
            f.seek(row["offset"])
            blob = f.read(row["length"])
        blocks = serialize.read_all_blocks(io.BytesIO(blob))
        reference = None
        if row["has_reference"]:
            reference = VideoTensor(blocks["reference"])
        return EditPair(
            source=VideoTensor(blocks["source"]),
            target=VideoTensor(blocks["target"]),
            mask=MaskVideo(blocks["mask"],
                           dilation_radius=row["dilation_radius"]),
            instruction=list(row["instruction"]),
            caption_src=list(row["caption_src"]),
            caption_edit=list(row["caption_edit"]),
            edit_kind=row["edit_kind"],
            direction=row["direction"],
            reference=reference,
            exclusion=list(row["exclusion"]),
            source_spec=(SceneSpec.from_dict(row["source_spec"])
                         if row["source_spec"] else None),
            target_spec=(SceneSpec.from_dict(row["target_spec"])
                         if row["target_spec"] else None),
            meta=row["meta"],
        )

    def load_all(self) -> list[EditPair]:
        return [self.load(i) for i in range(len(self))]
