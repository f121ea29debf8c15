"""Dataset dump: a text file of episode records plus a binary block of frame features per split."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from gadlab.errors import IntegrityError
from gadlab.seqmodel import decode_tensors, encode_tensors
from gadlab.synthgen import Episode, WorldSpec


def dump_split(world: WorldSpec, episodes: Sequence[Episode], out_dir: str | Path, split: str) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text, blob = out / f"{split}.tsv", out / f"{split}.features"
    with open(text, "w") as fh:
        fh.write("# world " + json.dumps(world.to_dict(), sort_keys=True) + "\n")
        fh.write("# labels " + json.dumps(world.labels) + "\n")
        for ep in episodes:
            fh.write(f"{ep.episode_id}\t{ep.task_id}\t{','.join(str(int(x)) for x in ep.frame_labels)}\n")
    tensors = [(f"episode{ep.episode_id}", np.asarray(ep.features, dtype=np.float64), False) for ep in episodes]
    blob.write_bytes(encode_tensors(tensors, {"kind": "features", "split": split}))
    return text, blob


def load_split(out_dir: str | Path, split: str) -> list[tuple[int, int, np.ndarray, np.ndarray]]:
    """(episode id, task id, frame labels, features) records."""
    out = Path(out_dir)
    meta, tensors = decode_tensors((out / f"{split}.features").read_bytes())
    feats = {name: arr for name, arr, _ in tensors}
    rows = []
    for line in (out / f"{split}.tsv").read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        eid, task, labels = line.split("\t")
        key = f"episode{eid}"
        if key not in feats:
            raise IntegrityError(f"features for episode {eid} missing")
        rows.append((int(eid), int(task), np.array([int(x) for x in labels.split(",")]), feats[key]))
    return rows
