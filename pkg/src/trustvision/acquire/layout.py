"""Arrange downloaded files into a per-species tree with a CSV index."""

from __future__ import annotations

import csv
import io
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

from .download import DONE, DownloadJournal
from .manifest import ManifestEntry

LAYOUT_TEMPLATE = "{species}/{filename}"
INDEX_COLUMNS = ("path", "species_id", "bytes", "checksum")


class MissingFile(FileNotFoundError):
    pass


class LayoutCollision(ValueError):
    pass


@dataclass(frozen=True)
class LayoutResult:
    index_path: Path
    rows: list[dict]
    copied: int


def _same_file(a: Path, b: Path) -> bool:
    if not b.is_file() or a.stat().st_size != b.stat().st_size:
        return False
    with open(a, "rb") as fa, open(b, "rb") as fb:
        while True:
            x, y = fa.read(1 << 20), fb.read(1 << 20)
            if x != y:
                return False
            if not x:
                return True


def layout_transform(entries: list[ManifestEntry], journal: DownloadJournal, download_root, out_root,
                     template: str = LAYOUT_TEMPLATE, index_name: str = "index.csv") -> LayoutResult:
    """Copy every done entry to ``out_root/<template>`` and write the index.

    Unchanged targets and an unchanged index are left untouched, so a
    second run is a no-op.
    """
    download_root, out_root = Path(download_root), Path(out_root)
    rows, copied, seen = [], 0, {}
    for i in journal.done_indices():
        e = entries[i]
        src = download_root / e.dest
        if not src.is_file():
            raise MissingFile(str(src))
        rel = template.format(species=e.species_id, filename=e.filename, split=e.split)
        if rel in seen:
            raise LayoutCollision(f"entries {seen[rel]} and {i} both map to {rel}")
        seen[rel] = i
        dst = out_root / rel
        if not _same_file(src, dst):
            dst.parent.mkdir(parents=True, exist_ok=True)
            tmp = dst.with_name(dst.name + ".tmp")
            shutil.copyfile(src, tmp)
            os.replace(tmp, dst)
            copied += 1
        st = journal.states[i]
        rows.append({"path": rel, "species_id": e.species_id, "bytes": st.bytes, "checksum": st.checksum})
    rows.sort(key=lambda r: r["path"])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=INDEX_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    index_path = out_root / index_name
    out_root.mkdir(parents=True, exist_ok=True)
    text = buf.getvalue()
    if not index_path.is_file() or index_path.read_text(encoding="utf-8") != text:
        index_path.write_text(text, encoding="utf-8")
    return LayoutResult(index_path, rows, copied)


def read_index(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
