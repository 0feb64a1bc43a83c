"""Download manifests: one JSON object per line."""

from __future__ import annotations

import csv
import io
import json
import posixpath
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from urllib.parse import unquote, urlsplit

import numpy as np

from ..core import ClassSet

DEFAULT_TEMPLATE = "{species}/{split}/{filename}"
_HEX = re.compile(r"^[0-9a-f]+$")


class MalformedIndex(ValueError):
    pass


class InvalidEntry(ValueError):
    pass


def species_slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name.strip()).strip("_")


def url_host(url: str) -> str:
    return urlsplit(url).netloc


def url_filename(url: str) -> str:
    return posixpath.basename(unquote(urlsplit(url).path)) or "index"


@dataclass(frozen=True)
class ManifestEntry:
    url: str
    species_id: str
    expected_bytes: int | None = None
    checksum: str | None = None
    dest_template: str = DEFAULT_TEMPLATE
    split: str = "train"

    def __post_init__(self):
        parts = urlsplit(self.url)
        if parts.scheme not in ("http", "https") or not parts.netloc:
            raise InvalidEntry(f"not an http(s) URL: {self.url!r}")
        if self.expected_bytes is not None and self.expected_bytes < 0:
            raise InvalidEntry("expected_bytes must be >= 0")
        if self.checksum is not None:
            algo, _, digest = self.checksum.partition(":")
            if algo != "sha256" or len(digest) != 64 or not _HEX.match(digest):
                raise InvalidEntry(f"checksum must be 'sha256:<64 hex>', got {self.checksum!r}")
        if not self.species_id:
            raise InvalidEntry("species_id is empty")

    @property
    def host(self) -> str:
        return url_host(self.url)

    @property
    def filename(self) -> str:
        return url_filename(self.url)

    @property
    def dest(self) -> str:
        """Relative destination path with the template filled in."""
        path = self.dest_template.format(species=self.species_id, split=self.split, filename=self.filename)
        norm = posixpath.normpath(path)
        if norm.startswith("../") or norm == ".." or posixpath.isabs(norm):
            raise InvalidEntry(f"destination escapes the root: {path!r}")
        return norm

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        d = json.loads(line)
        return cls(**d)


def dumps_manifest(entries) -> str:
    return "".join(e.to_json() + "\n" for e in entries)


def loads_manifest(text: str) -> list[ManifestEntry]:
    return [ManifestEntry.from_json(line) for line in text.splitlines() if line.strip()]


def write_manifest(path, entries) -> None:
    Path(path).write_text(dumps_manifest(entries), encoding="utf-8")


def read_manifest(path) -> list[ManifestEntry]:
    return loads_manifest(Path(path).read_text(encoding="utf-8"))


def parse_index(text: str) -> list[tuple[str, str, int | None]]:
    """Rows ``species,url,size`` from a CSV source index; size may be blank."""
    reader = csv.DictReader(io.StringIO(text))
    need = {"species", "url"}
    if reader.fieldnames is None or not need <= set(reader.fieldnames):
        raise MalformedIndex(f"index needs columns {sorted(need)} (plus optional size)")
    rows = []
    for lineno, r in enumerate(reader, start=2):
        species, url = (r.get("species") or "").strip(), (r.get("url") or "").strip()
        if not species or not url:
            raise MalformedIndex(f"line {lineno}: empty species or url")
        raw = (r.get("size") or "").strip()
        try:
            size = int(raw) if raw else None
        except ValueError:
            raise MalformedIndex(f"line {lineno}: size {raw!r} is not an integer") from None
        if size is not None and size < 0:
            raise MalformedIndex(f"line {lineno}: negative size")
        rows.append((species, url, size))
    return rows


def build_manifest(class_set: ClassSet, index_text: str, per_class_limit: int | None = None, *,
                   seed: int | None = None, template: str = DEFAULT_TEMPLATE,
                   split: str = "train") -> list[ManifestEntry]:
    """Entries for the species of ``class_set`` found in the index, capped per class.

    Without ``seed`` the cap keeps the first rows in index order; with a
    seed the rows of each species are shuffled first.  Output follows the
    class-set order.
    """
    rows = parse_index(index_text)
    by_species: dict[str, list] = {}
    for species, url, size in rows:
        by_species.setdefault(species, []).append((url, size))
    out = []
    for i, name in enumerate(class_set.names):
        got = by_species.get(name, [])
        if seed is not None:
            order = np.random.default_rng([seed, i]).permutation(len(got))
            got = [got[j] for j in order]
        if per_class_limit is not None:
            got = got[:per_class_limit]
        for url, size in got:
            try:
                out.append(ManifestEntry(url, species_slug(name), size, None, template, split))
            except InvalidEntry as exc:
                raise MalformedIndex(str(exc)) from None
    return out
