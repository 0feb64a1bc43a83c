from .download import ConfigError, DownloadJournal, JournalExists, PolitenessPolicy, TokenBucket, download_all
from .groups import Grouping, lpt_groups, optimize_groups, read_group_file, write_group_file
from .layout import MissingFile, layout_transform
from .manifest import MalformedIndex, ManifestEntry, build_manifest, read_manifest, write_manifest

__all__ = [
    "ConfigError", "DownloadJournal", "JournalExists", "PolitenessPolicy", "TokenBucket", "download_all",
    "Grouping", "lpt_groups", "optimize_groups", "read_group_file", "write_group_file",
    "MissingFile", "layout_transform",
    "MalformedIndex", "ManifestEntry", "build_manifest", "read_manifest", "write_manifest",
]
