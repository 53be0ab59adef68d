"""Place-recognition evaluation and day/night routing toolkit."""

__version__ = "0.1.0"

# On-disk format versions, reported by ``nprkit --version``.
NPRE_VERSION = 1
MANIFEST_VERSION = 1
