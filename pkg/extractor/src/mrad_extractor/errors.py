"""Error taxonomy for the extractor."""


class ExtractorError(Exception):
    """Base class for extraction failures."""


class LayoutError(ExtractorError):
    """Dataset directory does not match the requested layout."""


class ImageError(ExtractorError):
    """An image or mask file is unreadable or inconsistent."""
