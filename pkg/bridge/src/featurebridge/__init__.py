"""Image-to-CFMP feature extraction bridge."""

from .extract import ExtractionJob, collect_images, extract

__version__ = "0.1.0"
