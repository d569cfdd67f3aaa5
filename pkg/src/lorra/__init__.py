"""Look, Read, Reason & Answer: VQA with a copy-from-OCR answer space."""

__version__ = "0.1.0"
