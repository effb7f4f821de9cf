"""Domain-adversarial single-stage detection on procedural two-domain scenes."""

__version__ = "0.1.0"
