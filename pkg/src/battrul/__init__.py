"""Two-stage remaining-useful-life prediction for lithium-ion battery cells."""

__version__ = "0.1.0"
