"""NO2 estimation from overhead image patches with domain-adversarial adaptation."""

__version__ = "0.1.0"
