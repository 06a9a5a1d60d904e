"""Socket Store: a marketplace for reusable network-logic modules running
over a simulated SDN, plus the flash-delivery reference module."""

__version__ = "0.1.0"
