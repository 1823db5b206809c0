"""Fringe-pattern phase demodulation: phase shifting, FT, WFT and a two-stage CNN."""

__version__ = "0.1.0"
