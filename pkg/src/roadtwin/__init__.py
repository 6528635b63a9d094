"""Roadside multi-sensor perception sandbox.

Simulates highway traffic observed by gantry-mounted cameras and radars,
tracks each sensor stream with a labeled GM-PHD filter, fuses the tracks
hierarchically into a digital twin of the covered stretch, and evaluates
the twin against ground truth.
"""

__version__ = "0.1.0"
