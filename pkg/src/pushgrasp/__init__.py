"""Push-grasp synergy laboratory: 2D tabletop, pixel-wise Q maps, two-stage training."""

__version__ = "0.1.0"
