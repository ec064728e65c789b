"""Continual visual SLAM workbench: dual-network online adaptation on synthetic scenes."""

__version__ = "0.1.0"
