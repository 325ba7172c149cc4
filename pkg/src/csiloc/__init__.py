"""Desk-scale CSI localization toolkit: channel simulation, blockage augmentation,
attention regression networks and the static-to-changing evaluation protocol."""

__version__ = "0.1.0"
CONTAINER_VERSION = 1
