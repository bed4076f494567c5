"""Deep-RL rate control for URLLC downlinks with an optimization-based action reducer."""

__version__ = "0.1.0"
