"""Learning AC optimal power flow setpoints with proximal policy optimization."""
__version__ = "0.1.0"
