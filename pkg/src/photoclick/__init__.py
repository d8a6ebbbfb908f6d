"""Parameter inference from simulated photon-click records of open quantum systems."""
__version__ = "0.1.0"
