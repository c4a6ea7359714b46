"""Fleming-Viot-type particle simulator with a spectral limit-flow toolkit."""

__version__ = "0.1.0"
