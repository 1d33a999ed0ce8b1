"""burstq - elastic cloud-bursting batch service with a simulated provider."""

__version__ = "0.1.0"
