"""Single-shot QoS prediction for every concurrent RTP flow of a session."""

__version__ = "0.1.0"
