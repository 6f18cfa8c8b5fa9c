"""Speech-command classification as episodic REINFORCE with supervised pre-training."""

__version__ = "0.1.0"
